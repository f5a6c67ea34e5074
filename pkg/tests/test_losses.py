import math

import numpy as np
import pytest
import torch

from d2dgs.losses import (SSIM_C1, SSIM_C2, LossWeights, loss_depth_distortion, loss_l1,
                          loss_normal_consistency, loss_ssim, loss_total, ndc_depth, normal_from_depth)
from d2dgs.render import IntersectionRecords
from d2dgs.scene import CameraView

T = torch.float64


def records(weights, depths, normals=None):
    w = torch.tensor(weights, dtype=T).reshape(1, 1, -1)
    z = torch.tensor(depths, dtype=T).reshape(1, 1, -1)
    n = torch.zeros(1, 1, w.shape[-1], 3, dtype=T) if normals is None else torch.tensor(normals, dtype=T).reshape(1, 1, -1, 3)
    return IntersectionRecords(w, z, n)


def image(value, size=16):
    return torch.full((size, size, 3), float(value), dtype=T)


def test_l1():
    a = torch.rand(8, 8, 3, dtype=T)
    assert float(loss_l1(a, a)) == 0.0
    assert float(loss_l1(image(0, 8), image(0.5, 8))) == pytest.approx(0.5)
    b = torch.rand(8, 8, 3, dtype=T)
    assert float(loss_l1(a, b)) == float(loss_l1(b, a))
    with pytest.raises(ValueError):
        loss_l1(a, b[:4])


def test_ssim_loss():
    a = torch.rand(16, 16, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(0))
    b = torch.rand(16, 16, 3, dtype=torch.float64, generator=torch.Generator().manual_seed(1))
    assert float(loss_ssim(a, a)) == pytest.approx(0.0, abs=1e-12)
    # constant images: zero variance, so SSIM = C1 / (mu_x^2 + mu_y^2 + C1) with mu = (0, 1)
    expected = 1.0 - SSIM_C1 / (1.0 + SSIM_C1) * (SSIM_C2 / SSIM_C2)
    assert float(loss_ssim(image(0), image(1))) == pytest.approx(expected, abs=1e-12)
    assert expected == pytest.approx(0.9999, abs=1e-5)
    assert float(loss_ssim(a, b)) == pytest.approx(float(loss_ssim(b, a)), abs=1e-15)


def test_ssim_too_small():
    with pytest.raises(ValueError):
        loss_ssim(image(0, 8), image(1, 8))


def test_distortion_cases():
    assert float(loss_depth_distortion(records([0.9], [2.0]))) == 0.0
    assert float(loss_depth_distortion(records([0.5, 0.5], [1.5, 1.5]))) == 0.0
    assert float(loss_depth_distortion(records([0.5, 0.5], [1.0, 2.0]))) == pytest.approx(0.25, abs=1e-15)


def test_distortion_matches_pair_enumeration():
    rng = np.random.default_rng(0)
    w, z = rng.uniform(0, 0.3, 6), rng.uniform(1, 4, 6)
    brute = sum(w[i] * w[j] * abs(z[i] - z[j]) for i in range(6) for j in range(i + 1, 6))
    assert float(loss_depth_distortion(records(w, z))) == pytest.approx(brute, abs=1e-12)


def test_squared_distortion_matches_pair_enumeration():
    assert float(loss_depth_distortion(records([0.5, 0.5], [1.0, 3.0]), power=2)) == pytest.approx(1.0, abs=1e-15)
    rng = np.random.default_rng(1)
    w, z = rng.uniform(0, 0.3, 7), rng.uniform(1, 4, 7)
    brute = sum(w[i] * w[j] * (z[i] - z[j]) ** 2 for i in range(7) for j in range(i + 1, 7))
    assert float(loss_depth_distortion(records(w, z), power=2)) == pytest.approx(brute, abs=1e-12)
    with pytest.raises(ValueError):
        loss_depth_distortion(records(w, z), power=3)


def test_distortion_averages_over_hit_pixels_only():
    w = torch.tensor([[[0.5, 0.5]], [[0.0, 0.0]]], dtype=T)
    z = torch.tensor([[[1.0, 2.0]], [[0.0, 0.0]]], dtype=T)
    r = IntersectionRecords(w, z, torch.zeros(2, 1, 2, 3, dtype=T))
    assert float(loss_depth_distortion(r)) == pytest.approx(0.25)


def test_distortion_depth_remap():
    near, far = 0.2, 100.0
    assert float(ndc_depth(torch.tensor(near, dtype=T), near, far)) == pytest.approx(0.0)
    assert float(ndc_depth(torch.tensor(far, dtype=T), near, far)) == pytest.approx(1.0)
    m = ndc_depth(torch.tensor([1.0, 2.0], dtype=T), near, far).numpy()
    got = float(loss_depth_distortion(records([0.5, 0.5], [1.0, 2.0]), (near, far)))
    assert got == pytest.approx(0.25 * abs(m[1] - m[0]), abs=1e-15)


def camera(size=12):
    return CameraView(size, size, 10.0, 10.0, size / 2, size / 2, np.eye(3), np.zeros(3))


def plane_depth(cam, normal, point):
    """Depth (camera z) of the plane n.x = n.p0 along each pixel ray."""
    d = cam.pixel_directions()
    return torch.as_tensor(float(np.dot(normal, point)) / (d @ normal))


def test_normals_of_fronto_parallel_plane():
    cam = camera()
    n = normal_from_depth(torch.full((12, 12), 2.0, dtype=T), cam).numpy()
    np.testing.assert_allclose(n[:-1, :-1], np.broadcast_to([0, 0, -1], (11, 11, 3)), atol=1e-12)


def test_normals_of_tilted_plane():
    cam = camera()
    normal = np.array([0.0, math.sin(math.pi / 4), -math.cos(math.pi / 4)])
    n = normal_from_depth(plane_depth(cam, normal, [0, 0, 3.0]), cam).numpy()
    np.testing.assert_allclose(n[:-1, :-1], np.broadcast_to(normal, (11, 11, 3)), atol=1e-3)


def test_normal_undefined_at_isolated_pixel():
    depth = torch.zeros(5, 5, dtype=T)
    depth[2, 2] = 1.0
    assert float(normal_from_depth(depth, camera(5)).abs().sum()) == 0.0


def test_normal_consistency_cases():
    up = [0.0, 0.0, -1.0]
    nmap = torch.tensor([[up]], dtype=T)
    assert float(loss_normal_consistency(records([0.7], [1.0], [up]), nmap)) == 0.0
    assert float(loss_normal_consistency(records([1.0], [1.0], [[1.0, 0, 0]]), nmap)) == pytest.approx(1.0)
    tilted = [math.sin(math.pi / 4), 0.0, -math.cos(math.pi / 4)]
    got = float(loss_normal_consistency(records([0.5], [1.0], [tilted]), nmap))
    assert got == pytest.approx(0.5 * (1 - math.cos(math.pi / 4)), abs=1e-12)
    assert got == pytest.approx(0.14645, abs=1e-5)


def test_total_weights():
    assert float(loss_total({"l1": 0.0, "ssim": 0.0, "normal": 0.0, "distortion": 0.0}, LossWeights())) == 0.0
    comp = {"l1": 0.1, "ssim": 0.05, "normal": 0.01, "distortion": 0.0001}
    assert loss_total(comp, LossWeights()) == pytest.approx(0.2502, abs=1e-12)
    a = loss_total(comp, LossWeights(distortion=1000.0))
    b = loss_total(comp, LossWeights(distortion=2000.0))
    assert b - a == pytest.approx(1000.0 * 0.0001, abs=1e-12)


def test_weights_validation():
    with pytest.raises(ValueError):
        LossWeights(normal=-1.0)
    with pytest.raises(ValueError):
        LossWeights(distortion_range=(1.0, 0.5))
    with pytest.raises(ValueError):
        LossWeights(distortion_power=0)
    with pytest.raises(ValueError):
        LossWeights(normal_depth="mean")
