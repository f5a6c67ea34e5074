import math

import numpy as np
import pytest
import torch

from d2dgs.render import (Intersection, composite_pixel, gaussian_value, ray_splat_intersect,
                          render_reference, render_view)
from d2dgs.scene import CameraView, Surfels, axis_angle_quat


def front_camera(size=16, fov=0.8, distance=3.0):
    return CameraView.look_at([0.0, -distance, 0.0], [0.0, 0.0, 0.0], width=size, height=size, fov_x=fov)


def facing_quat():
    # surfel normal along -y, towards a camera on the -y axis
    return axis_angle_quat([1, 0, 0], math.pi / 2).numpy()


def test_gaussian_values():
    assert gaussian_value(0, 0) == 1.0
    assert gaussian_value(1, 0) == pytest.approx(0.606531, abs=1e-6)
    assert gaussian_value(3, 4) == pytest.approx(math.exp(-12.5))
    assert gaussian_value(3, 4) == pytest.approx(3.727e-6, rel=1e-3)


def test_ray_through_center():
    hit = ray_splat_intersect([0, 0, 1], [0, 0, 2], [1, 0, 0], [0, 1, 0], [0, 0, -1], [1, 1])
    assert (hit.u, hit.v) == (0.0, 0.0)
    assert hit.gaussian == 1.0 and hit.z == 2.0


def test_ray_parallel_to_plane():
    assert ray_splat_intersect([1, 0, 0], [0, 0, 2], [1, 0, 0], [0, 0, 1], [0, 1, 0], [1, 1]) is None


def test_ray_one_unit_off_center():
    # the ray towards (1, 0, 2) meets the plane z=2 one unit along t_u
    hit = ray_splat_intersect([0.5, 0, 1], [0, 0, 2], [1, 0, 0], [0, 1, 0], [0, 0, -1], [1, 1])
    assert hit.u == pytest.approx(1.0) and hit.v == pytest.approx(0.0)
    assert hit.gaussian == pytest.approx(math.exp(-0.5))


def test_ray_behind_near_plane_and_outside_cutoff():
    assert ray_splat_intersect([0, 0, 1], [0, 0, -2], [1, 0, 0], [0, 1, 0], [0, 0, 1], [1, 1]) is None
    assert ray_splat_intersect([2.0, 0, 1], [0, 0, 2], [1, 0, 0], [0, 1, 0], [0, 0, -1], [1, 1]) is None


def test_composite_empty():
    r = composite_pixel([], [0.2, 0.3, 0.4])
    np.testing.assert_allclose(r.color, [0.2, 0.3, 0.4])
    assert r.alpha == 0 and r.depth_expected == 0 and r.depth_median == 0


def test_composite_opaque():
    r = composite_pixel([Intersection(0, 0, 0, 2.0, 1.0, 1.0, np.array([1.0, 0, 0]))], [1, 1, 1])
    np.testing.assert_allclose(r.color, [1, 0, 0])
    assert r.alpha == 1 and r.depth_expected == 2 and r.depth_median == 2


def test_composite_two_half_layers():
    c1, c2 = np.array([0.2, 0.4, 0.6]), np.array([1.0, 0.5, 0.0])
    hits = [Intersection(0, 0, 0, 1.0, 1.0, 0.5, c1), Intersection(1, 0, 0, 2.0, 1.0, 0.5, c2)]
    r = composite_pixel(hits, [0, 0, 0], verify=True)
    np.testing.assert_allclose(r.color, 0.5 * c1 + 0.25 * c2)
    assert r.alpha == pytest.approx(0.75)
    assert r.depth_expected == pytest.approx(4.0 / 3.0)
    assert r.depth_median == 1.0


def test_composite_rejects_unsorted():
    hits = [Intersection(0, 0, 0, 2.0, 1.0, 0.5), Intersection(1, 0, 0, 1.0, 1.0, 0.5)]
    with pytest.raises(ValueError):
        composite_pixel(hits, [0, 0, 0], verify=True)


def test_empty_scene_is_background():
    empty = Surfels.create(np.zeros((0, 3)))
    r = render_view(empty, front_camera(), (1.0, 1.0, 1.0))
    np.testing.assert_array_equal(r.rgb.numpy(), 1.0)
    np.testing.assert_array_equal(r.alpha.numpy(), 0.0)


def test_opaque_red_disc():
    cam = front_camera(16)
    # a disc of radius 0.6 tiled with small, nearly opaque surfels
    g = np.arange(-0.6, 0.61, 0.04)
    xz = np.array([(x, z) for x in g for z in g if x * x + z * z <= 0.36])
    means = np.column_stack([xz[:, 0], np.zeros(len(xz)), xz[:, 1]])
    s = Surfels.create(means, quats=np.tile(facing_quat(), (len(xz), 1)), scales=[0.04, 0.04],
                       opacities=0.999, colors=[[1.0, 0, 0]], sh_degree=0)
    r = render_view(s, cam, (1.0, 1.0, 1.0))
    rgb = r.rgb.numpy()
    np.testing.assert_allclose(rgb[7:9, 7:9].reshape(-1, 3), [[1, 0, 0]] * 4, atol=1e-3)
    assert r.alpha.numpy()[7:9, 7:9].min() > 1 - 1e-3
    for y, x in [(0, 0), (0, 15), (15, 0), (15, 15)]:
        np.testing.assert_array_equal(rgb[y, x], [1, 1, 1])
    assert r.depth_median.numpy()[8, 8] == pytest.approx(3.0, abs=1e-9)


def test_normals_face_camera():
    cam = front_camera(16)
    q = axis_angle_quat([1, 0, 0], -math.pi / 2).numpy()     # normal pointing away from the camera
    s = Surfels.create([[0.0, 0, 0]], quats=[q], scales=[0.5, 0.5], opacities=0.99)
    n = render_view(s, cam).normal.numpy()[8, 8]
    np.testing.assert_allclose(n, [0, 0, -1], atol=1e-9)


def random_scene(rng, n, spread=0.6):
    return Surfels.create(
        rng.uniform(-spread, spread, size=(n, 3)),
        quats=rng.normal(size=(n, 4)),
        scales=rng.uniform(0.02, 0.25, size=(n, 2)),
        opacities=rng.uniform(0.05, 0.99, size=n),
        colors=rng.uniform(size=(n, 3)),
    )


@pytest.mark.parametrize("seed", [0, 1])
def test_tiled_matches_reference(seed):
    rng = np.random.default_rng(seed)
    s = random_scene(rng, 25)
    cam = CameraView.look_at(rng.normal(size=3) * 0.3 + [0, -2.5, 0.5], [0, 0, 0], width=20, height=16, fov_x=0.9)
    fast = render_view(s, cam, (0.1, 0.2, 0.3), tile_size=8).numpy()
    ref = render_reference(s, cam, (0.1, 0.2, 0.3))
    for key in ("rgb", "alpha", "depth_expected", "depth_median", "normal"):
        np.testing.assert_allclose(fast[key], ref[key], atol=1e-6, err_msg=key)


def test_tile_size_does_not_change_result():
    rng = np.random.default_rng(5)
    s = random_scene(rng, 40)
    cam = front_camera(24)
    a = render_view(s, cam, tile_size=None).numpy()
    for ts in (4, 7, 16):
        b = render_view(s, cam, tile_size=ts).numpy()
        for key in a:
            np.testing.assert_allclose(b[key], a[key], atol=1e-12, err_msg=f"{key} tile {ts}")


def test_records_are_depth_sorted_and_reproduce_alpha():
    rng = np.random.default_rng(2)
    r = render_view(random_scene(rng, 30), front_camera(16))
    w, z = r.records.weights, r.records.depths
    valid = w > 0
    dz = z[..., 1:] - z[..., :-1]
    assert bool(((dz >= 0) | ~valid[..., 1:]).all())
    np.testing.assert_allclose(w.sum(-1).numpy(), r.alpha.numpy(), atol=1e-12)


def test_gradients_flow_to_every_surfel_parameter():
    rng = np.random.default_rng(3)
    s = random_scene(rng, 6, spread=0.3).requires_grad_(True)
    r = render_view(s, front_camera(12))
    (r.rgb.sum() + r.depth_expected.sum()).backward()
    for name, t in s.tensors().items():
        assert t.grad is not None and torch.isfinite(t.grad).all(), name
        assert t.grad.abs().sum() > 0, name
