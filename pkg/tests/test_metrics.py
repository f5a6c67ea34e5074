import math

import numpy as np
import pytest

from d2dgs.losses import SSIM_C1, gaussian_window, loss_ssim
from d2dgs.meshing import TriangleMesh
from d2dgs.metrics import (REPORT_COLUMNS, chamfer, emd, emd_match, evaluate_sequence, psnr, sample_mesh,
                           ssim)
from d2dgs.synthetic import uv_sphere_mesh


def test_psnr_cases():
    a = np.random.default_rng(0).uniform(size=(8, 8, 3))
    assert psnr(a, a) == math.inf
    assert psnr(np.zeros((4, 4)), np.full((4, 4), 0.1)) == pytest.approx(20.0)
    assert psnr(np.zeros((4, 4, 3)), np.full((4, 4, 3), 0.5)) == pytest.approx(6.0206, abs=1e-4)
    with pytest.raises(ValueError):
        psnr(np.zeros((4, 4)), np.zeros((4, 5)))


def test_ssim_identity_and_symmetry():
    rng = np.random.default_rng(1)
    a, b = rng.uniform(size=(16, 16, 3)), rng.uniform(size=(16, 16, 3))
    assert ssim(a, a) == pytest.approx(1.0)
    assert ssim(a, b) == pytest.approx(ssim(b, a), abs=1e-15)


def test_ssim_constant_shift():
    rng = np.random.default_rng(2)
    a = rng.uniform(0, 0.8, size=(13, 13))
    b = a + 0.1
    # variances and covariance are unchanged by a shift, so only the luminance term remains;
    # window means by direct summation over the 3x3 valid window positions
    g = gaussian_window()
    w2 = np.outer(g, g)
    terms = []
    for i in range(3):
        for j in range(3):
            mu_a = float((w2 * a[i:i + 11, j:j + 11]).sum())
            mu_b = mu_a + 0.1
            terms.append((2 * mu_a * mu_b + SSIM_C1) / (mu_a ** 2 + mu_b ** 2 + SSIM_C1))
    assert ssim(a, b) == pytest.approx(np.mean(terms), abs=1e-12)
    assert ssim(a, b) < 1.0


def test_ssim_agrees_with_training_loss():
    import torch
    rng = np.random.default_rng(3)
    a, b = rng.uniform(size=(20, 18, 3)), rng.uniform(size=(20, 18, 3))
    assert 1.0 - ssim(a, b) == pytest.approx(float(loss_ssim(torch.as_tensor(a), torch.as_tensor(b))), abs=1e-12)


def triangles_with_areas():
    v = np.array([[0, 0, 0], [1, 0, 0], [0, 2, 0], [5, 0, 0], [8, 0, 0], [5, 2, 0]], dtype=float)
    return TriangleMesh(v, np.array([[0, 1, 2], [3, 4, 5]]))


def test_samples_lie_inside_a_single_triangle():
    v = np.array([[0, 0, 0], [2, 0, 0], [0, 1, 1]], dtype=float)
    s = sample_mesh(TriangleMesh(v, np.array([[0, 1, 2]])), 500, seed=0)
    assert (s.barycentric >= 0).all()
    np.testing.assert_allclose(s.barycentric.sum(1), 1.0)
    np.testing.assert_allclose(s.barycentric @ v, s.points)


def test_samples_follow_area():
    s = sample_mesh(triangles_with_areas(), 4000, seed=0)
    # areas 1 and 3: binomial(4000, 0.75) has sd ~27, far inside the +-150 band
    assert abs(int((s.faces == 1).sum()) - 3000) <= 150


def test_sampling_is_seeded():
    a = sample_mesh(triangles_with_areas(), 100, seed=4)
    b = sample_mesh(triangles_with_areas(), 100, seed=4)
    np.testing.assert_array_equal(a.points, b.points)


def test_chamfer_cases():
    pts = np.random.default_rng(5).normal(size=(50, 3))
    assert chamfer(pts, pts) == 0.0
    assert chamfer([[0, 0, 0]], [[1, 0, 0]]) == pytest.approx(2.0)
    with pytest.raises(ValueError):
        chamfer(np.zeros((0, 3)), pts)


def brute_chamfer(a, b):
    ab = np.mean([min(np.linalg.norm(x - y) for y in b) for x in a])
    ba = np.mean([min(np.linalg.norm(x - y) for x in a) for y in b])
    return ab + ba


def test_chamfer_matches_brute_force():
    rng = np.random.default_rng(6)
    a, b = rng.normal(size=(200, 3)), rng.normal(size=(200, 3)) + 0.2
    assert chamfer(a, b) == pytest.approx(brute_chamfer(a, b), abs=1e-9)


def test_emd_cases():
    pts = np.random.default_rng(7).normal(size=(60, 3))
    assert emd(pts, pts) == 0.0
    assert emd([[0, 0, 0]], [[1, 0, 0]]) == pytest.approx(1.0)
    perm = np.random.default_rng(8).permutation(60)
    assert emd(pts, pts[perm]) == 0.0


def test_emd_exact_on_small_sets():
    # 2 points each: the two possible matchings can be enumerated
    a = np.array([[0, 0, 0], [1, 0, 0]], dtype=float)
    b = np.array([[1.1, 0, 0], [0, 0.5, 0]])
    m1 = (np.linalg.norm(a[0] - b[0]) + np.linalg.norm(a[1] - b[1])) / 2
    m2 = (np.linalg.norm(a[0] - b[1]) + np.linalg.norm(a[1] - b[0])) / 2
    r = emd_match(a, b)
    assert r.mode == "exact" and r.value == pytest.approx(min(m1, m2))


def test_emd_sinkhorn_close_to_exact():
    rng = np.random.default_rng(9)
    a, b = rng.normal(size=(300, 3)), rng.normal(size=(300, 3)) + [0.5, 0, 0]
    exact = emd_match(a, b).value
    approx = emd_match(a, b, exact_limit=100)
    assert approx.mode == "sinkhorn"
    assert approx.value == pytest.approx(exact, rel=0.05)


def test_emd_resamples_unequal_sets():
    rng = np.random.default_rng(10)
    r = emd_match(rng.normal(size=(40, 3)), rng.normal(size=(25, 3)))
    assert r.resampled


def test_sequence_report():
    gt = uv_sphere_mesh(0.5, n_lat=16, n_lon=32)
    shifted = TriangleMesh(gt.vertices + [0.2, 0, 0], gt.faces)
    rep = evaluate_sequence([gt, shifted, gt], [gt, gt, gt], [0.0, 0.5, 1.0], samples=2000, emd_samples=200)
    assert len(rep.rows) == 3
    mean = rep.mean()
    for c in ("cd", "emd"):
        assert mean[c] == pytest.approx(np.mean([r[c] for r in rep.rows]))
    # identical meshes sit at the resampling noise floor
    floor = chamfer(sample_mesh(gt, 2000, 0), sample_mesh(gt, 2000, 1))
    assert rep.rows[0]["cd"] < 2 * floor and rep.rows[1]["cd"] > 2 * floor
    csv = rep.to_csv().splitlines()
    assert csv[0] == ",".join(REPORT_COLUMNS) and csv[-1].startswith("mean,")
    assert "inf" not in rep.table() and len(csv) == 5


def test_sequence_length_mismatch():
    gt = uv_sphere_mesh(0.5, n_lat=8, n_lon=16)
    with pytest.raises(ValueError):
        evaluate_sequence([gt], [gt, gt])
