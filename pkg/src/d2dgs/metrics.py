"""Image and geometry metrics: PSNR, SSIM, Chamfer distance and EMD."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy import ndimage
from scipy.optimize import linear_sum_assignment
from scipy.spatial import cKDTree
from scipy.special import logsumexp

from .losses import SSIM_C1, SSIM_C2, SSIM_WINDOW, gaussian_window
from .meshing import TriangleMesh

EXACT_EMD_LIMIT = 512


def _pair(a, b):
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    return a, b


def psnr(a, b) -> float:
    """``10 log10(1 / MSE)`` for images in [0, 1]; ``inf`` for identical images."""
    a, b = _pair(a, b)
    mse = float(np.mean((a - b) ** 2))
    if mse == 0.0:
        return float("inf")
    return 10.0 * np.log10(1.0 / mse)


def ssim(a, b) -> float:
    """Mean SSIM over 'valid' 11x11 Gaussian windows, averaged over channels."""
    a, b = _pair(a, b)
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    g = gaussian_window()
    h = SSIM_WINDOW // 2

    def blur(x):
        y = ndimage.correlate1d(x, g, axis=0, mode="constant")
        y = ndimage.correlate1d(y, g, axis=1, mode="constant")
        return y[h:x.shape[0] - h, h:x.shape[1] - h]

    mu_a, mu_b = blur(a), blur(b)
    saa = blur(a * a) - mu_a ** 2
    sbb = blur(b * b) - mu_b ** 2
    sab = blur(a * b) - mu_a * mu_b
    num = (2 * mu_a * mu_b + SSIM_C1) * (2 * sab + SSIM_C2)
    den = (mu_a ** 2 + mu_b ** 2 + SSIM_C1) * (saa + sbb + SSIM_C2)
    return float((num / den).mean())


# --------------------------------------------------------------------------- #
# point sets
# --------------------------------------------------------------------------- #


@dataclass
class PointSample:
    points: np.ndarray                      # (n, 3)
    faces: np.ndarray | None = None         # source triangle per point
    barycentric: np.ndarray | None = None   # (n, 3)

    def __len__(self) -> int:
        return len(self.points)


def sample_mesh(mesh: TriangleMesh, n: int, seed: int = 0) -> PointSample:
    """Area-weighted triangle choice, then uniform barycentric sampling."""
    if mesh.is_empty:
        raise ValueError("cannot sample an empty mesh")
    areas = mesh.face_areas()
    if areas.sum() <= 0:
        raise ValueError("cannot sample a mesh with zero area")
    rng = np.random.default_rng(seed)
    tri = rng.choice(len(areas), size=n, p=areas / areas.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    bary = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    corners = mesh.vertices[mesh.faces[tri]]          # (n, 3, 3)
    pts = np.einsum("nk,nkd->nd", bary, corners)
    return PointSample(pts, tri, bary)


def _points(x) -> np.ndarray:
    pts = x.points if isinstance(x, PointSample) else np.asarray(x, dtype=np.float64)
    pts = np.asarray(pts, dtype=np.float64).reshape(-1, 3)
    if len(pts) == 0:
        raise ValueError("empty point set")
    return pts


def chamfer(a, b) -> float:
    """Mean nearest-neighbor distance a->b plus b->a (unsquared)."""
    pa, pb = _points(a), _points(b)
    da, _ = cKDTree(pb).query(pa)
    db, _ = cKDTree(pa).query(pb)
    return float(da.mean() + db.mean())


@dataclass
class EmdResult:
    value: float
    mode: str           # "exact" or "sinkhorn"
    resampled: bool = False


def _sinkhorn_emd(cost: np.ndarray, eps_rel: float = 0.01, iters: int = 1000, tol: float = 1e-8) -> float:
    """Log-domain Sinkhorn with uniform marginals; transport cost of the final plan."""
    n = cost.shape[0]
    eps = eps_rel * float(cost.mean())
    log_mu = -np.log(n)
    f = np.zeros(n)
    g = np.zeros(n)
    for _ in range(iters):
        f = eps * (log_mu - logsumexp((g[None, :] - cost) / eps, axis=1))
        g = eps * (log_mu - logsumexp((f[:, None] - cost) / eps, axis=0))
        rows = np.exp(logsumexp((f[:, None] + g[None, :] - cost) / eps, axis=1))
        if np.abs(rows * n - 1.0).max() < tol:
            break
    plan = np.exp((f[:, None] + g[None, :] - cost) / eps)
    return float((plan * cost).sum() / plan.sum())


def emd_match(a, b, exact_limit: int = EXACT_EMD_LIMIT, seed: int = 0) -> EmdResult:
    """Mean distance of the minimum-cost perfect matching between equal-size sets.

    Unequal sets are subsampled to the smaller size. Exact assignment up to
    ``exact_limit`` points, entropic (Sinkhorn) approximation beyond.
    """
    pa, pb = _points(a), _points(b)
    resampled = False
    if len(pa) != len(pb):
        rng = np.random.default_rng(seed)
        m = min(len(pa), len(pb))
        pa = pa[np.sort(rng.choice(len(pa), m, replace=False))] if len(pa) > m else pa
        pb = pb[np.sort(rng.choice(len(pb), m, replace=False))] if len(pb) > m else pb
        resampled = True
    cost = np.linalg.norm(pa[:, None, :] - pb[None, :, :], axis=-1)
    if len(pa) <= exact_limit:
        rows, cols = linear_sum_assignment(cost)
        return EmdResult(float(cost[rows, cols].mean()), "exact", resampled)
    return EmdResult(_sinkhorn_emd(cost), "sinkhorn", resampled)


def emd(a, b, exact_limit: int = EXACT_EMD_LIMIT) -> float:
    return emd_match(a, b, exact_limit).value


# --------------------------------------------------------------------------- #
# sequence reports
# --------------------------------------------------------------------------- #

REPORT_COLUMNS = ("t", "cd", "emd", "psnr", "ssim")


@dataclass
class SequenceReport:
    rows: list[dict]
    emd_mode: str
    samples: int
    emd_samples: int

    def mean(self) -> dict:
        return {k: float(np.mean([r[k] for r in self.rows])) for k in REPORT_COLUMNS[1:]}

    def to_csv(self) -> str:
        def fmt(x):
            return "inf" if np.isinf(x) else ("nan" if np.isnan(x) else f"{x:.6f}")

        lines = [",".join(REPORT_COLUMNS)]
        for r in self.rows:
            lines.append(",".join([f"{r['t']:.6f}"] + [fmt(r[k]) for k in REPORT_COLUMNS[1:]]))
        m = self.mean()
        lines.append(",".join(["mean"] + [fmt(m[k]) for k in REPORT_COLUMNS[1:]]))
        return "\n".join(lines) + "\n"

    def write_csv(self, path) -> None:
        with open(path, "w") as fh:
            fh.write(self.to_csv())

    def table(self) -> str:
        head = f"{'t':>8} {'CD':>10} {'EMD':>10} {'PSNR':>8} {'SSIM':>7}"
        out = [head, "-" * len(head)]
        m = self.mean()
        for label, r in [(f"{r['t']:8.4f}", r) for r in self.rows] + [(f"{'mean':>8}", m)]:
            out.append(f"{label} {r['cd']:10.5f} {r['emd']:10.5f} {r['psnr']:8.3f} {r['ssim']:7.4f}")
        out.append(f"CD: sum of mean nearest-neighbor L2 distances on {self.samples} samples per mesh, "
                   f"scene units; EMD: mean matched L2 distance on {self.emd_samples} samples ({self.emd_mode})")
        return "\n".join(out)


def evaluate_sequence(pred_meshes: Sequence[TriangleMesh], gt_meshes: Sequence[TriangleMesh],
                      times: Sequence[float] | None = None, image_pairs=None, *,
                      samples: int = 10_000, emd_samples: int = EXACT_EMD_LIMIT,
                      seed: int = 0) -> SequenceReport:
    """Per-timestamp CD/EMD and optional PSNR/SSIM.

    ``image_pairs[i]`` is a list of (rendered, truth) images for timestamp i; missing
    images leave NaN in the photometric columns.
    """
    if len(pred_meshes) != len(gt_meshes):
        raise ValueError("length mismatch between predicted and ground-truth meshes")
    times = list(range(len(pred_meshes))) if times is None else list(times)
    if len(times) != len(pred_meshes) or (image_pairs is not None and len(image_pairs) != len(times)):
        raise ValueError("length mismatch between meshes, timestamps and images")
    rows, modes = [], set()
    for i, (pm, gm) in enumerate(zip(pred_meshes, gt_meshes)):
        pa, pb = sample_mesh(pm, samples, seed), sample_mesh(gm, samples, seed + 1)
        sub = np.random.default_rng(seed + 2).choice(samples, min(emd_samples, samples), replace=False)
        em = emd_match(pa.points[sub], pb.points[sub])
        modes.add(em.mode)
        p_val, s_val = float("nan"), float("nan")
        if image_pairs is not None and len(image_pairs[i]):
            p_val = float(np.mean([psnr(x, y) for x, y in image_pairs[i]]))
            s_val = float(np.mean([ssim(x, y) for x, y in image_pairs[i]]))
        rows.append({"t": float(times[i]), "cd": chamfer(pa, pb), "emd": em.value, "psnr": p_val, "ssim": s_val})
    return SequenceReport(rows, "+".join(sorted(modes)) or "exact", samples, emd_samples)
