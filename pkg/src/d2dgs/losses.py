"""Photometric and geometric loss terms."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .render import IntersectionRecords
from .scene import DTYPE, CameraView

SSIM_WINDOW = 11
SSIM_SIGMA = 1.5
SSIM_C1 = 0.01 ** 2
SSIM_C2 = 0.03 ** 2


@dataclass
class LossWeights:
    ssim: float = 1.0
    normal: float = 0.02
    distortion: float = 1000.0
    # near/far planes of the depth remap used inside the distortion term; None keeps metric depth
    distortion_range: tuple[float, float] | None = (0.2, 100.0)
    distortion_power: int = 2         # 1 sums absolute depth gaps, 2 squared ones
    normal_depth: str = "median"      # depth map the L_n target normals come from, or "expected"

    def __post_init__(self):
        if min(self.ssim, self.normal, self.distortion) < 0:
            raise ValueError("loss weights must be non-negative")
        if self.distortion_range is not None:
            near, far = self.distortion_range
            if not 0 < near < far:
                raise ValueError("distortion_range must satisfy 0 < near < far")
            self.distortion_range = (float(near), float(far))
        if self.normal_depth not in ("median", "expected"):
            raise ValueError("normal_depth must be 'median' or 'expected'")
        if self.distortion_power not in (1, 2):
            raise ValueError("distortion_power must be 1 or 2")


def _check_same(a: torch.Tensor, b: torch.Tensor):
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {tuple(a.shape)} vs {tuple(b.shape)}")


def loss_l1(rendered: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    _check_same(rendered, truth)
    return (rendered - truth).abs().mean()


def gaussian_window(size: int = SSIM_WINDOW, sigma: float = SSIM_SIGMA) -> np.ndarray:
    x = np.arange(size) - size // 2
    g = np.exp(-(x ** 2) / (2 * sigma ** 2))
    return g / g.sum()


def ssim_torch(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Mean SSIM of two (H, W, C) images over 'valid' window positions."""
    _check_same(a, b)
    if a.shape[0] < SSIM_WINDOW or a.shape[1] < SSIM_WINDOW:
        raise ValueError("image smaller than the SSIM window")
    ch = a.shape[2]
    g = torch.as_tensor(gaussian_window(), dtype=a.dtype)
    kernel = (g[:, None] * g[None, :]).expand(5 * ch, 1, SSIM_WINDOW, SSIM_WINDOW)
    x = a.permute(2, 0, 1)
    y = b.permute(2, 0, 1)
    stats = F.conv2d(torch.cat([x, y, x * x, y * y, x * y])[None], kernel, groups=5 * ch)[0]
    mu_x, mu_y, exx, eyy, exy = stats.split(ch)
    sxx = exx - mu_x * mu_x
    syy = eyy - mu_y * mu_y
    sxy = exy - mu_x * mu_y
    num = (2 * mu_x * mu_y + SSIM_C1) * (2 * sxy + SSIM_C2)
    den = (mu_x * mu_x + mu_y * mu_y + SSIM_C1) * (sxx + syy + SSIM_C2)
    return (num / den).mean()


def loss_ssim(rendered: torch.Tensor, truth: torch.Tensor) -> torch.Tensor:
    return 1.0 - ssim_torch(rendered, truth)


def ndc_depth(z: torch.Tensor, near: float, far: float) -> torch.Tensor:
    """Perspective z-buffer value: 0 at ``near``, 1 at ``far``."""
    return far / (far - near) * (1.0 - near / z)


def loss_depth_distortion(records: IntersectionRecords,
                          depth_range: tuple[float, float] | None = None, power: int = 1) -> torch.Tensor:
    """Mean over hit pixels of sum_{i<j} w_i w_j |z_i - z_j|^power, power 1 or 2.

    With ``depth_range=(near, far)`` the depths are first remapped by :func:`ndc_depth`,
    which keeps the term's scale independent of scene units.
    Sorting each pixel's entries by depth turns the pairwise sum into prefix sums:
    sum_j w_j (z_j * sum_{i<j} w_i - sum_{i<j} w_i z_i).
    """
    w, z = records.weights, records.depths
    if depth_range is not None:
        z = ndc_depth(z.clamp(min=depth_range[0]), *depth_range)
    if w.shape[-1] == 0:
        return torch.zeros((), dtype=DTYPE)
    order = torch.argsort(z.detach(), dim=-1, stable=True)
    w = torch.gather(w, -1, order)
    z = torch.gather(z, -1, order)
    wz = w * z
    acc_w = torch.cumsum(w, -1) - w
    acc_wz = torch.cumsum(wz, -1) - wz
    if power == 1:
        per_pixel = (w * (z * acc_w - acc_wz)).sum(-1)
    elif power == 2:
        acc_wzz = torch.cumsum(wz * z, -1) - wz * z
        per_pixel = (w * (z * z * acc_w - 2 * z * acc_wz + acc_wzz)).sum(-1)
    else:
        raise ValueError("power must be 1 or 2")
    hit = (records.weights > 0).any(-1)
    count = hit.sum()
    if count == 0:
        return torch.zeros((), dtype=DTYPE)
    return per_pixel[hit].sum() / count


def backproject(depth: torch.Tensor, camera: CameraView) -> torch.Tensor:
    dirs = torch.tensor(camera.pixel_directions(), dtype=depth.dtype)
    return depth[..., None] * dirs


def normal_from_depth(depth: torch.Tensor, camera: CameraView) -> torch.Tensor:
    """Camera-facing normals from forward differences of back-projected depth. Zero where undefined."""
    p = backproject(depth, camera)
    dx = p[:-1, 1:] - p[:-1, :-1]
    dy = p[1:, :-1] - p[:-1, :-1]
    cross = -torch.linalg.cross(dx, dy)
    sq = (cross * cross).sum(-1, keepdim=True)
    ok = (depth[:-1, :-1] > 0) & (depth[:-1, 1:] > 0) & (depth[1:, :-1] > 0)
    ok = ok[..., None] & (sq > 0)
    length = torch.sqrt(torch.where(ok, sq, torch.ones_like(sq)))
    n = torch.where(ok, cross / length, torch.zeros_like(cross))
    return F.pad(n, (0, 0, 0, 1, 0, 1))


def loss_normal_consistency(records: IntersectionRecords, normal_map: torch.Tensor) -> torch.Tensor:
    """Mean over pixels with a defined depth normal of sum_i w_i (1 - n_i . N)."""
    valid = (normal_map != 0).any(-1)
    count = valid.sum()
    if count == 0 or records.weights.shape[-1] == 0:
        return torch.zeros((), dtype=DTYPE)
    dots = (records.normals * normal_map[..., None, :]).sum(-1)
    per_pixel = (records.weights * (1.0 - dots)).sum(-1)
    return per_pixel[valid].sum() / count


def loss_total(components: dict, weights: LossWeights):
    """``l1 + w.ssim * ssim + w.normal * normal + w.distortion * distortion``."""
    return (components.get("l1", 0.0)
            + weights.ssim * components.get("ssim", 0.0)
            + weights.normal * components.get("normal", 0.0)
            + weights.distortion * components.get("distortion", 0.0))
