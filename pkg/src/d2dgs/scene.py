"""Canonical scene representation: 2D Gaussian surfels, control points and cameras.

Surfels are stored as batched tensors of *raw* (unconstrained) parameters:
scales live in log space, opacities as logits and orientations as
unnormalized quaternions (w, x, y, z). Everything is float64.
"""

from __future__ import annotations

import dataclasses
import functools
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch
from scipy.spatial import cKDTree

DTYPE = torch.float64

SH_C0 = 0.28209479177387814


def num_sh_coeffs(degree: int) -> int:
    return (degree + 1) ** 2


# --------------------------------------------------------------------------- #
# quaternion helpers, scalar-first (w, x, y, z)
# --------------------------------------------------------------------------- #


def quat_normalize(q: torch.Tensor) -> torch.Tensor:
    # sqrt of a plain sum of squares keeps identity quaternions exact
    return q / torch.sqrt((q * q).sum(-1, keepdim=True))


def quat_multiply(a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
    """Hamilton product ``a ⊗ b`` over the last axis."""
    aw, ax, ay, az = a.unbind(-1)
    bw, bx, by, bz = b.unbind(-1)
    return torch.stack(
        (
            aw * bw - ax * bx - ay * by - az * bz,
            aw * bx + ax * bw + ay * bz - az * by,
            aw * by - ax * bz + ay * bw + az * bx,
            aw * bz + ax * by - ay * bx + az * bw,
        ),
        dim=-1,
    )


def quat_to_matrix(q: torch.Tensor) -> torch.Tensor:
    """Rotation matrices for unit quaternions, shape ``(..., 3, 3)``."""
    w, x, y, z = q.unbind(-1)
    rows = (
        1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y),
        2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x),
        2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y),
    )
    return torch.stack(rows, dim=-1).reshape(q.shape[:-1] + (3, 3))


def axis_angle_quat(axis: Sequence[float], angle: float) -> torch.Tensor:
    axis = np.asarray(axis, dtype=np.float64)
    axis = axis / np.linalg.norm(axis)
    half = 0.5 * angle
    return torch.tensor([np.cos(half), *(np.sin(half) * axis)], dtype=DTYPE)


def matrix_to_quat(m: np.ndarray) -> np.ndarray:
    """Unit quaternion (w, x, y, z) for one rotation matrix."""
    m = np.asarray(m, dtype=np.float64)
    tr = np.trace(m)
    if tr > 0:
        s = np.sqrt(tr + 1.0) * 2
        q = [0.25 * s, (m[2, 1] - m[1, 2]) / s, (m[0, 2] - m[2, 0]) / s, (m[1, 0] - m[0, 1]) / s]
    elif m[0, 0] > m[1, 1] and m[0, 0] > m[2, 2]:
        s = np.sqrt(1.0 + m[0, 0] - m[1, 1] - m[2, 2]) * 2
        q = [(m[2, 1] - m[1, 2]) / s, 0.25 * s, (m[0, 1] + m[1, 0]) / s, (m[0, 2] + m[2, 0]) / s]
    elif m[1, 1] > m[2, 2]:
        s = np.sqrt(1.0 + m[1, 1] - m[0, 0] - m[2, 2]) * 2
        q = [(m[0, 2] - m[2, 0]) / s, (m[0, 1] + m[1, 0]) / s, 0.25 * s, (m[1, 2] + m[2, 1]) / s]
    else:
        s = np.sqrt(1.0 + m[2, 2] - m[0, 0] - m[1, 1]) * 2
        q = [(m[1, 0] - m[0, 1]) / s, (m[0, 2] + m[2, 0]) / s, (m[1, 2] + m[2, 1]) / s, 0.25 * s]
    q = np.asarray(q)
    return q / np.linalg.norm(q)


# --------------------------------------------------------------------------- #
# domain types
# --------------------------------------------------------------------------- #


@dataclass
class SceneConfig:
    num_controls: int = 32
    num_neighbors: int = 4
    background: tuple[float, float, float] = (1.0, 1.0, 1.0)
    sh_degree: int = 1
    seed: int = 0

    def __post_init__(self):
        self.background = tuple(float(c) for c in self.background)
        if self.num_controls < 1 or self.num_neighbors < 1:
            raise ValueError("num_controls and num_neighbors must be >= 1")
        if self.num_neighbors > self.num_controls:
            raise ValueError("num_neighbors must not exceed num_controls")
        if not 0 <= self.sh_degree <= 3:
            raise ValueError("sh_degree must be in 0..3")


@dataclass
class Surfels:
    """A batch of 2D Gaussian surfels (raw parameters).

    means:          (N, 3) centers
    quats:          (N, 4) orientation, not necessarily unit norm
    log_scales:     (N, 2) log of the two tangent scales
    opacity_logits: (N,)   logit of the opacity
    sh:             (N, C, 3) spherical-harmonic coefficients per channel
    """

    means: torch.Tensor
    quats: torch.Tensor
    log_scales: torch.Tensor
    opacity_logits: torch.Tensor
    sh: torch.Tensor

    FIELDS = ("means", "quats", "log_scales", "opacity_logits", "sh")

    def __len__(self) -> int:
        return self.means.shape[0]

    @property
    def rotations(self) -> torch.Tensor:
        return quat_normalize(self.quats)

    @property
    def scales(self) -> torch.Tensor:
        return torch.exp(self.log_scales)

    @property
    def opacities(self) -> torch.Tensor:
        return torch.sigmoid(self.opacity_logits)

    @property
    def sh_degree(self) -> int:
        return int(round(np.sqrt(self.sh.shape[1]))) - 1

    def tensors(self) -> dict[str, torch.Tensor]:
        return {name: getattr(self, name) for name in self.FIELDS}

    def replace(self, **changes) -> "Surfels":
        return dataclasses.replace(self, **changes)

    def detach(self) -> "Surfels":
        return Surfels(**{k: v.detach().clone() for k, v in self.tensors().items()})

    def select(self, index) -> "Surfels":
        return Surfels(**{k: v[index] for k, v in self.tensors().items()})

    @staticmethod
    def cat(parts: Sequence["Surfels"]) -> "Surfels":
        return Surfels(**{k: torch.cat([getattr(p, k) for p in parts]) for k in Surfels.FIELDS})

    def requires_grad_(self, flag: bool = True) -> "Surfels":
        for t in self.tensors().values():
            t.requires_grad_(flag)
        return self

    @staticmethod
    def create(
        means,
        quats=None,
        scales=None,
        opacities=None,
        colors=None,
        sh_degree: int = 1,
    ) -> "Surfels":
        """Build surfels from constrained values (unit quats, scales, opacity, RGB)."""
        means = torch.as_tensor(np.asarray(means, dtype=np.float64), dtype=DTYPE).reshape(-1, 3)
        n = means.shape[0]
        if quats is None:
            quats = torch.zeros(n, 4, dtype=DTYPE)
            quats[:, 0] = 1.0
        quats = torch.as_tensor(np.asarray(quats, dtype=np.float64), dtype=DTYPE).reshape(n, 4)
        if scales is None:
            scales = np.full((n, 2), 0.01)
        scales = np.broadcast_to(np.asarray(scales, dtype=np.float64), (n, 2))
        if opacities is None:
            opacities = np.full(n, 0.1)
        opacities = np.clip(np.broadcast_to(np.asarray(opacities, dtype=np.float64), (n,)), 1e-12, 1 - 1e-12)
        if colors is None:
            colors = np.full((n, 3), 0.5)
        colors = np.broadcast_to(np.asarray(colors, dtype=np.float64), (n, 3))
        sh = torch.zeros(n, num_sh_coeffs(sh_degree), 3, dtype=DTYPE)
        sh[:, 0, :] = torch.as_tensor((colors - 0.5) / SH_C0, dtype=DTYPE)
        return Surfels(
            means=means.clone(),
            quats=quats.clone(),
            log_scales=torch.as_tensor(np.log(scales), dtype=DTYPE).clone(),
            opacity_logits=torch.as_tensor(np.log(opacities / (1 - opacities)), dtype=DTYPE).clone(),
            sh=sh,
        )


@dataclass
class ControlPoints:
    """Sparse control points; radii stored in log space."""

    positions: torch.Tensor
    log_radii: torch.Tensor

    def __len__(self) -> int:
        return self.positions.shape[0]

    @property
    def radii(self) -> torch.Tensor:
        return torch.exp(self.log_radii)

    def tensors(self) -> dict[str, torch.Tensor]:
        return {"positions": self.positions, "log_radii": self.log_radii}

    def detach(self) -> "ControlPoints":
        return ControlPoints(self.positions.detach().clone(), self.log_radii.detach().clone())

    def requires_grad_(self, flag: bool = True) -> "ControlPoints":
        self.positions.requires_grad_(flag)
        self.log_radii.requires_grad_(flag)
        return self


@dataclass
class CameraView:
    """Pinhole camera with a world-to-camera pose (OpenCV axes: x right, y down, z forward)."""

    width: int
    height: int
    fx: float
    fy: float
    cx: float
    cy: float
    rotation: np.ndarray
    translation: np.ndarray
    time: float = 0.0

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        if np.abs(self.rotation.T @ self.rotation - np.eye(3)).max() >= 1e-6:
            raise ValueError("camera rotation is not orthonormal")
        if not 0.0 <= self.time <= 1.0:
            raise ValueError("timestamp out of range")

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def world_to_camera(self) -> np.ndarray:
        m = np.eye(4)
        m[:3, :3] = self.rotation
        m[:3, 3] = self.translation
        return m

    def camera_to_world(self) -> np.ndarray:
        return np.linalg.inv(self.world_to_camera())

    def pixel_directions(self) -> np.ndarray:
        """Camera-space ray directions through pixel centers, scaled so z == 1. Shape (H, W, 3)."""
        return _pixel_directions(self.width, self.height, self.fx, self.fy, self.cx, self.cy)

    def with_time(self, t: float) -> "CameraView":
        return dataclasses.replace(self, time=t)

    @staticmethod
    def look_at(eye, target, up=(0.0, 0.0, 1.0), *, width, height, fov_x, time=0.0) -> "CameraView":
        eye = np.asarray(eye, dtype=np.float64)
        forward = np.asarray(target, dtype=np.float64) - eye
        forward /= np.linalg.norm(forward)
        right = np.cross(forward, np.asarray(up, dtype=np.float64))
        if np.linalg.norm(right) < 1e-9:
            right = np.cross(forward, np.array([0.0, 1.0, 0.0]))
        right /= np.linalg.norm(right)
        down = np.cross(forward, right)
        rot = np.stack([right, down, forward])
        focal = 0.5 * width / np.tan(0.5 * fov_x)
        return CameraView(width, height, focal, focal, width / 2, height / 2, rot, -rot @ eye, time)


@functools.lru_cache(maxsize=64)
def _pixel_directions(width, height, fx, fy, cx, cy) -> np.ndarray:
    xs = (np.arange(width) + 0.5 - cx) / fx
    ys = (np.arange(height) + 0.5 - cy) / fy
    gx, gy = np.meshgrid(xs, ys)
    dirs = np.stack([gx, gy, np.ones_like(gx)], axis=-1)
    dirs.flags.writeable = False
    return dirs


# --------------------------------------------------------------------------- #
# operations
# --------------------------------------------------------------------------- #


def surfel_frame(quats: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor, torch.Tensor]:
    """Tangent vectors t_u, t_v and normal t_w = t_u x t_v for (..., 4) quaternions."""
    rot = quat_to_matrix(quat_normalize(quats))
    t_u, t_v = rot[..., :, 0], rot[..., :, 1]
    return t_u, t_v, torch.linalg.cross(t_u, t_v)


def point_on_surfel(surfels: Surfels, u, v) -> torch.Tensor:
    """World point P(u, v) = center + s_u t_u u + s_v t_v v for every surfel."""
    t_u, t_v, _ = surfel_frame(surfels.quats)
    s = surfels.scales
    u = torch.as_tensor(u, dtype=DTYPE)
    v = torch.as_tensor(v, dtype=DTYPE)
    return surfels.means + (s[:, :1] * t_u) * u + (s[:, 1:] * t_v) * v


def farthest_point_sampling(points: np.ndarray, n: int, rng: np.random.Generator) -> np.ndarray:
    """Indices of ``n`` points chosen greedily to maximise the distance to those already picked."""
    points = np.asarray(points, dtype=np.float64)
    n = min(n, len(points))
    chosen = np.empty(n, dtype=np.int64)
    chosen[0] = rng.integers(len(points))
    dist = np.linalg.norm(points - points[chosen[0]], axis=1)
    for i in range(1, n):
        chosen[i] = int(np.argmax(dist))
        dist = np.minimum(dist, np.linalg.norm(points - points[chosen[i]], axis=1))
    return chosen


def init_scene(points, colors, config: SceneConfig) -> tuple[Surfels, ControlPoints]:
    """One surfel per input point plus farthest-point-sampled control points."""
    points = np.asarray(points, dtype=np.float64).reshape(-1, 3)
    colors = np.asarray(colors, dtype=np.float64).reshape(-1, 3)
    if len(points) == 0:
        raise ValueError("empty point set")
    if len(colors) != len(points):
        raise ValueError("colors and points differ in length")
    rng = np.random.default_rng(config.seed)

    n = len(points)
    if n > 1:
        k = min(3, n - 1)
        dist, _ = cKDTree(points).query(points, k=k + 1)
        mean_dist = dist[:, 1:].reshape(n, k).mean(axis=1)
        mean_dist = np.maximum(mean_dist, np.sqrt(1e-7))
    else:
        mean_dist = np.full(1, 0.01)
    surfels = Surfels.create(
        points,
        scales=np.repeat(mean_dist[:, None], 2, axis=1),
        opacities=0.1,
        colors=np.clip(colors, 0.0, 1.0),
        sh_degree=config.sh_degree,
    )

    idx = farthest_point_sampling(points, config.num_controls, rng)
    ctrl = points[idx]
    if len(ctrl) > 1:
        d, _ = cKDTree(ctrl).query(ctrl, k=2)
        radius = max(float(d[:, 1].mean()), 1e-6)
    else:
        extent = float(np.linalg.norm(points.max(0) - points.min(0)))
        radius = extent if extent > 0 else 1.0
    controls = ControlPoints(
        torch.as_tensor(ctrl, dtype=DTYPE).clone(),
        torch.full((len(ctrl),), np.log(radius), dtype=DTYPE),
    )
    return surfels, controls


def scene_extent(points: np.ndarray | torch.Tensor) -> float:
    """Radius of the bounding sphere around the mean, used to scale learning rates."""
    p = points.detach().cpu().numpy() if isinstance(points, torch.Tensor) else np.asarray(points)
    if len(p) == 0:
        return 1.0
    r = float(np.linalg.norm(p - p.mean(0), axis=1).max())
    return r if r > 0 else 1.0
