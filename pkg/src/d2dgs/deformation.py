"""Sparse-control deformation: a time-conditioned MLP predicts a rigid transform per
control point and linear blend skinning carries it to every surfel.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .scene import DTYPE, ControlPoints, Surfels, quat_multiply, quat_normalize, quat_to_matrix


def positional_encoding(x: torch.Tensor, num_freqs: int) -> torch.Tensor:
    """``[x, sin(2^k pi x), cos(2^k pi x)]`` for k < num_freqs, along the last axis."""
    if num_freqs == 0:
        return x
    freqs = (2.0 ** torch.arange(num_freqs, dtype=x.dtype)) * np.pi
    xf = x[..., None, :] * freqs[:, None]
    enc = torch.cat([torch.sin(xf), torch.cos(xf)], dim=-1).flatten(-2)
    return torch.cat([x, enc], dim=-1)


class DeformationField(nn.Module):
    """MLP mapping (control position, time) to a raw 7-vector: 4 quaternion offsets + 3 translation.

    The last layer starts at zero, so a fresh field is the identity at every timestamp.
    """

    def __init__(self, pos_freqs: int = 10, time_freqs: int = 6, width: int = 64, depth: int = 4):
        super().__init__()
        self.pos_freqs = pos_freqs
        self.time_freqs = time_freqs
        self.width = width
        self.depth = depth
        in_dim = 3 * (1 + 2 * pos_freqs) + (1 + 2 * time_freqs)
        layers: list[nn.Module] = []
        for _ in range(depth):
            layers += [nn.Linear(in_dim, width, dtype=DTYPE), nn.ReLU()]
            in_dim = width
        self.hidden = nn.Sequential(*layers)
        self.head = nn.Linear(in_dim, 7, dtype=DTYPE)
        nn.init.zeros_(self.head.weight)
        nn.init.zeros_(self.head.bias)

    def architecture(self) -> dict:
        return {"pos_freqs": self.pos_freqs, "time_freqs": self.time_freqs,
                "width": self.width, "depth": self.depth}

    def forward(self, positions: torch.Tensor, t: float | torch.Tensor) -> torch.Tensor:
        t = torch.as_tensor(t, dtype=positions.dtype).reshape(1, 1).expand(positions.shape[0], 1)
        h = torch.cat(
            [positional_encoding(positions, self.pos_freqs), positional_encoding(t, self.time_freqs)],
            dim=-1,
        )
        return self.head(self.hidden(h))


@dataclass
class ControlSignals:
    rotations: torch.Tensor     # (M, 4) unit quaternions
    translations: torch.Tensor  # (M, 3)

    @property
    def matrices(self) -> torch.Tensor:
        return quat_to_matrix(self.rotations)


@dataclass
class SkinningBinding:
    """K nearest control points per surfel, with squared canonical distances."""

    indices: torch.Tensor       # (N, K) long
    sq_distances: torch.Tensor  # (N, K)

    @property
    def distances(self) -> torch.Tensor:
        return torch.sqrt(self.sq_distances)

    @property
    def k(self) -> int:
        return self.indices.shape[1]

    def refresh_distances(self, centers: torch.Tensor, controls: ControlPoints) -> "SkinningBinding":
        """Recompute distances from the current (possibly learnable) positions, keeping indices."""
        diff = centers[:, None, :] - controls.positions[self.indices]
        return SkinningBinding(self.indices, (diff * diff).sum(-1))


def decode_signals(raw: torch.Tensor) -> ControlSignals:
    identity = torch.zeros(4, dtype=raw.dtype)
    identity[0] = 1.0
    return ControlSignals(quat_normalize(raw[:, :4] + identity), raw[:, 4:7])


def predict_signals(field: DeformationField, controls: ControlPoints, t: float) -> ControlSignals:
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError("timestamp out of range")
    return decode_signals(field(controls.positions, float(t)))


def bind_surfels(surfels: Surfels | torch.Tensor, controls: ControlPoints, k: int,
                 chunk: int = 4096) -> SkinningBinding:
    """Exact KNN by exhaustive distance; ties go to the lower control index."""
    centers = surfels.means if isinstance(surfels, Surfels) else surfels
    n_ctrl = len(controls)
    if k > n_ctrl:
        raise ValueError(f"K={k} exceeds the number of control points ({n_ctrl})")
    if k < 1:
        raise ValueError("K must be >= 1")
    centers_d = centers.detach()
    ctrl = controls.positions.detach()
    out = []
    for start in range(0, centers_d.shape[0], chunk):
        block = centers_d[start:start + chunk]
        d2 = ((block[:, None, :] - ctrl[None, :, :]) ** 2).sum(-1)
        out.append(torch.argsort(d2, dim=1, stable=True)[:, :k])
    indices = torch.cat(out) if out else torch.zeros(0, k, dtype=torch.long)
    return SkinningBinding(indices, torch.zeros(indices.shape, dtype=DTYPE)).refresh_distances(centers, controls)


def skinning_weights(binding: SkinningBinding, controls: ControlPoints) -> torch.Tensor:
    """Normalized Gaussian-of-distance weights, (N, K). Uniform where every term underflows."""
    radii = controls.radii[binding.indices]
    w_hat = torch.exp(-binding.sq_distances / (2.0 * radii * radii))
    total = w_hat.sum(-1, keepdim=True)
    ok = total > 0
    uniform = torch.full_like(w_hat, 1.0 / binding.k)
    return torch.where(ok, w_hat / torch.where(ok, total, torch.ones_like(total)), uniform)


def blend_rotations(weights: torch.Tensor, rotations: torch.Tensor) -> torch.Tensor:
    """Weighted quaternion sum, sign-aligned to the first neighbor, renormalized. (N, K, 4) -> (N, 4)."""
    dots = (rotations * rotations[:, :1, :]).sum(-1, keepdim=True)
    signs = torch.where(dots < 0, -1.0, 1.0).to(rotations.dtype)
    blended = (weights[..., None] * signs * rotations).sum(1)
    norm = torch.sqrt((blended * blended).sum(-1, keepdim=True))
    if blended.shape[0] and bool((norm < 1e-8).any()):
        raise ValueError("degenerate quaternion blend")
    return blended / norm


def warp_surfels(surfels: Surfels, binding: SkinningBinding, weights: torch.Tensor,
                 signals: ControlSignals, controls: ControlPoints) -> Surfels:
    """Move surfel centers and orientations by the blended control transforms.

    The center update is written as ``mu + sum_k w_k ((R_k - I)(mu - p_k) + T_k)``, which equals
    ``sum_k w_k (R_k (mu - p_k) + p_k + T_k)`` when the weights sum to one and leaves the center
    bit-exact under identity signals.
    """
    idx = binding.indices
    rot = signals.matrices[idx]                    # (N, K, 3, 3)
    eye = torch.eye(3, dtype=rot.dtype)
    rel = surfels.means[:, None, :] - controls.positions[idx]
    moved = torch.einsum("nkij,nkj->nki", rot - eye, rel) + signals.translations[idx]
    means = surfels.means + (weights[..., None] * moved).sum(1)
    q_blend = blend_rotations(weights, signals.rotations[idx])
    # raw quats keep their norm: the renderer normalizes once
    quats = quat_multiply(q_blend, surfels.quats)
    return surfels.replace(means=means, quats=quats)


def deform(surfels: Surfels, controls: ControlPoints, field: DeformationField,
           binding: SkinningBinding, t: float) -> Surfels:
    """Full canonical-to-time warp: predict signals, compute weights, blend."""
    binding = binding.refresh_distances(surfels.means, controls)
    weights = skinning_weights(binding, controls)
    signals = predict_signals(field, controls, t)
    return warp_surfels(surfels, binding, weights, signals, controls)


class DynamicScene:
    """Canonical surfels + control points + deformation network, with the current KNN binding."""

    def __init__(self, surfels: Surfels, controls: ControlPoints, field: DeformationField,
                 num_neighbors: int = 4, binding: SkinningBinding | None = None):
        self.surfels = surfels
        self.controls = controls
        self.field = field
        self.num_neighbors = num_neighbors
        self.binding = binding if binding is not None else bind_surfels(surfels, controls, num_neighbors)

    def rebind(self) -> None:
        self.binding = bind_surfels(self.surfels, self.controls, self.num_neighbors)

    def at_time(self, t: float) -> Surfels:
        return deform(self.surfels, self.controls, self.field, self.binding, t)
