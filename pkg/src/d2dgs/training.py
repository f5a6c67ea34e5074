"""Optimization of a :class:`DynamicScene` against posed images."""

from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np
import torch

from .deformation import DynamicScene
from .losses import (LossWeights, loss_depth_distortion, loss_l1, loss_normal_consistency,
                     loss_ssim, loss_total, normal_from_depth)
from .render import render_view
from .scene import DTYPE, CameraView, Surfels, quat_to_matrix, scene_extent

logger = logging.getLogger(__name__)

LOG_COLUMNS = ("iteration", "l1", "ssim", "ln", "ld", "total", "num_surfels")
# log column -> loss component
LOG_KEYS = {"l1": "l1", "ssim": "ssim", "ln": "normal", "ld": "distortion"}


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    iterations: int = 2000
    lr_means: float = 1e-3            # multiplied by the scene extent
    lr_means_final_ratio: float = 0.01
    lr_quats: float = 1e-2
    lr_scales: float = 5e-3
    lr_opacity: float = 0.05
    lr_sh: float = 5e-3
    lr_controls: float = 1.6e-4       # multiplied by the scene extent
    lr_radii: float = 1e-3
    lr_network: float = 1e-3
    lr_network_final_ratio: float = 0.1
    densify_interval: int = 100
    densify_from: float = 0.05        # fraction of the run
    densify_until: float = 0.5
    densify_grad_threshold: float = 2e-4
    prune_opacity: float = 0.005
    split_scale_fraction: float = 0.01
    max_surfels: int = 20000
    max_growth: float = 2.0           # cap as a multiple of the initial surfel count
    regularizer_warmup: float = 0.1   # fraction of the run without L_n / L_d
    tile_size: int = 16
    checkpoint_interval: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.iterations <= 0:
            raise ValueError("iterations must be positive")
        if self.max_growth < 1:
            raise ValueError("max_growth must be >= 1")
        for name in ("densify_grad_threshold", "prune_opacity", "split_scale_fraction"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")


# --------------------------------------------------------------------------- #
# losses and gradients
# --------------------------------------------------------------------------- #


def compute_losses(scene: DynamicScene, camera: CameraView, truth: torch.Tensor, weights: LossWeights,
                   background=(1.0, 1.0, 1.0), geometric: bool = True, tile_size: int | None = 16):
    """Render at the camera's timestamp and evaluate every loss term.

    Returns ``(total, components, targets)``.
    """
    deformed = scene.at_time(camera.time)
    targets = render_view(deformed, camera, background, tile_size=tile_size)
    comp = {"l1": loss_l1(targets.rgb, truth), "ssim": loss_ssim(targets.rgb, truth)}
    if geometric and (weights.normal > 0 or weights.distortion > 0):
        depth = targets.depth_median if weights.normal_depth == "median" else targets.depth_expected
        comp["normal"] = loss_normal_consistency(targets.records, normal_from_depth(depth, camera))
        comp["distortion"] = loss_depth_distortion(targets.records, weights.distortion_range,
                                                   weights.distortion_power)
    else:
        comp["normal"] = torch.zeros((), dtype=DTYPE)
        comp["distortion"] = torch.zeros((), dtype=DTYPE)
    return loss_total(comp, weights), comp, targets


def parameter_groups(scene: DynamicScene) -> dict[str, torch.Tensor]:
    """Every learnable tensor keyed by a stable name."""
    groups = {name: t for name, t in scene.surfels.tensors().items()}
    groups["control_positions"] = scene.controls.positions
    groups["control_log_radii"] = scene.controls.log_radii
    for name, p in scene.field.named_parameters():
        groups[f"field.{name}"] = p
    return groups


def compute_gradients(scene: DynamicScene, camera: CameraView, truth, weights: LossWeights,
                      background=(1.0, 1.0, 1.0), geometric: bool = True,
                      tile_size: int | None = 16) -> dict[str, torch.Tensor]:
    """Gradients of the total loss for every tensor with ``requires_grad``; frozen groups are absent."""
    truth = torch.as_tensor(truth, dtype=DTYPE)
    groups = {k: v for k, v in parameter_groups(scene).items() if v.requires_grad}
    total, _, _ = compute_losses(scene, camera, truth, weights, background, geometric, tile_size)
    if not groups:
        return {}
    names = list(groups)
    grads = torch.autograd.grad(total, [groups[n] for n in names], allow_unused=True)
    out = {}
    for name, g in zip(names, grads):
        g = torch.zeros_like(groups[name]) if g is None else g
        if not torch.isfinite(g).all():
            raise FloatingPointError(f"non-finite gradient in parameter group '{name}'")
        out[name] = g
    return out


# --------------------------------------------------------------------------- #
# adaptive density control
# --------------------------------------------------------------------------- #


def density_control(surfels: Surfels, grad_accum: np.ndarray, grad_count: np.ndarray,
                    config: TrainConfig, extent: float, rng: np.random.Generator,
                    max_surfels: int | None = None) -> tuple[Surfels, np.ndarray]:
    """Clone, split and prune surfels.

    Returns the new surfels and, for each output row, the index of the surfel it came from.
    """
    n = len(surfels)
    mean_grad = np.where(grad_count > 0, grad_accum / np.maximum(grad_count, 1), 0.0)
    with torch.no_grad():
        scales = surfels.scales.numpy()
    big = scales.max(axis=1) > config.split_scale_fraction * extent
    hot = mean_grad >= config.densify_grad_threshold
    if config.densify_grad_threshold == 0:
        hot &= grad_count > 0
    clone = np.nonzero(hot & ~big)[0]
    split = np.nonzero(hot & big)[0]
    if max_surfels is not None:
        budget = max(max_surfels - n, 0)
        if len(clone) + len(split) > budget:
            ranked = np.argsort(-mean_grad[np.concatenate([clone, split])], kind="stable")[:budget]
            chosen = np.concatenate([clone, split])[ranked]
            clone = np.intersect1d(clone, chosen)
            split = np.intersect1d(split, chosen)

    keep = np.ones(n, dtype=bool)
    keep[split] = False
    parts = [surfels.select(torch.as_tensor(np.nonzero(keep)[0]))]
    source = [np.nonzero(keep)[0]]
    if len(clone):
        parts.append(surfels.select(torch.as_tensor(clone)).detach())
        source.append(clone)
    if len(split):
        par = surfels.select(torch.as_tensor(split)).detach()
        with torch.no_grad():
            rot = par.rotations
            frame = quat_to_matrix(rot)
            sc = par.scales
            for _ in range(2):
                local = torch.as_tensor(rng.normal(size=(len(split), 2)), dtype=DTYPE) * sc
                offset = frame[..., 0] * local[:, :1] + frame[..., 1] * local[:, 1:]
                parts.append(par.replace(means=par.means + offset,
                                         log_scales=par.log_scales - math.log(1.6),
                                         quats=par.quats.clone(),
                                         opacity_logits=par.opacity_logits.clone(),
                                         sh=par.sh.clone()))
                source.append(split)
    grown = Surfels.cat([p.detach() for p in parts])
    source = np.concatenate(source)

    with torch.no_grad():
        alive = (grown.opacities >= config.prune_opacity).numpy()
    idx = np.nonzero(alive)[0]
    return grown.select(torch.as_tensor(idx)).detach(), source[idx]


# --------------------------------------------------------------------------- #
# optimizer plumbing
# --------------------------------------------------------------------------- #


def _make_optimizer(scene: DynamicScene, config: TrainConfig, extent: float) -> torch.optim.Adam:
    s = scene.surfels
    groups = [
        {"params": [s.means], "lr": config.lr_means * extent, "name": "means"},
        {"params": [s.quats], "lr": config.lr_quats, "name": "quats"},
        {"params": [s.log_scales], "lr": config.lr_scales, "name": "log_scales"},
        {"params": [s.opacity_logits], "lr": config.lr_opacity, "name": "opacity_logits"},
        {"params": [s.sh], "lr": config.lr_sh, "name": "sh"},
        {"params": [scene.controls.positions], "lr": config.lr_controls * extent, "name": "control_positions"},
        {"params": [scene.controls.log_radii], "lr": config.lr_radii, "name": "control_log_radii"},
        {"params": list(scene.field.parameters()), "lr": config.lr_network, "name": "network"},
    ]
    return torch.optim.Adam(groups, eps=1e-15)


def _swap_surfel_params(opt: torch.optim.Adam, old: Surfels, new: Surfels, source: np.ndarray) -> None:
    """Point the optimizer at the new surfel tensors, carrying Adam moments over from ``source`` rows."""
    src = torch.as_tensor(source)
    for group in opt.param_groups:
        name = group["name"]
        if name not in Surfels.FIELDS:
            continue
        old_t, new_t = getattr(old, name), getattr(new, name)
        state = opt.state.pop(old_t, None)
        if state:
            state = {k: (v[src].clone() if torch.is_tensor(v) and v.dim() > 0 else v) for k, v in state.items()}
            opt.state[new_t] = state
        group["params"] = [new_t]


def _screen_grad_norm(grad: torch.Tensor, means: torch.Tensor, camera: CameraView) -> np.ndarray:
    """World-space positional gradient norms rescaled to normalized image coordinates.

    A lateral shift of one pixel moves a point at depth z by z / f world units, and the
    image spans 2 normalized units over W pixels, so |dL/d ndc| ~ |dL/d mu| * z * W / (2 f).
    The densification threshold is stated in these units.
    """
    z = (means.numpy() @ camera.rotation[2] + camera.translation[2]).clip(min=1e-6)
    return torch.linalg.norm(grad, dim=1).numpy() * z * camera.width / (2.0 * camera.fx)


def _exp_lr(base: float, final_ratio: float, progress: float) -> float:
    return base * (final_ratio ** min(max(progress, 0.0), 1.0))


# --------------------------------------------------------------------------- #
# training loop
# --------------------------------------------------------------------------- #


@dataclass
class TrainResult:
    scene: DynamicScene
    log: list[dict] = field(default_factory=list)


def write_loss_log(rows: list[dict], path: str | Path) -> None:
    with open(path, "w", newline="") as f:
        writer = csv.DictWriter(f, fieldnames=LOG_COLUMNS)
        writer.writeheader()
        for row in rows:
            writer.writerow({k: row[k] for k in LOG_COLUMNS})


def train(dataset, scene: DynamicScene, config: TrainConfig, weights: LossWeights | None = None,
          out_dir: str | Path | None = None,
          on_checkpoint: Callable[[DynamicScene, int, Path], None] | None = None,
          progress: Callable[[dict], None] | None = None) -> TrainResult:
    """Fit ``scene`` to ``dataset`` (anything with ``len``, ``camera(i)``, ``image(i)`` and ``background``).

    One random (view, timestamp) frame per iteration. Writes ``loss_log.csv`` when ``out_dir`` is set.
    """
    if len(dataset) == 0:
        raise ValueError("empty dataset")
    weights = weights or LossWeights()
    rng = np.random.default_rng(config.seed)
    torch.manual_seed(config.seed)
    out = Path(out_dir) if out_dir is not None else None
    if out is not None:
        out.mkdir(parents=True, exist_ok=True)

    scene.surfels.requires_grad_(True)
    scene.controls.requires_grad_(True)
    extent = scene_extent(scene.surfels.means)
    opt = _make_optimizer(scene, config, extent)
    bg = tuple(dataset.background)

    grad_accum = np.zeros(len(scene.surfels))
    grad_count = np.zeros(len(scene.surfels))
    warmup = int(config.regularizer_warmup * config.iterations)
    start_densify = int(config.densify_from * config.iterations)
    stop_densify = int(config.densify_until * config.iterations)
    cap = min(config.max_surfels, int(config.max_growth * len(scene.surfels)))
    log: list[dict] = []

    for it in range(1, config.iterations + 1):
        frac = (it - 1) / max(config.iterations - 1, 1)
        for group in opt.param_groups:
            if group["name"] == "means":
                group["lr"] = _exp_lr(config.lr_means * extent, config.lr_means_final_ratio, frac)
            elif group["name"] == "network":
                group["lr"] = _exp_lr(config.lr_network, config.lr_network_final_ratio, frac)

        i = int(rng.integers(len(dataset)))
        camera = dataset.camera(i)
        truth = torch.as_tensor(dataset.image(i), dtype=DTYPE)
        total, comp, _ = compute_losses(scene, camera, truth, weights, bg, geometric=it > warmup,
                                        tile_size=config.tile_size)
        if not torch.isfinite(total):
            if out is not None and on_checkpoint is not None:
                on_checkpoint(scene, it, out / "nan_snapshot.npz")
            raise TrainingError(
                f"non-finite loss at iteration {it}: "
                + ", ".join(f"{k}={float(v.detach()):.4g}" for k, v in comp.items()))
        opt.zero_grad(set_to_none=True)
        total.backward()

        g = scene.surfels.means.grad
        if g is not None:
            norms = _screen_grad_norm(g, scene.surfels.means.detach(), camera)
            grad_accum += norms
            grad_count += norms > 0
        opt.step()

        row = {"iteration": it, **{k: float(comp[c].detach()) for k, c in LOG_KEYS.items()},
               "total": float(total.detach()),
               "num_surfels": len(scene.surfels)}
        log.append(row)
        if progress is not None:
            progress(row)

        if (config.densify_interval > 0 and start_densify <= it <= stop_densify
                and it % config.densify_interval == 0):
            old = scene.surfels
            new, source = density_control(old, grad_accum, grad_count, config, extent, rng, cap)
            new.requires_grad_(True)
            _swap_surfel_params(opt, old, new, source)
            scene.surfels = new
            scene.rebind()
            grad_accum = np.zeros(len(new))
            grad_count = np.zeros(len(new))
            logger.debug("iteration %d: %d -> %d surfels", it, len(old), len(new))

        if (out is not None and on_checkpoint is not None and config.checkpoint_interval
                and it % config.checkpoint_interval == 0):
            on_checkpoint(scene, it, out / f"checkpoint_{it:06d}.npz")

    scene.surfels = scene.surfels.detach()
    scene.controls = scene.controls.detach()
    if out is not None:
        write_loss_log(log, out / "loss_log.csv")
    return TrainResult(scene, log)
