"""End-to-end orchestration: dataset to trained scene to meshes."""

from __future__ import annotations

import logging
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import Checkpoint, save_checkpoint
from .config import PipelineConfig
from .data import Dataset, load_nerf_synthetic, random_init_points
from .deformation import DeformationField, DynamicScene
from .meshing import MeshingConfig, TriangleMesh, extract_mesh_at
from .scene import CameraView, init_scene
from .synthetic import generate_synthetic
from .training import TrainResult, train

logger = logging.getLogger(__name__)


def resolve_dataset(config: PipelineConfig) -> Dataset:
    """Load ``config.data``, or synthesize the translating disc under the output directory."""
    if config.data is None:
        root = Path(config.output) / "data"
        if not (root / "transforms_train.json").is_file():
            generate_synthetic("translating-disc", root, seed=config.seed)
        return load_nerf_synthetic(root, "train", config.scene.background)
    return load_nerf_synthetic(config.data, "train", config.scene.background)


def build_scene(dataset: Dataset, config: PipelineConfig) -> DynamicScene:
    if dataset.points is not None:
        points, colors = dataset.points, dataset.point_colors
    else:
        points, colors = random_init_points(config.init_points, dataset.bounds, config.seed)
    surfels, controls = init_scene(points, colors, config.scene)
    field = DeformationField(**vars(config.deformation))
    return DynamicScene(surfels, controls, field, config.scene.num_neighbors)


def unique_poses(cameras: Sequence[CameraView], decimals: int = 9) -> list[CameraView]:
    """One camera per distinct pose, in first-seen order."""
    seen, out = set(), []
    for c in cameras:
        key = tuple(np.round(np.concatenate([c.rotation.ravel(), c.translation]), decimals))
        if key not in seen:
            seen.add(key)
            out.append(c)
    return out


def run_training(config: PipelineConfig, progress=None) -> tuple[TrainResult, Path]:
    dataset = resolve_dataset(config)
    scene = build_scene(dataset, config)
    out = Path(config.output)
    cams = dataset.cameras()
    cfg = config.to_dict()

    def on_checkpoint(sc, it, path):
        save_checkpoint(path, sc, cams, dataset.background, cfg, it)

    result = train(dataset, scene, config.train, config.loss, out, on_checkpoint, progress)
    path = save_checkpoint(out / "checkpoint.npz", result.scene, cams, dataset.background, cfg,
                           config.train.iterations)
    return result, path


def mesh_times(ckpt: Checkpoint, times: Sequence[float], config: MeshingConfig | None = None) -> list[TriangleMesh]:
    cams = unique_poses(ckpt.cameras)
    return [extract_mesh_at(t, ckpt.scene, [c.with_time(t) for c in cams], config, ckpt.background)
            for t in times]
