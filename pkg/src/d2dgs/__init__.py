"""Dynamic 2D Gaussian surfels driven by sparse control points, with masked-depth TSDF meshing."""

from .deformation import DeformationField, DynamicScene, bind_surfels, predict_signals, skinning_weights, warp_surfels
from .losses import LossWeights
from .meshing import MeshingConfig, TriangleMesh, TsdfVolume, extract_mask, extract_mesh_at, filter_depth, marching_cubes
from .render import render_reference, render_view
from .scene import CameraView, ControlPoints, SceneConfig, Surfels, init_scene
from .training import TrainConfig, train

__all__ = [
    "CameraView", "ControlPoints", "DeformationField", "DynamicScene", "LossWeights", "MeshingConfig",
    "SceneConfig", "Surfels", "TrainConfig", "TriangleMesh", "TsdfVolume", "bind_surfels", "extract_mask",
    "extract_mesh_at", "filter_depth", "init_scene", "marching_cubes", "predict_signals", "render_reference",
    "render_view", "skinning_weights", "train", "warp_surfels",
]
