"""Scene checkpoints as ``.npz`` archives."""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .deformation import DeformationField, DynamicScene, SkinningBinding
from .scene import DTYPE, CameraView, ControlPoints, Surfels

MAGIC = "D2DGS-CKPT-v1"


@dataclass
class Checkpoint:
    scene: DynamicScene
    cameras: list[CameraView] = field(default_factory=list)
    background: tuple = (1.0, 1.0, 1.0)
    config: dict = field(default_factory=dict)
    iteration: int = 0


def _camera_row(c: CameraView) -> np.ndarray:
    return np.concatenate([[c.width, c.height, c.fx, c.fy, c.cx, c.cy],
                           c.rotation.reshape(-1), c.translation, [c.time]])


def _camera_from_row(r: np.ndarray) -> CameraView:
    return CameraView(int(r[0]), int(r[1]), float(r[2]), float(r[3]), float(r[4]), float(r[5]),
                      r[6:15].reshape(3, 3), r[15:18], float(r[18]))


def save_checkpoint(path, scene: DynamicScene, cameras=(), background=(1.0, 1.0, 1.0),
                    config: dict | None = None, iteration: int = 0) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    arrays = {f"surfels/{k}": v.detach().numpy() for k, v in scene.surfels.tensors().items()}
    arrays["controls/positions"] = scene.controls.positions.detach().numpy()
    arrays["controls/log_radii"] = scene.controls.log_radii.detach().numpy()
    arrays["binding/indices"] = scene.binding.indices.numpy()
    for k, v in scene.field.state_dict().items():
        arrays[f"field/{k}"] = v.detach().numpy()
    arrays["cameras"] = np.array([_camera_row(c) for c in cameras]).reshape(-1, 19)
    meta = {"magic": MAGIC, "field": scene.field.architecture(), "num_neighbors": scene.num_neighbors,
            "background": list(map(float, background)), "config": config or {}, "iteration": iteration}
    arrays["meta"] = np.array(json.dumps(meta))
    with open(path, "wb") as fh:
        np.savez(fh, **arrays)
    return path


def load_checkpoint(path) -> Checkpoint:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    try:
        z = np.load(path, allow_pickle=False)
        meta = json.loads(str(z["meta"]))
    except Exception as exc:  # noqa: BLE001 - any decode failure means a foreign file
        raise ValueError(f"{path}: not a D2DGS checkpoint ({exc})") from None
    if meta.get("magic") != MAGIC:
        raise ValueError(f"{path}: not a D2DGS checkpoint")

    def t(key):
        return torch.as_tensor(z[key], dtype=DTYPE).clone()

    surfels = Surfels(**{k: t(f"surfels/{k}") for k in Surfels.FIELDS})
    controls = ControlPoints(t("controls/positions"), t("controls/log_radii"))
    field_ = DeformationField(**meta["field"])
    state = {k[len("field/"):]: torch.as_tensor(z[k]) for k in z.files if k.startswith("field/")}
    field_.load_state_dict(state)
    binding = SkinningBinding(torch.as_tensor(z["binding/indices"]).long(),
                              torch.zeros(z["binding/indices"].shape, dtype=DTYPE))
    binding = binding.refresh_distances(surfels.means, controls)
    scene = DynamicScene(surfels, controls, field_, meta["num_neighbors"], binding)
    cameras = [_camera_from_row(r) for r in z["cameras"]]
    return Checkpoint(scene, cameras, tuple(meta["background"]), meta["config"], int(meta["iteration"]))
