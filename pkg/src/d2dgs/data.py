"""Datasets in the NeRF-synthetic JSON layout, plus image and float-map codecs."""

from __future__ import annotations

import json
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
from PIL import Image

from .meshing import TriangleMesh
from .scene import CameraView

DEFAULT_BOUNDS = (-1.3, 1.3)
# OpenGL camera axes (x right, y up, looking down -z) to OpenCV (x right, y down, +z forward)
_GL_TO_CV = np.diag([1.0, -1.0, -1.0, 1.0])


# --------------------------------------------------------------------------- #
# images and float maps
# --------------------------------------------------------------------------- #


def read_image(path, background=(1.0, 1.0, 1.0)) -> np.ndarray:
    """Float RGB in [0, 1]; RGBA is composited over ``background``."""
    with Image.open(path) as im:
        arr = np.asarray(im.convert("RGBA") if im.mode in ("RGBA", "LA", "P") else im.convert("RGB"),
                         dtype=np.float64) / 255.0
    if arr.shape[-1] == 4:
        a = arr[..., 3:]
        arr = arr[..., :3] * a + np.asarray(background, dtype=np.float64) * (1.0 - a)
    return arr


def write_image(path, rgb) -> None:
    arr = np.clip(np.round(np.asarray(rgb, dtype=np.float64) * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr).save(path)


def write_fmap(path, data) -> None:
    """Raw float map: uint32 width, uint32 height, then little-endian float32 pixels (row-major, channels last)."""
    data = np.asarray(data, dtype="<f4")
    if data.ndim == 2:
        data = data[..., None]
    h, w = data.shape[:2]
    with open(path, "wb") as fh:
        fh.write(np.array([w, h], dtype="<u4").tobytes())
        fh.write(np.ascontiguousarray(data).tobytes())


def read_fmap(path) -> np.ndarray:
    raw = Path(path).read_bytes()
    if len(raw) < 8:
        raise ValueError(f"{path}: truncated float map")
    w, h = np.frombuffer(raw[:8], dtype="<u4")
    body = len(raw) - 8
    if w == 0 or h == 0 or body % (4 * w * h):
        raise ValueError(f"{path}: size does not match a {w}x{h} float map")
    ch = body // (4 * int(w) * int(h))
    data = np.frombuffer(raw[8:], dtype="<f4").reshape(int(h), int(w), ch).astype(np.float64)
    return data[..., 0] if ch == 1 else data


# --------------------------------------------------------------------------- #
# datasets
# --------------------------------------------------------------------------- #


@dataclass
class Frame:
    camera: CameraView
    image_path: Path


@dataclass
class Dataset:
    frames: list[Frame]
    background: tuple = (1.0, 1.0, 1.0)
    split: str = "train"
    bounds: tuple[np.ndarray, np.ndarray] | None = None
    points: np.ndarray | None = None          # optional initial point cloud
    point_colors: np.ndarray | None = None
    _cache: dict = field(default_factory=dict, repr=False)

    def __len__(self) -> int:
        return len(self.frames)

    def camera(self, i: int) -> CameraView:
        return self.frames[i].camera

    def cameras(self) -> list[CameraView]:
        return [f.camera for f in self.frames]

    def image(self, i: int) -> np.ndarray:
        if i not in self._cache:
            img = read_image(self.frames[i].image_path, self.background)
            cam = self.frames[i].camera
            if img.shape[:2] != (cam.height, cam.width):
                raise ValueError(f"{self.frames[i].image_path}: image size differs from the first frame")
            self._cache[i] = img
        return self._cache[i]

    def times(self) -> np.ndarray:
        return np.array([f.camera.time for f in self.frames])

    def timestamps(self) -> list[float]:
        return sorted(set(float(t) for t in self.times()))


def _read_json(path: Path) -> dict:
    text = path.read_text()
    try:
        return json.loads(text)
    except json.JSONDecodeError as exc:
        line = text.splitlines()[exc.lineno - 1] if exc.lineno - 1 < len(text.splitlines()) else ""
        raise ValueError(f"{path}:{exc.lineno}:{exc.colno}: malformed JSON ({exc.msg})\n    {line}") from None


def _resolve_image(root: Path, file_path: str) -> Path:
    p = (root / file_path).resolve()
    if p.suffix == "":
        p = p.with_suffix(".png")
    return p


def load_nerf_synthetic(root, split: str = "train", background=(1.0, 1.0, 1.0)) -> Dataset:
    """Read ``transforms_<split>.json``; poses are camera-to-world in OpenGL axes."""
    root = Path(root)
    if not root.is_dir():
        raise FileNotFoundError(f"dataset directory not found: {root}")
    path = root / f"transforms_{split}.json"
    if not path.is_file():
        raise FileNotFoundError(f"missing {path}")
    meta = _read_json(path)
    if "camera_angle_x" not in meta or "frames" not in meta:
        raise ValueError(f"{path}: expected 'camera_angle_x' and 'frames'")
    if not meta["frames"]:
        raise ValueError(f"{path}: no frames")

    width = height = None
    frames = []
    for k, fr in enumerate(meta["frames"]):
        if "time" not in fr:
            raise ValueError(f"{path}: frame {k} has no 'time': not a dynamic dataset")
        img_path = _resolve_image(root, fr["file_path"])
        if width is None:
            if "w" in meta and "h" in meta:
                width, height = int(meta["w"]), int(meta["h"])
            else:
                if not img_path.is_file():
                    raise FileNotFoundError(f"missing image {img_path}")
                with Image.open(img_path) as im:
                    width, height = im.size
        c2w = np.asarray(fr["transform_matrix"], dtype=np.float64).reshape(4, 4) @ _GL_TO_CV
        w2c = np.linalg.inv(c2w)
        focal = 0.5 * width / math.tan(0.5 * float(meta["camera_angle_x"]))
        t = min(max(float(fr["time"]), 0.0), 1.0)
        cam = CameraView(width, height, focal, focal, width / 2.0, height / 2.0,
                         w2c[:3, :3], w2c[:3, 3], t)
        frames.append(Frame(cam, img_path))

    bounds = None
    if "scene_bounds" in meta:
        b = np.asarray(meta["scene_bounds"], dtype=np.float64).reshape(2, 3)
        bounds = (b[0], b[1])
    points = colors = None
    ply = root / "points3d.ply"
    if ply.is_file():
        cloud = TriangleMesh.read_ply(ply)
        points = cloud.vertices
        colors = cloud.colors if cloud.colors is not None else np.full_like(points, 0.5)
    return Dataset(frames, tuple(float(c) for c in background), split, bounds, points, colors)


def write_nerf_synthetic(root, split: str, cameras: Sequence[CameraView], images: Sequence[np.ndarray],
                         bounds=None) -> Path:
    """Write PNGs and ``transforms_<split>.json`` in the layout :func:`load_nerf_synthetic` reads."""
    root = Path(root)
    (root / split).mkdir(parents=True, exist_ok=True)
    widths = {c.width for c in cameras}
    fxs = {c.fx for c in cameras}
    if len(widths) != 1 or len(fxs) != 1:
        raise ValueError("all cameras must share intrinsics")
    cam0 = cameras[0]
    frames = []
    for i, (cam, img) in enumerate(zip(cameras, images)):
        name = f"{split}/r_{i:04d}"
        write_image(root / f"{name}.png", img)
        c2w = np.eye(4)
        c2w[:3, :3] = cam.rotation.T
        c2w[:3, 3] = cam.center
        frames.append({"file_path": f"./{name}", "time": float(cam.time),
                       "transform_matrix": (c2w @ _GL_TO_CV).tolist()})
    meta = {"camera_angle_x": 2.0 * math.atan(0.5 * cam0.width / cam0.fx),
            "w": cam0.width, "h": cam0.height, "frames": frames}
    if bounds is not None:
        meta["scene_bounds"] = [list(map(float, bounds[0])), list(map(float, bounds[1]))]
    path = root / f"transforms_{split}.json"
    path.write_text(json.dumps(meta, indent=2))
    return path


def random_init_points(n: int, bounds=None, seed: int = 0) -> tuple[np.ndarray, np.ndarray]:
    """Uniform points in the bounds hint (default cube [-1.3, 1.3]^3) with random colors."""
    rng = np.random.default_rng(seed)
    lo, hi = bounds if bounds is not None else (np.full(3, DEFAULT_BOUNDS[0]), np.full(3, DEFAULT_BOUNDS[1]))
    pts = rng.uniform(lo, hi, size=(n, 3))
    return pts, rng.uniform(0.0, 1.0, size=(n, 3))
