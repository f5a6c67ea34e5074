"""Analytic test scenes rendered to NeRF-synthetic datasets with ground-truth meshes.

Kinds:
    sphere            textured opaque sphere, static
    disc              textured flat disc, static
    floater-scene     the sphere plus a background-colored blob hovering above it
    translating-disc  the disc moving at constant velocity, 8 views x 10 timestamps
"""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import save_checkpoint
from .data import Dataset, load_nerf_synthetic, write_nerf_synthetic
from .deformation import DeformationField, DynamicScene
from .meshing import TriangleMesh
from .render import render_view
from .scene import CameraView, ControlPoints, DTYPE, Surfels, farthest_point_sampling, matrix_to_quat

KINDS = ("sphere", "disc", "floater-scene", "translating-disc")

DEFAULTS = {
    "sphere": dict(radius=0.5, surfels=3000, views=20, resolution=64, distance=2.0, fov=0.8, elevation=25.0),
    "disc": dict(radius=0.5, surfels=2000, views=20, resolution=64, distance=2.0, fov=0.8, elevation=45.0),
    "floater-scene": dict(radius=0.5, surfels=3000, views=20, resolution=64, distance=2.5, fov=0.9,
                          elevation=30.0, floater_center=(0.0, 0.0, 0.95), floater_radius=0.1,
                          floater_surfels=300),
    "translating-disc": dict(radius=0.4, surfels=2000, views=8, times=10, test_views=2, resolution=64,
                             distance=2.2, fov=0.8, elevation=50.0, velocity=(0.3, 0.0, 0.0),
                             init_points=1500),
}


# --------------------------------------------------------------------------- #
# geometry helpers
# --------------------------------------------------------------------------- #


def fibonacci_sphere(n: int, radius: float = 1.0) -> np.ndarray:
    i = np.arange(n) + 0.5
    phi = np.arccos(1.0 - 2.0 * i / n)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * i
    return radius * np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)


def texture(points: np.ndarray) -> np.ndarray:
    """Smooth, low-frequency color pattern."""
    x, y, z = points[:, 0], points[:, 1], points[:, 2]
    return np.stack([0.5 + 0.35 * np.sin(3.0 * x + 1.0),
                     0.5 + 0.35 * np.cos(2.5 * y - 0.5 * z),
                     0.45 + 0.3 * np.sin(2.0 * (x + y) + 2.0 * z)], axis=1)


def frames_from_normals(normals: np.ndarray) -> np.ndarray:
    """Unit quaternions whose third frame axis is the given normal."""
    normals = normals / np.linalg.norm(normals, axis=1, keepdims=True)
    helper = np.where(np.abs(normals[:, 2:3]) < 0.9, [[0.0, 0.0, 1.0]], [[1.0, 0.0, 0.0]])
    tu = np.cross(helper, normals)
    tu /= np.linalg.norm(tu, axis=1, keepdims=True)
    tv = np.cross(normals, tu)
    return np.array([matrix_to_quat(np.stack([a, b, c], axis=1)) for a, b, c in zip(tu, tv, normals)])


def sphere_surfels(n: int, radius: float, center=(0.0, 0.0, 0.0), colors=None, opacity: float = 0.98) -> Surfels:
    dirs = fibonacci_sphere(n)
    pts = np.asarray(center) + radius * dirs
    spacing = np.sqrt(4.0 * np.pi * radius ** 2 / n)
    colors = texture(pts) if colors is None else colors
    return Surfels.create(pts, frames_from_normals(dirs), 0.6 * spacing, opacity, colors)


def disc_points(radius: float, n: int) -> np.ndarray:
    """Sunflower-spiral points filling a disc in the z = 0 plane."""
    i = np.arange(n) + 0.5
    r = radius * np.sqrt(i / n)
    theta = np.pi * (1.0 + 5.0 ** 0.5) * i
    return np.stack([r * np.cos(theta), r * np.sin(theta), np.zeros(n)], 1)


def disc_surfels(radius: float, n: int, opacity: float = 0.98) -> Surfels:
    pts = disc_points(radius, n)
    spacing = np.sqrt(np.pi * radius ** 2 / n)
    quats = np.tile([1.0, 0.0, 0.0, 0.0], (n, 1))
    return Surfels.create(pts, quats, 0.6 * spacing, opacity, texture(pts))


def uv_sphere_mesh(radius: float, center=(0.0, 0.0, 0.0), n_lat: int = 48, n_lon: int = 96) -> TriangleMesh:
    lat = np.linspace(0.0, np.pi, n_lat + 1)[1:-1]
    lon = np.linspace(0.0, 2 * np.pi, n_lon, endpoint=False)
    la, lo = np.meshgrid(lat, lon, indexing="ij")
    ring = np.stack([np.sin(la) * np.cos(lo), np.sin(la) * np.sin(lo), np.cos(la)], -1).reshape(-1, 3)
    verts = np.concatenate([[[0, 0, 1]], ring, [[0, 0, -1]]]) * radius + np.asarray(center)
    faces = []
    idx = lambda r, c: 1 + r * n_lon + (c % n_lon)   # noqa: E731
    for c in range(n_lon):
        faces.append([0, idx(0, c), idx(0, c + 1)])
        last = len(verts) - 1
        faces.append([last, idx(n_lat - 2, c + 1), idx(n_lat - 2, c)])
        for r in range(n_lat - 2):
            faces.append([idx(r, c), idx(r + 1, c), idx(r + 1, c + 1)])
            faces.append([idx(r, c), idx(r + 1, c + 1), idx(r, c + 1)])
    return TriangleMesh(verts, np.array(faces))


def disc_mesh(radius: float, center=(0.0, 0.0, 0.0), segments: int = 96) -> TriangleMesh:
    ang = np.linspace(0.0, 2 * np.pi, segments, endpoint=False)
    rim = np.stack([radius * np.cos(ang), radius * np.sin(ang), np.zeros(segments)], 1)
    verts = np.concatenate([[[0.0, 0.0, 0.0]], rim]) + np.asarray(center)
    faces = [[0, 1 + i, 1 + (i + 1) % segments] for i in range(segments)]
    return TriangleMesh(verts, np.array(faces))


def ring_cameras(n: int, distance: float, elevation_deg: float, resolution: int, fov: float,
                 times=None, azimuth_offset: float = 0.0, alternate: bool = False) -> list[CameraView]:
    """Cameras evenly spaced in azimuth looking at the origin.

    ``alternate`` flips the elevation sign on every other camera for below-the-equator coverage.
    """
    times = np.zeros(n) if times is None else np.broadcast_to(np.asarray(times, dtype=np.float64), (n,))
    cams = []
    for i in range(n):
        az = azimuth_offset + 2 * np.pi * i / n
        el = np.deg2rad(elevation_deg) * (-1 if alternate and i % 2 else 1)
        eye = distance * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        cams.append(CameraView.look_at(eye, [0, 0, 0], width=resolution, height=resolution, fov_x=fov,
                                       time=float(times[i])))
    return cams


def static_scene(surfels: Surfels, num_controls: int = 16, seed: int = 0) -> DynamicScene:
    """Wrap ground-truth surfels in a scene whose (zero-initialized) field is the identity."""
    means = surfels.means.numpy()
    idx = farthest_point_sampling(means, num_controls, np.random.default_rng(seed))
    ctrl = means[idx]
    d = np.linalg.norm(ctrl[:, None] - ctrl[None], axis=-1)
    np.fill_diagonal(d, np.inf)
    radius = float(d.min(1).mean())
    controls = ControlPoints(torch.as_tensor(ctrl, dtype=DTYPE).clone(),
                             torch.full((len(ctrl),), np.log(radius), dtype=DTYPE))
    return DynamicScene(surfels, controls, DeformationField(2, 2, 16, 1), num_neighbors=4)


def render_images(surfels_at, cameras, background=(1.0, 1.0, 1.0)) -> list[np.ndarray]:
    out = []
    with torch.no_grad():
        for cam in cameras:
            out.append(render_view(surfels_at(cam.time), cam, background, records=False).rgb.numpy())
    return out


# --------------------------------------------------------------------------- #
# generator
# --------------------------------------------------------------------------- #


@dataclass
class SyntheticResult:
    root: Path
    kind: str
    params: dict
    train: Dataset
    test: Dataset | None
    times: list[float]
    gt_meshes: list[TriangleMesh]
    scene: DynamicScene | None = None     # ground truth for static kinds
    floater: Surfels | None = None
    extra: dict = field(default_factory=dict)


def _write_gt(root: Path, meshes, times=None) -> None:
    """``gt/mesh_%05d.obj`` per timestamp; a static scene gets one mesh and no times.txt."""
    gt = root / "gt"
    gt.mkdir(parents=True, exist_ok=True)
    for i, m in enumerate(meshes):
        m.write_obj(gt / f"mesh_{i:05d}.obj")
    if times is not None:
        (gt / "times.txt").write_text("".join(f"{t:.9g}\n" for t in times))


def generate_synthetic(kind: str, out_dir, params: dict | None = None, seed: int = 0) -> SyntheticResult:
    """Render an analytic scene into ``out_dir`` and reload it through the dataset loader."""
    if kind not in KINDS:
        raise ValueError(f"unknown kind {kind!r}; expected one of {', '.join(KINDS)}")
    p = dict(DEFAULTS[kind])
    unknown = set(params or {}) - set(p)
    if unknown:
        raise ValueError(f"unknown parameters for {kind}: {sorted(unknown)}")
    p.update(params or {})
    root = Path(out_dir)
    root.mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    bg = (1.0, 1.0, 1.0)

    if kind == "translating-disc":
        canonical = disc_surfels(p["radius"], p["surfels"])
        velocity = np.asarray(p["velocity"], dtype=np.float64)
        times = list(np.linspace(0.0, 1.0, p["times"]))

        def offset(t):
            return (t - 0.5) * velocity

        def at(t):
            return canonical.replace(means=canonical.means + torch.as_tensor(offset(t), dtype=DTYPE))

        def grid(n_views, az0):
            return [c for t in times for c in ring_cameras(n_views, p["distance"], p["elevation"],
                                                           p["resolution"], p["fov"], t, az0)]

        train_cams = grid(p["views"], 0.0)
        test_cams = grid(p["test_views"], np.pi / p["views"])
        gt = [disc_mesh(p["radius"], offset(t)) for t in times]
        lo = np.array([-p["radius"], -p["radius"], -0.1]) - 0.5 * np.abs(velocity)
        hi = -lo
        write_nerf_synthetic(root, "train", train_cams, render_images(at, train_cams, bg), (lo, hi))
        write_nerf_synthetic(root, "test", test_cams, render_images(at, test_cams, bg), (lo, hi))
        pts = disc_points(p["radius"], p["init_points"])
        pts[:, :2] += rng.normal(scale=0.01, size=(len(pts), 2))
        cloud = TriangleMesh(pts, np.zeros((0, 3), dtype=np.int64), np.full_like(pts, 0.5))
        cloud.write_ply(root / "points3d.ply")
        _write_gt(root, gt, times)
        return SyntheticResult(root, kind, p, load_nerf_synthetic(root, "train", bg),
                               load_nerf_synthetic(root, "test", bg), times, gt,
                               extra={"velocity": velocity})

    floater = None
    if kind == "disc":
        surfels = disc_surfels(p["radius"], p["surfels"])
        gt = [disc_mesh(p["radius"])]
    else:
        surfels = sphere_surfels(p["surfels"], p["radius"])
        gt = [uv_sphere_mesh(p["radius"])]
        if kind == "floater-scene":
            floater = sphere_surfels(p["floater_surfels"], p["floater_radius"], p["floater_center"],
                                     colors=np.ones((p["floater_surfels"], 3)), opacity=0.99)
            surfels = Surfels.cat([surfels, floater])
    times = list(np.linspace(0.0, 1.0, p["views"]))
    cams = ring_cameras(p["views"], p["distance"], p["elevation"], p["resolution"], p["fov"], times,
                        alternate=kind != "disc")
    images = render_images(lambda t: surfels, cams, bg)
    write_nerf_synthetic(root, "train", cams, images)
    cloud = TriangleMesh(surfels.means.numpy(), np.zeros((0, 3), dtype=np.int64),
                         np.full((len(surfels), 3), 0.5))
    cloud.write_ply(root / "points3d.ply")
    _write_gt(root, gt)
    scene = static_scene(surfels, seed=seed)
    save_checkpoint(root / "gt_scene.npz", scene, cams, bg, {"kind": kind})
    return SyntheticResult(root, kind, p, load_nerf_synthetic(root, "train", bg), None, times,
                           gt * len(times), scene, floater)
