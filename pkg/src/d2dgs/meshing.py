"""Foreground masks, depth filtering, TSDF fusion and mesh extraction at a timestamp."""

from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from scipy import ndimage
from scipy.sparse import coo_matrix
from scipy.sparse.csgraph import connected_components
from skimage import measure

from .render import render_view
from .scene import CameraView

DEFAULT_TOLERANCE = 2.0 / 255.0


# --------------------------------------------------------------------------- #
# triangle meshes
# --------------------------------------------------------------------------- #


@dataclass
class TriangleMesh:
    vertices: np.ndarray                 # (V, 3)
    faces: np.ndarray                    # (F, 3) int
    colors: np.ndarray | None = None     # (V, 3) in [0, 1]

    def __post_init__(self):
        self.vertices = np.asarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.asarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.colors is not None:
            self.colors = np.asarray(self.colors, dtype=np.float64).reshape(-1, 3)
        if self.faces.size and (self.faces.min() < 0 or self.faces.max() >= len(self.vertices)):
            raise ValueError("face index out of range")

    @staticmethod
    def empty() -> "TriangleMesh":
        return TriangleMesh(np.zeros((0, 3)), np.zeros((0, 3), dtype=np.int64))

    def __len__(self) -> int:
        return len(self.faces)

    @property
    def is_empty(self) -> bool:
        return len(self.faces) == 0

    def face_areas(self) -> np.ndarray:
        a, b, c = (self.vertices[self.faces[:, i]] for i in range(3))
        return 0.5 * np.linalg.norm(np.cross(b - a, c - a), axis=1)

    def area(self) -> float:
        return float(self.face_areas().sum())

    def centroid(self) -> np.ndarray:
        """Area-weighted surface centroid."""
        areas = self.face_areas()
        if areas.sum() <= 0:
            raise ValueError("mesh has no area")
        centers = self.vertices[self.faces].mean(axis=1)
        return (areas[:, None] * centers).sum(0) / areas.sum()

    def edges(self) -> tuple[np.ndarray, np.ndarray]:
        """Unique undirected edges and how many faces use each."""
        e = np.concatenate([self.faces[:, [0, 1]], self.faces[:, [1, 2]], self.faces[:, [2, 0]]])
        e.sort(axis=1)
        return np.unique(e, axis=0, return_counts=True)

    def boundary_edges(self) -> np.ndarray:
        if self.is_empty:
            return np.zeros((0, 2), dtype=np.int64)
        edges, counts = self.edges()
        return edges[counts == 1]

    def is_edge_manifold(self) -> bool:
        return self.is_empty or bool((self.edges()[1] <= 2).all())

    def hole_count(self) -> int:
        """Connected groups of boundary edges, i.e. boundary loops."""
        b = self.boundary_edges()
        if len(b) == 0:
            return 0
        _, inv = np.unique(b, return_inverse=True)
        inv = inv.reshape(-1, 2)
        n = inv.max() + 1
        graph = coo_matrix((np.ones(len(inv)), (inv[:, 0], inv[:, 1])), shape=(n, n))
        return int(connected_components(graph, directed=False)[0])

    def component_labels(self) -> tuple[int, np.ndarray]:
        """Face-connected components (faces sharing a vertex). Returns (count, label per face)."""
        if self.is_empty:
            return 0, np.zeros(0, dtype=np.int64)
        nf, nv = len(self.faces), len(self.vertices)
        rows = np.repeat(np.arange(nf), 3)
        graph = coo_matrix((np.ones(3 * nf), (rows, nf + self.faces.reshape(-1))), shape=(nf + nv,) * 2)
        _, labels = connected_components(graph, directed=False)
        face_labels = labels[:nf]
        _, face_labels = np.unique(face_labels, return_inverse=True)
        return int(face_labels.max()) + 1, face_labels

    def num_components(self) -> int:
        return self.component_labels()[0]

    def cleaned(self, tol: float = 0.0) -> "TriangleMesh":
        """Weld coincident vertices, drop collapsed and duplicate faces, drop unused vertices."""
        if self.is_empty:
            return TriangleMesh.empty()
        key = self.vertices if tol <= 0 else np.round(self.vertices / tol)
        _, first, inv = np.unique(key, axis=0, return_index=True, return_inverse=True)
        faces = inv.reshape(-1)[self.faces]
        ok = (faces[:, 0] != faces[:, 1]) & (faces[:, 1] != faces[:, 2]) & (faces[:, 0] != faces[:, 2])
        faces = faces[ok]
        if len(faces):
            _, keep = np.unique(np.sort(faces, axis=1), axis=0, return_index=True)
            faces = faces[np.sort(keep)]
        verts = self.vertices[first]
        colors = None if self.colors is None else self.colors[first]
        used, remap = np.unique(faces, return_inverse=True)
        return TriangleMesh(verts[used], remap.reshape(-1, 3),
                            None if colors is None else colors[used])

    # -- file formats ----------------------------------------------------- #

    def write_obj(self, path) -> None:
        with open(path, "w") as fh:
            for v in self.vertices:
                fh.write(f"v {v[0]:.9g} {v[1]:.9g} {v[2]:.9g}\n")
            for f in self.faces + 1:
                fh.write(f"f {f[0]} {f[1]} {f[2]}\n")

    @staticmethod
    def read_obj(path) -> "TriangleMesh":
        verts, faces = [], []
        with open(path) as fh:
            for line in fh:
                parts = line.split()
                if not parts:
                    continue
                if parts[0] == "v":
                    verts.append([float(x) for x in parts[1:4]])
                elif parts[0] == "f":
                    idx = [int(p.split("/")[0]) for p in parts[1:]]
                    idx = [i - 1 if i > 0 else len(verts) + i for i in idx]
                    for k in range(1, len(idx) - 1):   # fan-triangulate polygons
                        faces.append([idx[0], idx[k], idx[k + 1]])
        return TriangleMesh(np.array(verts).reshape(-1, 3), np.array(faces, dtype=np.int64).reshape(-1, 3))

    def write_ply(self, path) -> None:
        """Binary little-endian PLY, float32 positions, uchar colors when present."""
        has_color = self.colors is not None
        header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(self.vertices)}",
                  "property float x", "property float y", "property float z"]
        if has_color:
            header += ["property uchar red", "property uchar green", "property uchar blue"]
        header += [f"element face {len(self.faces)}", "property list uchar int vertex_indices",
                   "end_header"]
        vdtype = [("p", "<f4", 3)] + ([("c", "u1", 3)] if has_color else [])
        vrec = np.zeros(len(self.vertices), dtype=vdtype)
        vrec["p"] = self.vertices
        if has_color:
            vrec["c"] = np.clip(np.round(self.colors * 255), 0, 255)
        frec = np.zeros(len(self.faces), dtype=[("n", "u1"), ("i", "<i4", 3)])
        frec["n"] = 3
        frec["i"] = self.faces
        with open(path, "wb") as fh:
            fh.write(("\n".join(header) + "\n").encode("ascii"))
            fh.write(vrec.tobytes())
            fh.write(frec.tobytes())

    @staticmethod
    def read_ply(path) -> "TriangleMesh":
        """Reader for the files :meth:`write_ply` produces."""
        data = Path(path).read_bytes()
        end = data.index(b"end_header\n") + len(b"end_header\n")
        header = data[:end].decode("ascii").splitlines()
        nv = int(next(h for h in header if h.startswith("element vertex")).split()[-1])
        nf = int(next(h for h in header if h.startswith("element face")).split()[-1])
        has_color = any("red" in h for h in header)
        vdtype = [("p", "<f4", 3)] + ([("c", "u1", 3)] if has_color else [])
        vrec = np.frombuffer(data, dtype=vdtype, count=nv, offset=end)
        frec = np.frombuffer(data, dtype=[("n", "u1"), ("i", "<i4", 3)], count=nf,
                             offset=end + vrec.nbytes)
        colors = vrec["c"].astype(np.float64) / 255 if has_color else None
        return TriangleMesh(vrec["p"].astype(np.float64), frec["i"].astype(np.int64), colors)


# --------------------------------------------------------------------------- #
# masks and depth filtering
# --------------------------------------------------------------------------- #


def extract_mask(rgb, bg=(1.0, 1.0, 1.0), tolerance: float = DEFAULT_TOLERANCE,
                 erode: bool = False) -> np.ndarray:
    """1 where any channel differs from the background by more than ``tolerance``."""
    if tolerance < 0:
        raise ValueError("tolerance must be >= 0")
    rgb = np.asarray(rgb, dtype=np.float64)
    diff = np.abs(rgb - np.asarray(bg, dtype=np.float64)).max(axis=-1)
    mask = diff > tolerance
    if erode:
        mask = ndimage.binary_erosion(mask, border_value=0)
    return mask.astype(np.uint8)


def filter_depth(depth, mask) -> np.ndarray:
    depth = np.asarray(depth, dtype=np.float64)
    mask = np.asarray(mask)
    if depth.shape != mask.shape:
        raise ValueError(f"shape mismatch: depth {depth.shape} vs mask {mask.shape}")
    return depth * mask


# --------------------------------------------------------------------------- #
# TSDF
# --------------------------------------------------------------------------- #


class TsdfVolume:
    """Regular grid of voxel samples at ``origin + index * voxel_size``.

    Unobserved voxels carry weight 0; ``sdf`` is then meaningless and is kept at +truncation.
    """

    def __init__(self, bounds_min, bounds_max, voxel_size: float, truncation: float | None = None):
        self.bounds_min = np.asarray(bounds_min, dtype=np.float64)
        bounds_max = np.asarray(bounds_max, dtype=np.float64)
        if voxel_size <= 0 or np.any(bounds_max <= self.bounds_min):
            raise ValueError("invalid volume bounds or voxel size")
        self.voxel_size = float(voxel_size)
        self.truncation = 4.0 * self.voxel_size if truncation is None else float(truncation)
        if self.truncation < 2.0 * self.voxel_size:
            raise ValueError("truncation must be at least 2 voxel sizes")
        self.dims = tuple(int(np.ceil((bounds_max - self.bounds_min)[i] / voxel_size - 1e-9)) + 1
                          for i in range(3))
        self.sdf = np.full(self.dims, self.truncation)
        self.weight = np.zeros(self.dims)
        self.color = np.zeros(self.dims + (3,))
        axes = [self.bounds_min[i] + np.arange(self.dims[i]) * self.voxel_size for i in range(3)]
        self._points = np.stack(np.meshgrid(*axes, indexing="ij"), axis=-1).reshape(-1, 3)

    @classmethod
    def around(cls, bounds_min, bounds_max, resolution: int = 64, truncation_voxels: float = 4.0):
        """Volume whose longest side spans ``resolution`` samples."""
        bounds_min = np.asarray(bounds_min, dtype=np.float64)
        bounds_max = np.asarray(bounds_max, dtype=np.float64)
        voxel = float((bounds_max - bounds_min).max()) / (resolution - 1)
        return cls(bounds_min, bounds_max, voxel, truncation_voxels * voxel)

    @property
    def bounds_max(self) -> np.ndarray:
        return self.bounds_min + (np.array(self.dims) - 1) * self.voxel_size

    def voxel_centers(self) -> np.ndarray:
        return self._points.reshape(self.dims + (3,))

    def integrate(self, depth, rgb, camera: CameraView) -> "TsdfVolume":
        depth = np.asarray(depth, dtype=np.float64)
        rgb = np.zeros(depth.shape + (3,)) if rgb is None else np.asarray(rgb, dtype=np.float64)
        cam = self._points @ camera.rotation.T + camera.translation
        z = cam[:, 2]
        zsafe = np.where(z > 0, z, 1.0)
        px = np.floor(camera.fx * cam[:, 0] / zsafe + camera.cx).astype(np.int64)
        py = np.floor(camera.fy * cam[:, 1] / zsafe + camera.cy).astype(np.int64)
        ok = (z > 0) & (px >= 0) & (px < camera.width) & (py >= 0) & (py < camera.height)
        idx = np.nonzero(ok)[0]
        d = depth[py[idx], px[idx]]
        obs = d - z[idx]
        keep = (d > 0) & (obs >= -self.truncation)
        idx, obs = idx[keep], np.minimum(obs[keep], self.truncation)
        col = rgb[py[idx], px[idx]]

        sdf = self.sdf.reshape(-1)
        weight = self.weight.reshape(-1)
        color = self.color.reshape(-1, 3)
        w = weight[idx]
        sdf[idx] = (sdf[idx] * w + obs) / (w + 1)
        color[idx] = (color[idx] * w[:, None] + col) / (w + 1)[:, None]
        weight[idx] = w + 1
        # weight-0 voxels start at +truncation, which the first observation fully overwrites
        return self


def tsdf_integrate(volume: TsdfVolume, depth, rgb, camera: CameraView) -> TsdfVolume:
    return volume.integrate(depth, rgb, camera)


def marching_cubes(volume: TsdfVolume, iso: float = 0.0) -> TriangleMesh:
    """Triangulate the ``iso`` level set over fully observed cells.

    Returns an empty mesh when no cell crosses the level.
    """
    observed = volume.weight > 0
    cell_ok = np.ones(tuple(d - 1 for d in volume.dims), dtype=bool)
    for off in np.ndindex(2, 2, 2):
        cell_ok &= observed[off[0]:off[0] + cell_ok.shape[0], off[1]:off[1] + cell_ok.shape[1],
                            off[2]:off[2] + cell_ok.shape[2]]
    if not cell_ok.any():
        return TriangleMesh.empty()
    field_ = np.where(observed, volume.sdf, volume.truncation)
    try:
        verts, faces, _, _ = measure.marching_cubes(field_, level=iso, allow_degenerate=False)
    except (RuntimeError, ValueError):
        return TriangleMesh.empty()

    # a face belongs to the cell containing its centroid; on a shared cell face both
    # neighbors must be observed
    centroid = verts[faces].mean(axis=1)
    keep = np.ones(len(faces), dtype=bool)
    lo = np.floor(centroid - 1e-7).astype(np.int64)
    hi = np.floor(centroid + 1e-7).astype(np.int64)
    for corner in np.ndindex(2, 2, 2):
        cell = np.where(np.array(corner, dtype=bool), hi, lo)
        inside = np.all((cell >= 0) & (cell < np.array(cell_ok.shape)), axis=1)
        ok = np.zeros(len(faces), dtype=bool)
        ok[inside] = cell_ok[tuple(cell[inside].T)]
        keep &= ok
    faces = faces[keep]

    colors = np.stack([ndimage.map_coordinates(volume.color[..., c], verts.T, order=1, mode="nearest")
                       for c in range(3)], axis=-1)
    world = volume.bounds_min + verts * volume.voxel_size
    return TriangleMesh(world, faces, colors).cleaned()


# --------------------------------------------------------------------------- #
# mesh at a timestamp
# --------------------------------------------------------------------------- #


@dataclass
class MeshingConfig:
    resolution: int = 64
    truncation_voxels: float = 4.0
    margin: float = 0.1
    tolerance: float = DEFAULT_TOLERANCE
    erode: bool = False
    depth: str = "median"     # or "expected"
    filter: bool = True

    def __post_init__(self):
        if self.depth not in ("median", "expected"):
            raise ValueError("depth must be 'median' or 'expected'")
        if self.resolution < 4:
            raise ValueError("resolution must be >= 4")


@dataclass
class FusionInputs:
    depths: list = field(default_factory=list)
    colors: list = field(default_factory=list)
    masks: list = field(default_factory=list)


def render_fusion_inputs(surfels, cameras: Sequence[CameraView], config: MeshingConfig,
                         background=(1.0, 1.0, 1.0)) -> FusionInputs:
    out = FusionInputs()
    with torch.no_grad():
        for cam in cameras:
            r = render_view(surfels, cam, background, records=False)
            rgb = r.rgb.numpy()
            depth = (r.depth_median if config.depth == "median" else r.depth_expected).numpy()
            mask = extract_mask(rgb, background, config.tolerance, config.erode)
            out.masks.append(mask)
            out.colors.append(rgb)
            out.depths.append(filter_depth(depth, mask) if config.filter else depth)
    return out


def fuse_views(depths, colors, cameras, bounds_min, bounds_max, config: MeshingConfig) -> TriangleMesh:
    vol = TsdfVolume.around(bounds_min, bounds_max, config.resolution, config.truncation_voxels)
    for d, c, cam in zip(depths, colors, cameras):
        vol.integrate(d, c, cam)
    return marching_cubes(vol)


def extract_mesh_at(t: float, scene, cameras: Sequence[CameraView], config: MeshingConfig | None = None,
                    background=(1.0, 1.0, 1.0)) -> TriangleMesh:
    """Warp ``scene`` to ``t``, render every camera, mask, filter and fuse."""
    config = config or MeshingConfig()
    if not 0.0 <= float(t) <= 1.0:
        raise ValueError("timestamp out of range")
    if len(cameras) < 2:
        raise ValueError("at least 2 cameras are required")
    with torch.no_grad():
        surfels = scene.at_time(float(t)) if hasattr(scene, "at_time") else scene
    inputs = render_fusion_inputs(surfels, cameras, config, background)
    if not any(m.any() for m in inputs.masks):
        raise ValueError("no foreground")
    means = surfels.means.detach().numpy()
    lo, hi = means.min(0), means.max(0)
    pad = config.margin * max(float((hi - lo).max()), 1e-6)
    return fuse_views(inputs.depths, inputs.colors, cameras, lo - pad, hi + pad, config)
