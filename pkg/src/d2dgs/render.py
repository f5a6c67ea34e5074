"""Differentiable surfel rasterizer.

Each pixel ray is intersected with every candidate surfel's tangent plane, the hits
are sorted by camera depth and alpha-composited front to back. Candidate lists come
from screen-space tile binning of each surfel's 3-sigma footprint. A per-pixel numpy
implementation (:func:`render_reference`) serves as the brute-force oracle.
"""

from __future__ import annotations

import functools
import math
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np
import torch

from .scene import DTYPE, CameraView, Surfels, quat_normalize, quat_to_matrix

NEAR = 0.01
CUTOFF = 3.0          # splat extent in standard deviations
SCREEN_SIGMA = 0.5    # pixels, low-pass floor
T_MIN = 1e-4          # early-termination transmittance
PARALLEL_EPS = 1e-8

SH_C0 = 0.28209479177387814
SH_C1 = 0.4886025119029199
SH_C2 = (1.0925484305920792, -1.0925484305920792, 0.31539156525252005,
         -1.0925484305920792, 0.5462742152960396)
SH_C3 = (-0.5900435899266435, 2.890611442640554, -0.4570457994644658, 0.3731763325901154,
         -0.4570457994644658, 1.445305721320277, -0.5900435899266435)


def eval_sh(sh, dirs, degree: int):
    """Evaluate real SH (3DGS ordering) for unit directions. Works on torch or numpy."""
    result = SH_C0 * sh[:, 0]
    if degree > 0:
        x, y, z = dirs[:, 0:1], dirs[:, 1:2], dirs[:, 2:3]
        result = result - SH_C1 * y * sh[:, 1] + SH_C1 * z * sh[:, 2] - SH_C1 * x * sh[:, 3]
        if degree > 1:
            xx, yy, zz = x * x, y * y, z * z
            xy, yz, xz = x * y, y * z, x * z
            result = (result + SH_C2[0] * xy * sh[:, 4] + SH_C2[1] * yz * sh[:, 5]
                      + SH_C2[2] * (2.0 * zz - xx - yy) * sh[:, 6]
                      + SH_C2[3] * xz * sh[:, 7] + SH_C2[4] * (xx - yy) * sh[:, 8])
            if degree > 2:
                result = (result + SH_C3[0] * y * (3 * xx - yy) * sh[:, 9]
                          + SH_C3[1] * xy * z * sh[:, 10]
                          + SH_C3[2] * y * (4 * zz - xx - yy) * sh[:, 11]
                          + SH_C3[3] * z * (2 * zz - 3 * xx - 3 * yy) * sh[:, 12]
                          + SH_C3[4] * x * (4 * zz - xx - yy) * sh[:, 13]
                          + SH_C3[5] * z * (xx - yy) * sh[:, 14]
                          + SH_C3[6] * x * (xx - 3 * yy) * sh[:, 15])
    return result


def gaussian_value(u, v):
    return math.exp(-0.5 * (u * u + v * v))


# --------------------------------------------------------------------------- #
# scalar primitives
# --------------------------------------------------------------------------- #


@dataclass
class Intersection:
    index: int
    u: float
    v: float
    z: float
    gaussian: float
    alpha: float
    color: np.ndarray | None = None
    normal: np.ndarray | None = None


def ray_splat_intersect(direction, center, t_u, t_v, t_w, scales, opacity: float = 1.0,
                        index: int = 0, near: float = NEAR, cutoff: float = CUTOFF):
    """Intersect a camera-space ray (origin at the camera) with a surfel's tangent plane.

    Returns ``None`` for a ray parallel to the plane, a hit at or before the near
    plane, or a hit outside the ``cutoff``-sigma disc.
    """
    d = np.asarray(direction, dtype=np.float64)
    c = np.asarray(center, dtype=np.float64)
    n = np.asarray(t_w, dtype=np.float64)
    denom = float(n @ d)
    if abs(denom) < PARALLEL_EPS * np.linalg.norm(d):
        return None
    s = float(n @ c) / denom
    hit = s * d
    z = float(hit[2])
    if z <= near:
        return None
    offset = hit - c
    u = float(offset @ np.asarray(t_u)) / float(scales[0])
    v = float(offset @ np.asarray(t_v)) / float(scales[1])
    if u * u + v * v > cutoff * cutoff:
        return None
    g = gaussian_value(u, v)
    return Intersection(index, u, v, z, g, opacity * g)


@dataclass
class PixelResult:
    color: np.ndarray
    alpha: float
    depth_expected: float
    depth_median: float
    normal: np.ndarray
    weights: list = field(default_factory=list)
    transmittance: float = 1.0


def composite_pixel(intersections: Sequence[Intersection], bg, verify: bool = False) -> PixelResult:
    """Front-to-back alpha blending of depth-sorted intersections."""
    if verify and any(a.z > b.z for a, b in zip(intersections, intersections[1:])):
        raise ValueError("intersections are not sorted by depth")
    bg = np.asarray(bg, dtype=np.float64)
    color = np.zeros(3)
    normal = np.zeros(3)
    trans = 1.0
    alpha = 0.0
    zsum = 0.0
    median = 0.0
    weights = []
    for hit in intersections:
        if trans < T_MIN:
            break
        w = hit.alpha * trans
        weights.append(w)
        if hit.color is not None:
            color += w * np.asarray(hit.color)
        if hit.normal is not None:
            normal += w * np.asarray(hit.normal)
        zsum += w * hit.z
        alpha += w
        if median == 0.0 and alpha >= 0.5:
            median = hit.z
        trans *= 1.0 - hit.alpha
    color += trans * bg
    depth = zsum / max(alpha, 1e-10) if alpha > 0 else 0.0
    norm = np.linalg.norm(normal)
    if alpha > 0.5 and norm > 0:
        normal = normal / norm
    else:
        normal = np.zeros(3)
    return PixelResult(color, alpha, depth, median, normal, weights, trans)


# --------------------------------------------------------------------------- #
# vectorized renderer
# --------------------------------------------------------------------------- #


@dataclass
class IntersectionRecords:
    """Per-pixel blend weights, depths and camera-facing normals, sorted front to back.

    Padded with zero weight up to K entries per pixel.
    """

    weights: torch.Tensor   # (H, W, K)
    depths: torch.Tensor    # (H, W, K)
    normals: torch.Tensor   # (H, W, K, 3)


@dataclass
class RenderTargets:
    rgb: torch.Tensor             # (H, W, 3)
    alpha: torch.Tensor           # (H, W)
    depth_expected: torch.Tensor  # (H, W)
    depth_median: torch.Tensor    # (H, W)
    normal: torch.Tensor          # (H, W, 3) camera space, unit or zero
    normal_sum: torch.Tensor      # (H, W, 3) unnormalized sum of w_i n_i
    records: IntersectionRecords | None = None

    def numpy(self) -> dict[str, np.ndarray]:
        return {
            "rgb": self.rgb.detach().numpy(),
            "alpha": self.alpha.detach().numpy(),
            "depth_expected": self.depth_expected.detach().numpy(),
            "depth_median": self.depth_median.detach().numpy(),
            "normal": self.normal.detach().numpy(),
        }


@dataclass
class _Prepared:
    centers: torch.Tensor      # camera-space
    t_u: torch.Tensor
    t_v: torch.Tensor
    normals: torch.Tensor      # camera-facing
    scales: torch.Tensor
    opacity: torch.Tensor
    colors: torch.Tensor
    proj: torch.Tensor         # projected centers in pixels
    bbox: np.ndarray | None    # (N, 4) xmin, xmax, ymin, ymax in pixels
    in_front: np.ndarray       # (N,) center beyond the near plane


def _prepare(surfels: Surfels, camera: CameraView, near: float, cutoff: float,
             screen_sigma: float, footprints: bool = True) -> _Prepared:
    R = torch.as_tensor(camera.rotation, dtype=DTYPE)
    t = torch.as_tensor(camera.translation, dtype=DTYPE)
    centers = surfels.means @ R.T + t
    frame = R @ quat_to_matrix(quat_normalize(surfels.quats))
    t_u, t_v = frame[..., 0], frame[..., 1]
    normals = torch.linalg.cross(t_u, t_v)
    facing = torch.where((normals * centers).sum(-1, keepdim=True) > 0, -1.0, 1.0).to(DTYPE)
    normals = normals * facing
    scales = surfels.scales
    opacity = surfels.opacities

    cam_center = torch.as_tensor(camera.center, dtype=DTYPE)
    dirs = surfels.means - cam_center
    dirs = dirs / torch.sqrt((dirs * dirs).sum(-1, keepdim=True)).clamp_min(1e-12)
    colors = torch.clamp(eval_sh(surfels.sh, dirs, surfels.sh_degree) + 0.5, 0.0, 1.0)

    z = centers[:, 2]
    zsafe = torch.where(z > near, z, torch.ones_like(z))
    proj = torch.stack(
        [camera.fx * centers[:, 0] / zsafe + camera.cx, camera.fy * centers[:, 1] / zsafe + camera.cy],
        dim=-1,
    )

    in_front = (z > near).detach().numpy()
    if not footprints:
        return _Prepared(centers, t_u, t_v, normals, scales, opacity, colors, proj, None, in_front)

    # conservative footprint: image of the cutoff rectangle, union the screen-space floor
    with torch.no_grad():
        c = centers.numpy()
        eu = (cutoff * scales[:, :1] * t_u).numpy()
        ev = (cutoff * scales[:, 1:] * t_v).numpy()
        corners = np.stack([c + eu + ev, c + eu - ev, c - eu + ev, c - eu - ev], axis=1)
        cz = corners[..., 2]
        ok = cz.min(axis=1) > near
        czs = np.where(cz > near, cz, 1.0)
        px = camera.fx * corners[..., 0] / czs + camera.cx
        py = camera.fy * corners[..., 1] / czs + camera.cy
        big = 1e30
        bbox = np.stack([
            np.where(ok, px.min(1), -big), np.where(ok, px.max(1), big),
            np.where(ok, py.min(1), -big), np.where(ok, py.max(1), big),
        ], axis=1)
        pc = proj.numpy()
        r = cutoff * screen_sigma + 1e-6
        bbox[:, 0] = np.minimum(bbox[:, 0], pc[:, 0] - r)
        bbox[:, 1] = np.maximum(bbox[:, 1], pc[:, 0] + r)
        bbox[:, 2] = np.minimum(bbox[:, 2], pc[:, 1] - r)
        bbox[:, 3] = np.maximum(bbox[:, 3], pc[:, 1] + r)
    return _Prepared(centers, t_u, t_v, normals, scales, opacity, colors, proj, bbox, in_front)


def _shade_hits(dirs, pix, p: _Prepared, sel, valid, use3, screen_sigma):
    """Differentiable alpha, depth and normal for the selected (pixel, surfel) hits, (P, K)."""
    d = dirs[:, None, :]
    c = p.centers[sel]
    n = p.normals[sel]
    tu, tv = p.t_u[sel], p.t_v[sel]
    sc = p.scales[sel]
    s = (n * c).sum(-1) / torch.where(use3, (n * d).sum(-1), torch.ones_like(use3, dtype=d.dtype))
    u = (s * (d * tu).sum(-1) - (c * tu).sum(-1)) / sc[..., 0]
    v = (s * (d * tv).sum(-1) - (c * tv).sum(-1)) / sc[..., 1]
    delta = pix[:, None, :] - p.proj[sel]
    rho2 = (delta * delta).sum(-1) / (screen_sigma * screen_sigma)
    rho = torch.where(use3, u * u + v * v, rho2)
    depth = torch.where(valid, torch.where(use3, s * d[..., 2], c[..., 2]), torch.zeros_like(rho))
    a = torch.where(valid, p.opacity[sel] * torch.exp(-0.5 * rho), torch.zeros_like(rho))
    return a, depth, n


def _shade(dirs: torch.Tensor, pix: torch.Tensor, p: _Prepared, idx: torch.Tensor,
           bg: torch.Tensor, near: float, cutoff: float, screen_sigma: float):
    """Composite the pixels ``dirs``/``pix`` against surfels ``idx``. Returns per-pixel tensors.

    Hit tests, branch choice and depth order are decided without gradients over every
    (pixel, candidate) pair; the differentiable terms are then recomputed only for the
    sorted valid hits. The decisions are piecewise constant, so this changes no gradient.
    Without autograd the dense values are gathered directly.
    """
    with torch.no_grad():
        c = p.centers[idx]
        n = p.normals[idx]
        tu, tv = p.t_u[idx], p.t_v[idx]
        sc = p.scales[idx]
        ndotd = dirs @ n.T                                   # (P, M)
        ndotc = (n * c).sum(-1)                              # (M,)
        dnorm = torch.sqrt((dirs * dirs).sum(-1, keepdim=True))
        geom_ok = ndotd.abs() >= PARALLEL_EPS * dnorm
        s = ndotc / torch.where(geom_ok, ndotd, torch.ones_like(ndotd))
        # hit - c projected on the tangents, without materializing (P, M, 3)
        u = (s * (dirs @ tu.T) - (c * tu).sum(-1)) / sc[:, 0]
        v = (s * (dirs @ tv.T) - (c * tv).sum(-1)) / sc[:, 1]
        rho3 = u * u + v * v
        z3 = s * dirs[:, 2:3]
        geom_ok = geom_ok & (z3 > near)
        delta = pix[:, None, :] - p.proj[idx][None, :, :]
        rho2 = (delta * delta).sum(-1) / (screen_sigma * screen_sigma)
        use3 = geom_ok & (rho3 <= rho2)
        rho = torch.where(use3, rho3, rho2)
        depth = torch.where(use3, z3, c[:, 2].expand_as(z3))
        valid = rho <= cutoff * cutoff
        key = torch.where(valid, depth, torch.full_like(depth, math.inf))
        order = torch.argsort(key, dim=1, stable=True)
        kmax = int(valid.sum(1).max()) if valid.numel() else 0
        order = order[:, :max(kmax, 1)]
        valid_k = torch.gather(valid, 1, order)
        use3 = torch.gather(use3, 1, order)
    sel = idx[order]                                      # (P, K) surfel ids

    if torch.is_grad_enabled():
        a, depth, n = _shade_hits(dirs, pix, p, sel, valid_k, use3, screen_sigma)
    else:
        rho = torch.gather(rho, 1, order)
        depth = torch.gather(torch.where(valid, depth, torch.zeros_like(depth)), 1, order)
        a = torch.where(valid_k, p.opacity[sel] * torch.exp(-0.5 * rho), torch.zeros_like(rho))
        n = p.normals[sel]

    with torch.no_grad():
        t_all = torch.cumprod(torch.cat([torch.ones_like(a[:, :1]), 1 - a[:, :-1]], 1), 1)
        keep = t_all >= T_MIN
    a = torch.where(keep, a, torch.zeros_like(a))
    one_minus = 1 - a
    trans = torch.cumprod(torch.cat([torch.ones_like(a[:, :1]), one_minus[:, :-1]], 1), 1)
    w = a * trans
    t_final = trans[:, -1] * one_minus[:, -1]

    col = p.colors[sel]                                   # (P, K, 3)
    rgb = (w[..., None] * col).sum(1) + t_final[:, None] * bg
    alpha = w.sum(1)
    zsum = (w * depth).sum(1)
    depth_exp = zsum / alpha.clamp_min(1e-10)
    cum = torch.cumsum(w, 1)
    hit = cum >= 0.5
    first = torch.argmax(hit.to(torch.int8), dim=1, keepdim=True)
    depth_med = torch.where(hit.any(1), torch.gather(depth, 1, first)[:, 0], torch.zeros_like(alpha))
    nsum = (w[..., None] * n).sum(1)
    nsq = (nsum * nsum).sum(-1, keepdim=True)
    show = (alpha > 0.5)[:, None] & (nsq > 0)
    nlen = torch.sqrt(torch.where(show, nsq, torch.ones_like(nsq)))
    normal = torch.where(show, nsum / nlen, torch.zeros_like(nsum))
    return rgb, alpha, depth_exp, depth_med, normal, nsum, w, depth, n


@functools.lru_cache(maxsize=16)
def _pixel_centers(width: int, height: int) -> torch.Tensor:
    xs, ys = np.meshgrid(np.arange(width) + 0.5, np.arange(height) + 0.5)
    return torch.as_tensor(np.stack([xs, ys], -1).reshape(-1, 2), dtype=DTYPE)


def render_view(surfels: Surfels, camera: CameraView, background=(1.0, 1.0, 1.0), *,
                tile_size: int | None = 16, near: float = NEAR, cutoff: float = CUTOFF,
                screen_sigma: float = SCREEN_SIGMA, records: bool = True) -> RenderTargets:
    """Render RGB, depths, normals and alpha for one camera.

    ``tile_size=None`` disables binning and tests every surfel at every pixel.
    """
    H, W = camera.height, camera.width
    bg = torch.as_tensor(np.asarray(background, dtype=np.float64), dtype=DTYPE)
    dirs_all = torch.from_numpy(camera.pixel_directions().reshape(-1, 3).copy())
    pix_all = _pixel_centers(W, H)

    # one tile covering the image: footprints cannot cull anything the hit test keeps
    binned = tile_size is not None and tile_size < max(H, W)
    prep = _prepare(surfels, camera, near, cutoff, screen_sigma, binned) if len(surfels) else None

    ts = tile_size if binned else max(H, W)
    tiles = []
    for y0 in range(0, H, ts):
        for x0 in range(0, W, ts):
            y1, x1 = min(y0 + ts, H), min(x0 + ts, W)
            rows = np.arange(y0, y1)[:, None] * W + np.arange(x0, x1)[None, :]
            tiles.append((x0, x1, y0, y1, rows.reshape(-1)))

    outs = []
    pix_order = []
    for x0, x1, y0, y1, pid in tiles:
        pix_order.append(pid)
        cand = np.zeros(0, dtype=np.int64)
        if prep is not None:
            if not binned:
                mask = prep.in_front
            else:
                b = prep.bbox
                mask = (prep.in_front & (b[:, 0] <= x1 - 0.5) & (b[:, 1] >= x0 + 0.5)
                        & (b[:, 2] <= y1 - 0.5) & (b[:, 3] >= y0 + 0.5))
            cand = np.nonzero(mask)[0]
        P = len(pid)
        if len(cand) == 0:
            outs.append(None)
            continue
        pid_t = torch.as_tensor(pid)
        outs.append(_shade(dirs_all[pid_t], pix_all[pid_t], prep, torch.as_tensor(cand), bg,
                           near, cutoff, screen_sigma))

    kmax = max([o[6].shape[1] for o in outs if o is not None], default=1)
    cols = {k: [] for k in ("rgb", "alpha", "de", "dm", "n", "ns", "w", "z", "rn")}
    for (x0, x1, y0, y1, pid), o in zip(tiles, outs):
        P = len(pid)
        if o is None:
            cols["rgb"].append(bg.expand(P, 3))
            for k in ("alpha", "de", "dm"):
                cols[k].append(torch.zeros(P, dtype=DTYPE))
            cols["n"].append(torch.zeros(P, 3, dtype=DTYPE))
            cols["ns"].append(torch.zeros(P, 3, dtype=DTYPE))
            if records:
                cols["w"].append(torch.zeros(P, kmax, dtype=DTYPE))
                cols["z"].append(torch.zeros(P, kmax, dtype=DTYPE))
                cols["rn"].append(torch.zeros(P, kmax, 3, dtype=DTYPE))
            continue
        rgb, alpha, de, dm, nrm, ns, w, z, rn = o
        for k, val in zip(("rgb", "alpha", "de", "dm", "n", "ns"), (rgb, alpha, de, dm, nrm, ns)):
            cols[k].append(val)
        if records:
            pad = kmax - w.shape[1]
            cols["w"].append(torch.nn.functional.pad(w, (0, pad)))
            cols["z"].append(torch.nn.functional.pad(z, (0, pad)))
            cols["rn"].append(torch.nn.functional.pad(rn, (0, 0, 0, pad)))

    if len(tiles) == 1:
        def assemble(key, shape):
            return cols[key][0].reshape(shape)
    else:
        inverse = torch.as_tensor(np.argsort(np.concatenate(pix_order), kind="stable"))

        def assemble(key, shape):
            return torch.cat(cols[key])[inverse].reshape(shape)

    rec = None
    if records:
        rec = IntersectionRecords(assemble("w", (H, W, kmax)), assemble("z", (H, W, kmax)),
                                  assemble("rn", (H, W, kmax, 3)))
    return RenderTargets(
        rgb=assemble("rgb", (H, W, 3)),
        alpha=assemble("alpha", (H, W)),
        depth_expected=assemble("de", (H, W)),
        depth_median=assemble("dm", (H, W)),
        normal=assemble("n", (H, W, 3)),
        normal_sum=assemble("ns", (H, W, 3)),
        records=rec,
    )


# --------------------------------------------------------------------------- #
# brute-force oracle
# --------------------------------------------------------------------------- #


def render_reference(surfels: Surfels, camera: CameraView, background=(1.0, 1.0, 1.0), *,
                     near: float = NEAR, cutoff: float = CUTOFF,
                     screen_sigma: float = SCREEN_SIGMA) -> dict[str, np.ndarray]:
    """Slow per-pixel renderer in numpy: every surfel is tested at every pixel."""
    H, W = camera.height, camera.width
    out = {
        "rgb": np.zeros((H, W, 3)), "alpha": np.zeros((H, W)), "depth_expected": np.zeros((H, W)),
        "depth_median": np.zeros((H, W)), "normal": np.zeros((H, W, 3)),
    }
    R, t = camera.rotation, camera.translation
    n = len(surfels)
    with torch.no_grad():
        means = surfels.means.numpy()
        q = surfels.quats.numpy()
        q = q / np.linalg.norm(q, axis=1, keepdims=True)
        scales = np.exp(surfels.log_scales.numpy())
        opac = 1.0 / (1.0 + np.exp(-surfels.opacity_logits.numpy()))
        sh = surfels.sh.numpy()
    centers = means @ R.T + t
    frames = []
    for i in range(n):
        w_, x, y, z = q[i]
        rot = np.array([
            [1 - 2 * (y * y + z * z), 2 * (x * y - w_ * z), 2 * (x * z + w_ * y)],
            [2 * (x * y + w_ * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w_ * x)],
            [2 * (x * z - w_ * y), 2 * (y * z + w_ * x), 1 - 2 * (x * x + y * y)],
        ])
        fr = R @ rot
        tw = np.cross(fr[:, 0], fr[:, 1])
        if tw @ centers[i] > 0:
            tw = -tw
        frames.append((fr[:, 0], fr[:, 1], tw))
    view = means - camera.center
    view /= np.linalg.norm(view, axis=1, keepdims=True)
    colors = np.clip(eval_sh(sh, view, int(round(np.sqrt(sh.shape[1]))) - 1) + 0.5, 0, 1)

    dirs = camera.pixel_directions()
    front = [i for i in range(n) if centers[i, 2] > near]
    proj = {i: (camera.fx * centers[i, 0] / centers[i, 2] + camera.cx,
                camera.fy * centers[i, 1] / centers[i, 2] + camera.cy) for i in front}
    for py in range(H):
        for px in range(W):
            d = dirs[py, px]
            hits = []
            for i in front:
                cz = centers[i, 2]
                tu, tv, tw = frames[i]
                hit = ray_splat_intersect(d, centers[i], tu, tv, tw, scales[i], opac[i], i, near, cutoff)
                rho2 = ((px + 0.5 - proj[i][0]) ** 2 + (py + 0.5 - proj[i][1]) ** 2) / screen_sigma ** 2
                if hit is not None and hit.u ** 2 + hit.v ** 2 <= rho2:
                    rho, z = hit.u ** 2 + hit.v ** 2, hit.z
                elif rho2 <= cutoff * cutoff:
                    rho, z = rho2, cz
                else:
                    continue
                g = math.exp(-0.5 * rho)
                hits.append(Intersection(i, 0.0, 0.0, z, g, opac[i] * g, colors[i], tw))
            hits.sort(key=lambda h: h.z)
            res = composite_pixel(hits, background)
            out["rgb"][py, px] = res.color
            out["alpha"][py, px] = res.alpha
            out["depth_expected"][py, px] = res.depth_expected
            out["depth_median"][py, px] = res.depth_median
            out["normal"][py, px] = res.normal
    return out
