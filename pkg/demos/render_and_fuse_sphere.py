"""
Render a surfel sphere and fuse it back into a mesh.

A sphere of 3000 opaque surfels (each disc tangent to the sphere) is rendered
from 18 ring cameras. One view is written out as RGB, median depth and normals;
all views are then fused into a TSDF volume and meshed with marching cubes.

The mesh is compared against the analytic radius, so this is a quick
end-to-end check of renderer and fusion without any training.

Usage:
    python3 demos/render_and_fuse_sphere.py [out_dir]
"""

# %%
import sys
from pathlib import Path

import numpy as np
import torch

from d2dgs.data import write_fmap, write_image
from d2dgs.meshing import MeshingConfig, extract_mesh_at
from d2dgs.render import render_view
from d2dgs.synthetic import ring_cameras, sphere_surfels, static_scene

OUT = Path(sys.argv[1] if len(sys.argv) > 1 else "demo_sphere")
OUT.mkdir(parents=True, exist_ok=True)
RADIUS = 0.5

# %% scene and cameras
surfels = sphere_surfels(3000, RADIUS)
scene = static_scene(surfels)
# two rings so the poles are seen from above and below
cameras = ring_cameras(12, 2.0, 25.0, 64, 0.8) + ring_cameras(6, 2.0, -35.0, 64, 0.8, azimuth_offset=0.4)
print(f"{len(surfels)} surfels, {len(cameras)} cameras")

# %% one view
with torch.no_grad():
    view = render_view(scene.at_time(0.0), cameras[0], records=False).numpy()
write_image(OUT / "rgb.png", view["rgb"])
write_fmap(OUT / "depth.fmap", view["depth_median"])
write_image(OUT / "normal.png", 0.5 * (view["normal"] + 1.0) * (view["alpha"][..., None] > 0.5))
hit = view["alpha"] > 0.5
print(f"view 0: {hit.mean():.1%} of pixels covered, median depth {view['depth_median'][hit].min():.3f}"
      f" to {view['depth_median'][hit].max():.3f}")

# %% fusion
mesh = extract_mesh_at(0.0, scene, cameras, MeshingConfig(resolution=64))
mesh.write_obj(OUT / "sphere.obj")
r = np.linalg.norm(mesh.vertices, axis=1)
print(f"mesh: {len(mesh.vertices)} vertices, {len(mesh.faces)} faces, "
      f"{len(mesh.boundary_edges())} boundary edges")
print(f"radius {r.mean():.4f} (true {RADIUS}), mean |error| {np.abs(r - RADIUS).mean():.4f}")
print(f"wrote {OUT}/rgb.png, depth.fmap, normal.png, sphere.obj")
