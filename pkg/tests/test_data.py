import json
import math

import numpy as np
import pytest

from d2dgs.data import (load_nerf_synthetic, random_init_points, read_fmap, read_image, write_fmap, write_image,
                        write_nerf_synthetic)
from d2dgs.scene import CameraView


def minimal_dataset(root, angle=0.8, frames=None, size=(8, 6)):
    root.mkdir(parents=True, exist_ok=True)
    (root / "train").mkdir(exist_ok=True)
    write_image(root / "train" / "r_0.png", np.full((size[1], size[0], 3), 0.5))
    if frames is None:
        frames = [{"file_path": "./train/r_0", "time": 0.0, "transform_matrix": np.eye(4).tolist()}]
    (root / "transforms_train.json").write_text(json.dumps({"camera_angle_x": angle, "frames": frames}))
    return root


def test_minimal_identity_frame(tmp_path):
    ds = load_nerf_synthetic(minimal_dataset(tmp_path / "d"))
    assert len(ds) == 1 and ds.timestamps() == [0.0]
    cam = ds.camera(0)
    assert (cam.width, cam.height) == (8, 6)
    # identity camera-to-world in OpenGL axes: looks down -z with y up
    np.testing.assert_allclose(cam.rotation, np.diag([1.0, -1.0, -1.0]))
    np.testing.assert_allclose(cam.center, 0.0, atol=1e-15)
    assert ds.image(0).shape == (6, 8, 3)


def test_focal_from_field_of_view(tmp_path):
    root = tmp_path / "d"
    minimal_dataset(root, angle=math.pi / 2, size=(800, 4))
    cam = load_nerf_synthetic(root).camera(0)
    assert cam.fx == pytest.approx(400.0) and cam.fy == pytest.approx(400.0)
    assert (cam.cx, cam.cy) == (400.0, 2.0)


def test_times_are_clamped(tmp_path):
    fr = [{"file_path": "./train/r_0", "time": t, "transform_matrix": np.eye(4).tolist()} for t in (-0.5, 1.5)]
    ds = load_nerf_synthetic(minimal_dataset(tmp_path / "d", frames=fr))
    assert ds.times().tolist() == [0.0, 1.0]


def test_loader_errors(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_nerf_synthetic(tmp_path / "nope")
    root = minimal_dataset(tmp_path / "d")
    with pytest.raises(FileNotFoundError):
        load_nerf_synthetic(root, "test")
    (root / "transforms_train.json").write_text('{"camera_angle_x": 0.5,\n "frames": [,]}')
    with pytest.raises(ValueError, match=r"transforms_train.json:2"):
        load_nerf_synthetic(root)
    minimal_dataset(root, frames=[{"file_path": "./train/r_0", "transform_matrix": np.eye(4).tolist()}])
    with pytest.raises(ValueError, match="not a dynamic dataset"):
        load_nerf_synthetic(root)


def test_rgba_composited_over_background(tmp_path):
    from PIL import Image
    rgba = np.zeros((2, 2, 4), dtype=np.uint8)
    rgba[0, 0] = [255, 0, 0, 255]
    Image.fromarray(rgba).save(tmp_path / "a.png")
    img = read_image(tmp_path / "a.png", background=(0.0, 0.0, 1.0))
    np.testing.assert_allclose(img[0, 0], [1, 0, 0])
    np.testing.assert_allclose(img[1, 1], [0, 0, 1])


def test_write_then_load_preserves_poses(tmp_path):
    cams = [CameraView.look_at([2 * math.cos(a), 2 * math.sin(a), 0.7], [0, 0, 0], width=10, height=10,
                               fov_x=0.8, time=t) for a, t in zip((0.1, 1.7, 4.0), (0.0, 0.25, 1.0))]
    write_nerf_synthetic(tmp_path, "train", cams, [np.full((10, 10, 3), 0.3)] * 3, ([-1] * 3, [1] * 3))
    ds = load_nerf_synthetic(tmp_path)
    for a, b in zip(cams, ds.cameras()):
        assert np.abs(a.rotation - b.rotation).max() < 1e-9
        assert np.abs(a.translation - b.translation).max() < 1e-9
        assert a.time == b.time and a.fx == pytest.approx(b.fx, abs=1e-9)
    np.testing.assert_array_equal(ds.bounds[0], [-1, -1, -1])


def test_fmap_roundtrip(tmp_path):
    rng = np.random.default_rng(0)
    depth = rng.uniform(size=(5, 7)).astype(np.float32)
    write_fmap(tmp_path / "d.fmap", depth)
    raw = (tmp_path / "d.fmap").read_bytes()
    assert np.frombuffer(raw[:8], "<u4").tolist() == [7, 5] and len(raw) == 8 + 4 * 35
    np.testing.assert_array_equal(read_fmap(tmp_path / "d.fmap"), depth)
    normal = rng.normal(size=(4, 3, 3)).astype(np.float32)
    write_fmap(tmp_path / "n.fmap", normal)
    np.testing.assert_array_equal(read_fmap(tmp_path / "n.fmap"), normal)
    (tmp_path / "bad.fmap").write_bytes(raw[:-3])
    with pytest.raises(ValueError):
        read_fmap(tmp_path / "bad.fmap")


def test_png_roundtrip_is_8bit(tmp_path):
    img = np.random.default_rng(1).uniform(size=(4, 4, 3))
    write_image(tmp_path / "x.png", img)
    assert np.abs(read_image(tmp_path / "x.png") - img).max() <= 0.5 / 255 + 1e-12


def test_random_init_points_in_bounds():
    pts, cols = random_init_points(500, (np.zeros(3), np.ones(3)), seed=3)
    assert pts.shape == (500, 3) and (pts >= 0).all() and (pts <= 1).all()
    assert (cols >= 0).all() and (cols <= 1).all()
    np.testing.assert_array_equal(pts, random_init_points(500, (np.zeros(3), np.ones(3)), seed=3)[0])
