import numpy as np
import pytest
import torch

from conftest import ring, small_scene
from d2dgs.checkpoint import load_checkpoint, save_checkpoint
from d2dgs.render import render_view


def test_roundtrip_renders_identically(tmp_path):
    scene = small_scene(seed=4)
    with torch.no_grad():
        for p in scene.field.parameters():
            p.normal_(0.0, 0.1)
    cams = ring(2, time=0.3)
    save_checkpoint(tmp_path / "c.npz", scene, cams, (0.2, 0.3, 0.4), {"seed": 4}, 17)
    ck = load_checkpoint(tmp_path / "c.npz")
    assert ck.iteration == 17 and ck.config == {"seed": 4} and ck.background == (0.2, 0.3, 0.4)
    for a, b in zip(cams, ck.cameras):
        np.testing.assert_array_equal(a.rotation, b.rotation)
        assert (a.width, a.fx, a.time) == (b.width, b.fx, b.time)
    torch.testing.assert_close(ck.scene.binding.indices, scene.binding.indices, rtol=0, atol=0)
    with torch.no_grad():
        for t in (0.0, 0.6):
            a = render_view(scene.at_time(t), cams[0], records=False).rgb
            b = render_view(ck.scene.at_time(t), cams[0], records=False).rgb
            assert torch.equal(a, b)


def test_foreign_files_rejected(tmp_path):
    with pytest.raises(FileNotFoundError):
        load_checkpoint(tmp_path / "missing.npz")
    (tmp_path / "junk.npz").write_bytes(b"not an archive")
    with pytest.raises(ValueError, match="not a D2DGS checkpoint"):
        load_checkpoint(tmp_path / "junk.npz")
    np.savez(tmp_path / "other.npz", meta=np.array('{"magic": "x"}'))
    with pytest.raises(ValueError, match="not a D2DGS checkpoint"):
        load_checkpoint(tmp_path / "other.npz")
