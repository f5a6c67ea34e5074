import math

import numpy as np
import pytest
import torch

from d2dgs.deformation import DeformationField, DynamicScene
from d2dgs.render import render_view
from d2dgs.scene import CameraView, ControlPoints, Surfels


class ImageSet:
    """In-memory dataset: a list of cameras and matching images."""

    def __init__(self, cameras, images, background=(1.0, 1.0, 1.0)):
        self.cameras_ = list(cameras)
        self.images = [np.asarray(i) for i in images]
        self.background = background

    def __len__(self):
        return len(self.cameras_)

    def camera(self, i):
        return self.cameras_[i]

    def image(self, i):
        return self.images[i]


def small_scene(n=5, seed=0, controls=2, neighbors=2, spread=0.3):
    rng = np.random.default_rng(seed)
    torch.manual_seed(seed)
    surfels = Surfels.create(
        rng.uniform(-spread, spread, size=(n, 3)),
        quats=rng.normal(size=(n, 4)),
        scales=rng.uniform(0.1, 0.25, size=(n, 2)),
        opacities=rng.uniform(0.3, 0.9, size=n),
        colors=rng.uniform(size=(n, 3)),
    )
    ctrl = ControlPoints(torch.as_tensor(rng.uniform(-spread, spread, size=(controls, 3))),
                         torch.full((controls,), math.log(0.3), dtype=torch.float64))
    return DynamicScene(surfels, ctrl, DeformationField(width=8, depth=1), neighbors)


def ring(n, size=16, distance=2.5, time=0.0):
    cams = []
    for k in range(n):
        a = 2 * math.pi * k / n
        eye = [distance * math.cos(a), distance * math.sin(a), 0.8]
        cams.append(CameraView.look_at(eye, [0.0, 0.0, 0.0], width=size, height=size, fov_x=0.9, time=time))
    return cams


@pytest.fixture
def tiny_dataset():
    truth = small_scene(seed=11)
    cams = ring(3)
    with torch.no_grad():
        imgs = [render_view(truth.at_time(0.0), c).rgb.numpy() for c in cams]
    return ImageSet(cams, imgs)


def fibonacci_points(n, radius):
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5 ** 0.5) * i
    return radius * np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], 1)


def sphere_depth(cam, center, radius):
    """Exact camera-z depth of a sphere along every pixel ray (0 on a miss)."""
    d = cam.pixel_directions().reshape(-1, 3)
    o = cam.rotation @ np.asarray(center, dtype=np.float64) + cam.translation
    a, b, c = (d * d).sum(1), d @ o, o @ o - radius * radius
    disc = b * b - a * c
    t = (b - np.sqrt(np.maximum(disc, 0.0))) / a
    return np.where(disc > 0, t, 0.0).reshape(cam.height, cam.width)


def sphere_cameras(n=20, distance=1.5, size=128, fov=0.8):
    return [CameraView.look_at(e, [0, 0, 0], up=(0, 0, 1) if abs(e[2]) < 0.9 * distance else (0, 1, 0),
                               width=size, height=size, fov_x=fov)
            for e in fibonacci_points(n, distance)]
