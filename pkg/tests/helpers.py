"""Shared builders for the test suite."""

import numpy as np

from splatrisk.renderer import RenderAdjoint, render
from splatrisk.scene import GaussianCloud, camera_from_orbit


def random_cloud(rng, n, spread=0.3):
    return GaussianCloud(
        positions=rng.uniform(-spread, spread, (n, 3)),
        log_scales=np.log(rng.uniform(0.03, 0.12, (n, 3))),
        rotations=rng.normal(size=(n, 4)),
        opacity_logits=rng.uniform(-1.5, 1.5, (n, 1)),
        colors=rng.uniform(0.05, 0.95, (n, 3)),
    )


def single(position=(0.0, 0.0, 0.0), scale=0.05, opacity_logit=0.0, color=(1.0, 0.0, 0.0)):
    return GaussianCloud(
        positions=np.array([position], dtype=float),
        log_scales=np.full((1, 3), np.log(scale)),
        rotations=np.array([[1.0, 0.0, 0.0, 0.0]]),
        opacity_logits=np.array([[opacity_logit]]),
        colors=np.array([color], dtype=float),
    )


def linear_loss(cloud, cam, adj, background=(0.2, 0.3, 0.4)):
    """``sum(adj * outputs)`` of the smooth (exact) render."""
    out = render(cloud, cam, background, exact=True)
    return float(np.sum(adj.color * out.color) + np.sum(adj.depth * out.depth) + np.sum(adj.alpha * out.alpha))


def finite_difference(cloud, cam, adj, field, h=1e-4, background=(0.2, 0.3, 0.4)):
    arr = getattr(cloud, field)
    fd = np.zeros_like(arr)
    for idx in np.ndindex(arr.shape):
        old = arr[idx]
        arr[idx] = old + h
        lp = linear_loss(cloud, cam, adj, background)
        arr[idx] = old - h
        lm = linear_loss(cloud, cam, adj, background)
        arr[idx] = old
        fd[idx] = (lp - lm) / (2 * h)
    return fd


def random_adjoint(rng, size):
    return RenderAdjoint(rng.normal(size=(size, size, 3)), rng.normal(size=(size, size)),
                         rng.normal(size=(size, size)))


def orbit(az=0.0, el=0.0, size=16, radius=2.0, fov=49.1):
    return camera_from_orbit(az, el, radius, fov, size, size)
