"""Texture objective: camera-distance weighting, Sobel complexity, score oracles."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional, Protocol, Sequence

import numpy as np
from scipy import ndimage

from .renderer import ContractError
from .scene import Camera, Config

SOBEL_X = np.array([[-1.0, 0.0, 1.0], [-2.0, 0.0, 2.0], [-1.0, 0.0, 1.0]]) / 4.0
SOBEL_Y = SOBEL_X.T


def gaussian_kernel(size: int, sigma: float) -> np.ndarray:
    ax = np.arange(size) - (size - 1) / 2.0
    g = np.exp(-0.5 * (ax / sigma) ** 2)
    k = np.outer(g, g)
    return k / k.sum()


def texture_complexity(image: np.ndarray, kernel_size: int = 5, sigma: float = 1.5) -> np.ndarray:
    """``1 + blur(|Sobel(gray)|)`` with replicate padding.

    The Sobel taps are scaled by 1/4 so a unit step produces a gradient
    magnitude of at most 1.
    """
    image = np.asarray(image, dtype=np.float64)
    if image.ndim == 3:
        if image.shape[2] not in (1, 3):
            raise ContractError("texture_complexity expects 1 or 3 channels")
        gray = image.mean(axis=2)
    else:
        gray = image
    gx = ndimage.correlate(gray, SOBEL_X, mode="nearest")
    gy = ndimage.correlate(gray, SOBEL_Y, mode="nearest")
    edge = np.hypot(gx, gy)
    smooth = ndimage.correlate(edge, gaussian_kernel(kernel_size, sigma), mode="nearest")
    return 1.0 + np.maximum(smooth, 0.0)


def camera_weight(sample_center, reference_cameras: Sequence[Camera]) -> np.ndarray:
    """Per-reference factors ``1 - d_k`` with distances normalized to sum to one."""
    if len(reference_cameras) == 0:
        raise ContractError("need at least one reference camera")
    c = np.asarray(sample_center, dtype=np.float64)
    dist = np.array([np.linalg.norm(c - cam.center) for cam in reference_cameras])
    total = dist.sum()
    n = len(reference_cameras)
    if total <= 0:
        return np.full(n, (n - 1) / n)
    return 1.0 - dist / total


class ScoreOracle(Protocol):
    """Source of per-pixel distillation gradients.

    ``score`` receives the image rendered at ``pose``, the conditioning
    reference image (view ``view_index``), a timestep in (0, 1) and a seed,
    and returns a gradient with the rendered image's shape.
    """

    def score(self, rendered: np.ndarray, reference: np.ndarray, t: float, pose: Camera,
              seed: int, view_index: int) -> np.ndarray: ...


def timestep_weight(t: float) -> float:
    return 1.0 - t


def resize_image(image: np.ndarray, height: int, width: int) -> np.ndarray:
    if image.shape[:2] == (height, width):
        return image
    zoom = (height / image.shape[0], width / image.shape[1]) + (1,) * (image.ndim - 2)
    return ndimage.zoom(image, zoom, order=1, mode="nearest", grid_mode=True)


class ResidualOracle:
    """``w(t) * (rendered - reference)``: the distillation gradient of a denoiser
    whose prediction error is exactly the pixel residual.
    """

    def score(self, rendered, reference, t, pose=None, seed=0, view_index=0):
        return timestep_weight(t) * (rendered - reference)


def sds_gradient(oracle: ScoreOracle, rendered: np.ndarray, reference: np.ndarray, t: float,
                 seed: int = 0, pose: Optional[Camera] = None, view_index: int = 0) -> np.ndarray:
    rendered = np.asarray(rendered, dtype=np.float64)
    reference = np.asarray(reference, dtype=np.float64)
    if rendered.shape != reference.shape:
        raise ContractError(f"rendered {rendered.shape} and reference {reference.shape} differ")
    grad = np.asarray(oracle.score(rendered, reference, t, pose, seed, view_index), dtype=np.float64)
    if grad.shape != rendered.shape:
        raise ContractError(f"oracle returned {grad.shape}, expected {rendered.shape}")
    return grad


@dataclass
class TextureTerms:
    adjoints: np.ndarray     # (K+1, H, W, 3) per-reference image adjoints
    factors: np.ndarray      # (K+1,)
    complexity: np.ndarray   # (H, W)
    magnitudes: np.ndarray   # (K+1,) mean |adjoint|
    losses: np.ndarray = None     # (K+1,) scalar-equivalent losses
    curvature: np.ndarray = None  # (K+1, H, W) per-pixel weight lambda_t * f_k * W^c * w(t)

    def combined(self, weights: Optional[np.ndarray] = None) -> np.ndarray:
        if weights is None:
            return self.adjoints.sum(axis=0)
        return np.tensordot(weights, self.adjoints, axes=1)


def texture_loss(rendered: np.ndarray, pose: Camera, references: Sequence[np.ndarray],
                 reference_cameras: Sequence[Camera], oracle: ScoreOracle, config: Config, t: float,
                 seed: int = 0, use_tao: bool = True) -> TextureTerms:
    """Per-reference image adjoints of the texture objective for one sampled pose.

    ``references`` must already match the render resolution (see
    ``resize_image``).

    Summand k is ``lambda_t * (1 - d(c, c_k)) * W^c * sds_gradient(I', I_k)``;
    the complexity map ``W^c`` comes from the current render and is held
    constant. With ``use_tao=False`` factors and ``W^c`` are all ones.
    """
    if len(references) == 0:
        raise ContractError("texture loss needs at least one reference view")
    if len(references) != len(reference_cameras):
        raise ContractError("one camera per reference image required")
    rendered = np.asarray(rendered, dtype=np.float64)
    H, W = rendered.shape[:2]
    if use_tao:
        factors = camera_weight(pose.center, reference_cameras)
        complexity = texture_complexity(rendered, config.sobel_kernel, config.sobel_sigma)
    else:
        factors = np.ones(len(references))
        complexity = np.ones((H, W))
    n = len(references)
    adjoints = np.empty((n, H, W, 3))
    losses = np.zeros(n)
    wt = timestep_weight(t)
    for k, ref in enumerate(references):
        g = sds_gradient(oracle, rendered, ref, t, seed=seed * 1009 + k, pose=pose, view_index=k)
        adjoints[k] = (config.lambda_t * factors[k]) * complexity[..., None] * g
        # the quadratic whose gradient is this adjoint when the score is w(t) times a residual
        if wt > 0:
            losses[k] = 0.5 * float(np.sum(adjoints[k] * g)) / wt
    mags = np.abs(adjoints).reshape(n, -1).mean(axis=1)
    curv = (config.lambda_t * wt) * factors[:, None, None] * complexity[None]
    return TextureTerms(adjoints=adjoints, factors=factors, complexity=complexity, magnitudes=mags,
                        losses=losses, curvature=curv)
