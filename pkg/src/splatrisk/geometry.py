"""Cross-view warping, visibility and discrepancy maps, and the geometry loss."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .renderer import ContractError, RenderAdjoint, RenderOutput
from .scene import Camera, ConfigError, Config


@dataclass
class WarpResult:
    warped: np.ndarray  # source values resampled into the destination view
    valid: np.ndarray   # (H, W) {0, 1}
    depth: np.ndarray   # (H, W) destination-camera depth of the winning sample, 0 where invalid


def warp(source: np.ndarray, source_depth: np.ndarray, cam_src: Camera, cam_dst: Camera) -> WarpResult:
    """Forward-splat ``source`` into ``cam_dst`` using metric ``source_depth``.

    Every source pixel with positive depth is lifted to 3D and dropped on the
    nearest destination pixel. Collisions keep the sample nearest to the
    destination camera, ties going to the lower source pixel index.
    """
    source = np.asarray(source, dtype=np.float64)
    source_depth = np.asarray(source_depth, dtype=np.float64)
    if source.shape[:2] != source_depth.shape:
        raise ContractError("source image and depth differ in resolution")
    H, W = cam_dst.height, cam_dst.width
    chans = source.shape[2:]
    warped = np.zeros((H, W) + chans)
    valid = np.zeros((H, W))
    zbuf = np.zeros((H, W))

    src_idx = np.flatnonzero(source_depth.ravel() > 0)
    if src_idx.size == 0:
        return WarpResult(warped, valid, zbuf)
    sh, sw = source_depth.shape
    vv, uu = np.divmod(src_idx, sw)
    uv = np.stack([uu + 0.5, vv + 0.5], axis=1)
    pts = cam_src.unproject(uv, source_depth.ravel()[src_idx])
    uv_dst, z_dst = cam_dst.project(pts)
    with np.errstate(invalid="ignore"):
        px = np.floor(uv_dst[:, 0])
        py = np.floor(uv_dst[:, 1])
        ok = (z_dst > 0) & (px >= 0) & (px < W) & (py >= 0) & (py < H)
    if not np.any(ok):
        return WarpResult(warped, valid, zbuf)
    px, py, z, src_idx = px[ok].astype(np.int64), py[ok].astype(np.int64), z_dst[ok], src_idx[ok]
    dst = py * W + px
    order = np.lexsort((src_idx, z, dst))
    first = order[np.unique(dst[order], return_index=True)[1]]
    flat_vals = source.reshape((sh * sw,) + chans)
    warped.reshape((H * W,) + chans)[dst[first]] = flat_vals[src_idx[first]]
    valid.ravel()[dst[first]] = 1.0
    zbuf.ravel()[dst[first]] = z[first]
    return WarpResult(warped, valid, zbuf)


def visibility(warped_depth: WarpResult, target_depth: np.ndarray, target_mask: np.ndarray,
               tau: float, mode: str = "textual") -> np.ndarray:
    """Soft visibility of each target pixel given depth warped from its neighbour view.

    ``textual``: 1 where the warped point sits at or in front of the target
    surface, fading to 0 once it is ``tau`` behind. ``literal``: the printed
    ``max(0, M * (D_warp - D))`` form, scaled by ``tau`` and clamped. Pixels
    without a warped sample get 0 in both modes.
    """
    if mode not in ("textual", "literal"):
        raise ConfigError(f"unknown visibility mode {mode!r}")
    if not tau > 0:
        raise ConfigError("tau must be positive")
    target_depth = np.asarray(target_depth, dtype=np.float64)
    target_mask = np.asarray(target_mask, dtype=np.float64)
    if not (warped_depth.depth.shape == target_depth.shape == target_mask.shape):
        raise ContractError("visibility inputs differ in resolution")
    gap = warped_depth.depth - target_depth
    if mode == "textual":
        vis = target_mask * np.clip(1.0 - np.maximum(gap, 0.0) / tau, 0.0, 1.0)
    else:
        vis = np.clip(np.maximum(0.0, target_mask * gap) / tau, 0.0, 1.0)
    return vis * warped_depth.valid


def discrepancy_weight(warped_color: WarpResult, target_color: np.ndarray, s: float = 4.0) -> np.ndarray:
    """``1 - |warped - target|^s`` per pixel, channel-averaged; 1 where nothing was warped."""
    target_color = np.asarray(target_color, dtype=np.float64)
    diff = np.abs(warped_color.warped - target_color)
    if diff.ndim == 3:
        diff = diff.mean(axis=2)
    w = np.clip(1.0 - diff**s, 0.0, 1.0)
    return np.where(warped_color.valid > 0, w, 1.0)


@dataclass
class GeometryTargets:
    """Per-view supervision for the geometry term."""

    image: np.ndarray                        # (H, W, 3)
    depth: Optional[np.ndarray] = None       # (H, W) metric, alpha-weighted with far fill
    mask: Optional[np.ndarray] = None        # (H, W) {0, 1}
    visibility: Optional[np.ndarray] = None  # (H, W)
    discrepancy: Optional[np.ndarray] = None  # (H, W)
    near: float = 0.2
    far: float = 4.0


@dataclass
class GeometryLoss:
    total: float
    terms: dict = field(default_factory=dict)
    adjoint: RenderAdjoint = None
    curvature: RenderAdjoint = None  # per-pixel second derivative of the loss w.r.t. each output


def normalize_depth(depth: np.ndarray, near: float, far: float) -> np.ndarray:
    return (depth - near) / (far - near)


def geometry_loss(render: RenderOutput, view: GeometryTargets, config: Config, use_gao: bool = True) -> GeometryLoss:
    """Weighted photometric, depth and mask loss for one view.

    Sums run over all pixels and are divided by the target mask's pixel count.
    With ``use_gao=False`` only the plain photometric term remains.
    """
    img = np.asarray(view.image, dtype=np.float64)
    H, W = img.shape[:2]
    if render.color.shape != img.shape:
        raise ContractError(f"render {render.color.shape} and target {img.shape} differ")
    mask = np.ones((H, W)) if view.mask is None else np.asarray(view.mask, dtype=np.float64)
    for name in ("depth", "mask", "visibility", "discrepancy"):
        arr = getattr(view, name)
        if arr is not None and np.shape(arr) != (H, W):
            raise ContractError(f"{name} map has shape {np.shape(arr)}, expected {(H, W)}")
    count = max(float(mask.sum()), 1.0)

    diff = render.color - img
    sq = np.sum(diff * diff, axis=2)
    if use_gao:
        vis = np.ones((H, W)) if view.visibility is None else view.visibility
        disc = np.ones((H, W)) if view.discrepancy is None else view.discrepancy
        weight = vis * disc + (1.0 - vis)
    else:
        weight = np.ones((H, W))
    l_v = float(np.sum(weight * sq)) / count
    g_color = (config.lambda_v * 2.0 / count) * weight[..., None] * diff
    c_color = np.broadcast_to((config.lambda_v * 2.0 / count) * weight[..., None], diff.shape)
    terms = {"v": l_v, "d": 0.0, "m": 0.0}
    total = config.lambda_v * l_v
    g_depth = c_depth = None
    g_alpha = c_alpha = None
    if use_gao and view.depth is not None:
        span = view.far - view.near
        dd = normalize_depth(render.depth, view.near, view.far) - normalize_depth(view.depth, view.near, view.far)
        terms["d"] = float(np.sum(dd * dd)) / count
        total += config.lambda_d * terms["d"]
        g_depth = (config.lambda_d * 2.0 / (count * span)) * dd
        c_depth = np.full((H, W), config.lambda_d * 2.0 / (count * span * span))
    if use_gao and view.mask is not None:
        dm = render.alpha - mask
        terms["m"] = float(np.sum(dm * dm)) / count
        total += config.lambda_m * terms["m"]
        g_alpha = (config.lambda_m * 2.0 / count) * dm
        c_alpha = np.full((H, W), config.lambda_m * 2.0 / count)
    return GeometryLoss(total=float(total), terms=terms, adjoint=RenderAdjoint(g_color, g_depth, g_alpha),
                        curvature=RenderAdjoint(c_color, c_depth, c_alpha))
