"""Differentiable software rasterizer for Gaussian clouds.

Forward: EWA projection of every Gaussian, tile binning, and per-pixel
front-to-back alpha compositing of color, depth and accumulated opacity.
Backward: exact gradients of the three composited images w.r.t. every raw
cloud parameter.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import _raster
from .scene import Camera, GaussianCloud, activate

COV_FLOOR = 0.3
OPACITY_CLAMP = 0.999
ALPHA_MIN = 1.0 / 255.0
T_MIN = 1e-4


class ContractError(ValueError):
    """Raised when inputs violate an operation's shape contract."""


def quat_to_rotmat(q: np.ndarray) -> np.ndarray:
    """Unit quaternions (w, x, y, z), shape (N, 4) -> rotation matrices (N, 3, 3)."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    return np.stack(
        [
            np.stack([1 - 2 * (y * y + z * z), 2 * (x * y - w * z), 2 * (x * z + w * y)], -1),
            np.stack([2 * (x * y + w * z), 1 - 2 * (x * x + z * z), 2 * (y * z - w * x)], -1),
            np.stack([2 * (x * z - w * y), 2 * (y * z + w * x), 1 - 2 * (x * x + y * y)], -1),
        ],
        axis=1,
    )


def _rotmat_vjp(q: np.ndarray, g_R: np.ndarray) -> np.ndarray:
    """Pull a gradient on R(q) back to the (unit) quaternion."""
    w, x, y, z = q[:, 0], q[:, 1], q[:, 2], q[:, 3]
    g = g_R
    gw = 2 * (-z * g[:, 0, 1] + y * g[:, 0, 2] + z * g[:, 1, 0] - x * g[:, 1, 2] - y * g[:, 2, 0] + x * g[:, 2, 1])
    gx = 2 * (y * g[:, 0, 1] + z * g[:, 0, 2] + y * g[:, 1, 0] - 2 * x * g[:, 1, 1] - w * g[:, 1, 2]
              + z * g[:, 2, 0] + w * g[:, 2, 1] - 2 * x * g[:, 2, 2])
    gy = 2 * (-2 * y * g[:, 0, 0] + x * g[:, 0, 1] + w * g[:, 0, 2] + x * g[:, 1, 0] + z * g[:, 1, 2]
              - w * g[:, 2, 0] + z * g[:, 2, 1] - 2 * y * g[:, 2, 2])
    gz = 2 * (-2 * z * g[:, 0, 0] - w * g[:, 0, 1] + x * g[:, 0, 2] + w * g[:, 1, 0] - 2 * z * g[:, 1, 1]
              + y * g[:, 1, 2] + x * g[:, 2, 0] + y * g[:, 2, 1])
    return np.stack([gw, gx, gy, gz], axis=1)


@dataclass
class Splat2D:
    mean2d: np.ndarray
    cov2d: np.ndarray
    depth: float
    color: np.ndarray
    base_opacity: float
    culled: bool


@dataclass
class Projection:
    """Screen-space splats in struct-of-arrays form, plus backward caches."""

    means2d: np.ndarray   # (N, 2) pixels
    cov2d: np.ndarray     # (N, 2, 2)
    conics: np.ndarray    # (N, 3) inverse covariance entries (a, b, c)
    depths: np.ndarray    # (N,) camera z
    colors: np.ndarray    # (N, 3)
    opacities: np.ndarray  # (N,)
    radii: np.ndarray     # (N,) pixels, cutoff extent along the major axis
    extent: np.ndarray    # (N, 2) pixels, axis-aligned half extents of the cutoff ellipse
    culled: np.ndarray    # (N,) bool
    # caches for the backward pass
    t_cam: np.ndarray
    J: np.ndarray
    sigma3d: np.ndarray
    R: np.ndarray
    scales: np.ndarray
    quats: np.ndarray
    quat_norms: np.ndarray

    def __len__(self):
        return self.means2d.shape[0]

    def splat(self, i: int) -> Splat2D:
        return Splat2D(self.means2d[i], self.cov2d[i], float(self.depths[i]), self.colors[i],
                       float(self.opacities[i]), bool(self.culled[i]))

    def splats(self) -> list:
        return [self.splat(i) for i in range(len(self))]


def project(cloud: GaussianCloud, camera: Camera, cutoff: Optional[float] = 3.0) -> Projection:
    """EWA-project every Gaussian into ``camera``.

    ``cutoff`` is the splat extent in standard deviations used for culling and
    tile binning; ``None`` means unbounded (every splat touches every pixel).
    """
    act = activate(cloud)
    n = len(act)
    Wr = camera.rotation
    f = camera.focal
    cx, cy = camera.principal_point

    t = act.positions @ Wr.T + camera.translation
    tz = t[:, 2]
    safe_z = np.where(np.abs(tz) < 1e-9, 1e-9, tz)
    means = np.stack([f * t[:, 0] / safe_z + cx, f * t[:, 1] / safe_z + cy], axis=1)

    J = np.zeros((n, 2, 3))
    J[:, 0, 0] = f / safe_z
    J[:, 0, 2] = -f * t[:, 0] / safe_z**2
    J[:, 1, 1] = f / safe_z
    J[:, 1, 2] = -f * t[:, 1] / safe_z**2

    R = quat_to_rotmat(act.rotations)
    M = R * act.scales[:, None, :]
    sigma = M @ M.transpose(0, 2, 1)
    T = J @ Wr
    cov = T @ sigma @ T.transpose(0, 2, 1)
    cov[:, 0, 0] += COV_FLOOR
    cov[:, 1, 1] += COV_FLOOR
    a, b, c = cov[:, 0, 0], cov[:, 0, 1], cov[:, 1, 1]
    det = a * c - b * b
    conics = np.stack([c / det, -b / det, a / det], axis=1)

    mid = 0.5 * (a + c)
    lam_max = mid + np.sqrt(np.maximum(mid * mid - det, 0.0))
    culled = tz <= camera.near
    if cutoff is None:
        radii = np.full(n, np.inf)
        extent = np.full((n, 2), np.inf)
    else:
        # beyond this extent alpha drops under ALPHA_MIN, so the footprint can shrink
        reach = np.sqrt(2.0 * np.log(np.maximum(255.0 * np.minimum(act.opacities, OPACITY_CLAMP), 1.0)))
        k = np.minimum(cutoff, reach)
        radii = k * np.sqrt(lam_max)
        # axis-aligned half extents of the k-sigma ellipse
        extent = np.stack([k * np.sqrt(a), k * np.sqrt(c)], axis=1)
        outside = (
            (means[:, 0] + extent[:, 0] <= 0) | (means[:, 0] - extent[:, 0] >= camera.width)
            | (means[:, 1] + extent[:, 1] <= 0) | (means[:, 1] - extent[:, 1] >= camera.height)
        )
        culled = culled | outside
    culled = culled | ~np.isfinite(means).all(axis=1)

    return Projection(
        means2d=means, cov2d=cov, conics=conics, depths=tz, colors=act.colors,
        opacities=act.opacities, radii=radii, extent=extent, culled=culled,
        t_cam=t, J=J, sigma3d=sigma, R=R, scales=act.scales, quats=act.rotations,
        quat_norms=np.linalg.norm(cloud.rotations, axis=1),
    )


@dataclass
class RenderOutput:
    color: np.ndarray          # (H, W, 3)
    depth: np.ndarray          # (H, W), alpha-weighted depth, background at far
    alpha: np.ndarray          # (H, W)
    transmittance: np.ndarray  # (H, W)
    far: float = 4.0

    @property
    def surface_depth(self) -> np.ndarray:
        """Expected depth of the hit surface, with the far-plane fill removed."""
        with np.errstate(divide="ignore", invalid="ignore"):
            return np.where(self.alpha > 1e-6, (self.depth - self.far * self.transmittance) / self.alpha, 0.0)


@dataclass
class RenderContext:
    projection: Projection
    offsets: np.ndarray
    lists: np.ndarray
    tiles_x: int
    stop: np.ndarray
    alpha_min: float
    min_power: np.ndarray
    output: RenderOutput


def _rasterize_setup(proj: Projection, camera: Camera, exact: bool):
    W, H = camera.width, camera.height
    tiles_x = (W + _raster.TILE - 1) // _raster.TILE
    tiles_y = (H + _raster.TILE - 1) // _raster.TILE
    idx = np.arange(len(proj))
    keep = idx[~proj.culled]
    # depth sort, ties broken by index
    order = keep[np.lexsort((keep, proj.depths[keep]))]
    rect = np.zeros((len(proj), 4), np.int64)
    if exact:
        rect[:, 2] = tiles_x
        rect[:, 3] = tiles_y
    else:
        m, e = proj.means2d, proj.extent
        with np.errstate(invalid="ignore"):
            x0 = np.floor((m[:, 0] - e[:, 0]) / _raster.TILE)
            x1 = np.floor((m[:, 0] + e[:, 0]) / _raster.TILE) + 1
            y0 = np.floor((m[:, 1] - e[:, 1]) / _raster.TILE)
            y1 = np.floor((m[:, 1] + e[:, 1]) / _raster.TILE) + 1
        rect[keep, 0] = np.clip(x0[keep], 0, tiles_x)
        rect[keep, 1] = np.clip(y0[keep], 0, tiles_y)
        rect[keep, 2] = np.clip(x1[keep], 0, tiles_x)
        rect[keep, 3] = np.clip(y1[keep], 0, tiles_y)
    offsets, lists = _raster.bin_splats(order.astype(np.int64), rect, tiles_x, tiles_y)
    return tiles_x, offsets, lists


def _min_power(opacities: np.ndarray, alpha_min: float) -> np.ndarray:
    """Exponent below which ``opacity * exp(power)`` falls under ``alpha_min``.

    Lets the kernels skip the exponential for negligible pairs; the margin keeps
    the test conservative so the explicit alpha comparison stays authoritative.
    """
    if alpha_min <= 0:
        return np.full(opacities.shape, -np.inf)
    with np.errstate(divide="ignore"):
        return np.log(alpha_min) - np.log(np.minimum(opacities, OPACITY_CLAMP)) - 1e-9


def render(cloud: GaussianCloud, camera: Camera, background=(0.0, 0.0, 0.0), exact: bool = False,
           return_context: bool = False):
    """Composite ``cloud`` as seen from ``camera``.

    ``exact=True`` disables the 3-sigma footprint cutoff, the low-alpha skip and
    early ray termination, making the output a smooth function of the
    parameters (used for finite-difference checks).
    """
    W, H = camera.width, camera.height
    bg = np.asarray(background, dtype=np.float64)
    if cloud.n == 0:
        out = RenderOutput(np.broadcast_to(bg, (H, W, 3)).copy(), np.full((H, W), camera.far),
                           np.zeros((H, W)), np.ones((H, W)), camera.far)
        if return_context:
            return out, None
        return out
    proj = project(cloud, camera, cutoff=None if exact else 3.0)
    tiles_x, offsets, lists = _rasterize_setup(proj, camera, exact)
    alpha_min = 0.0 if exact else ALPHA_MIN
    t_min = 0.0 if exact else T_MIN
    min_power = _min_power(proj.opacities, alpha_min)
    color, depth, trans, stop = _raster.forward(
        offsets, lists, tiles_x, W, H, proj.means2d, proj.conics, proj.opacities, proj.colors,
        proj.depths, min_power, bg, float(camera.far), alpha_min, t_min,
    )
    out = RenderOutput(color=color, depth=depth, alpha=1.0 - trans, transmittance=trans, far=camera.far)
    if return_context:
        return out, RenderContext(proj, offsets, lists, tiles_x, stop, alpha_min, min_power, out)
    return out


@dataclass
class RenderAdjoint:
    """Per-pixel gradients of a scalar loss w.r.t. the render outputs.

    Any of the three fields may be ``None`` (zero). A leading batch axis is
    allowed; all non-None fields must then share it.
    """

    color: Optional[np.ndarray] = None
    depth: Optional[np.ndarray] = None
    alpha: Optional[np.ndarray] = None


def _batched(adj: RenderAdjoint, H: int, W: int):
    fields = [adj.color, adj.depth, adj.alpha]
    batch = None
    for arr, tail in zip(fields, [(H, W, 3), (H, W), (H, W)]):
        if arr is None:
            continue
        arr = np.asarray(arr)
        if arr.shape == tail:
            b = None
        elif arr.shape[1:] == tail:
            b = arr.shape[0]
        else:
            raise ContractError(f"adjoint shape {arr.shape} does not match image {tail}")
        if batch is not None and b != batch[0]:
            raise ContractError("adjoint fields disagree on batch size")
        batch = (b,)
    b = batch[0] if batch else None
    nb = 1 if b is None else b

    def get(arr, tail):
        if arr is None:
            return np.zeros((nb,) + tail)
        arr = np.asarray(arr, dtype=np.float64)
        return np.ascontiguousarray(arr[None] if b is None else arr)

    return b, get(adj.color, (H, W, 3)), get(adj.depth, (H, W)), get(adj.alpha, (H, W))


def render_backward(cloud: GaussianCloud, camera: Camera, adjoint: RenderAdjoint, background=(0.0, 0.0, 0.0),
                    ctx: Optional[RenderContext] = None, exact: bool = False, return_screen: bool = False):
    """Gradients of ``sum(adjoint * outputs)`` w.r.t. the raw parameters of ``cloud``.

    With a batched adjoint the result is a list of ``GaussianCloud`` gradients,
    one per batch entry. ``return_screen`` additionally returns the per-splat
    gradient on the 2D mean in normalized device units, shaped (B, N, 2) or
    (N, 2).
    """
    W, H = camera.width, camera.height
    batch, gC, gD, gA = _batched(adjoint, H, W)
    nb = gC.shape[0]
    if cloud.n == 0:
        grads = [GaussianCloud.zeros(0) for _ in range(nb)]
        screen = np.zeros((nb, 0, 2))
        res = grads if batch is not None else grads[0]
        if return_screen:
            return res, (screen if batch is not None else screen[0])
        return res
    if ctx is None:
        _, ctx = render(cloud, camera, background, exact=exact, return_context=True)
    proj = ctx.projection
    out = ctx.output
    g_mean, g_conic, g_opac, g_col, g_dep = _raster.backward(
        ctx.offsets, ctx.lists, ctx.tiles_x, W, H, proj.means2d, proj.conics, proj.opacities,
        proj.colors, proj.depths, ctx.min_power, ctx.alpha_min, out.color, out.depth, out.transmittance, ctx.stop,
        gC, gD, gA,
    )
    grads = [
        _project_backward(cloud, camera, proj, g_mean[b], g_conic[b], g_opac[b], g_col[b], g_dep[b])
        for b in range(nb)
    ]
    res = grads if batch is not None else grads[0]
    if return_screen:
        screen = g_mean * np.array([0.5 * W, 0.5 * H])
        return res, (screen if batch is not None else screen[0])
    return res


def _project_backward(cloud, camera, proj, g_mean, g_conic, g_opac, g_col, g_dep) -> GaussianCloud:
    f = camera.focal
    Wr = camera.rotation
    t = proj.t_cam
    tz = t[:, 2]
    J = proj.J

    # conic -> 2D covariance
    Q = np.zeros((len(proj), 2, 2))
    Q[:, 0, 0], Q[:, 0, 1], Q[:, 1, 0], Q[:, 1, 1] = proj.conics[:, 0], proj.conics[:, 1], proj.conics[:, 1], proj.conics[:, 2]
    G_Q = np.zeros_like(Q)
    G_Q[:, 0, 0] = g_conic[:, 0]
    G_Q[:, 0, 1] = G_Q[:, 1, 0] = 0.5 * g_conic[:, 1]
    G_Q[:, 1, 1] = g_conic[:, 2]
    G_cov = -Q @ G_Q @ Q

    # cov = T Sigma T^T, T = J Wr
    T = J @ Wr
    sigma = proj.sigma3d
    G_T = 2.0 * G_cov @ T @ sigma
    G_sigma = T.transpose(0, 2, 1) @ G_cov @ T
    G_J = G_T @ Wr.T

    inv_z2 = 1.0 / tz**2
    g_t = np.zeros_like(t)
    g_t[:, 0] = g_mean[:, 0] * f / tz - G_J[:, 0, 2] * f * inv_z2
    g_t[:, 1] = g_mean[:, 1] * f / tz - G_J[:, 1, 2] * f * inv_z2
    g_t[:, 2] = (
        -g_mean[:, 0] * f * t[:, 0] * inv_z2
        - g_mean[:, 1] * f * t[:, 1] * inv_z2
        + g_dep
        - (G_J[:, 0, 0] + G_J[:, 1, 1]) * f * inv_z2
        + 2.0 * f * (G_J[:, 0, 2] * t[:, 0] + G_J[:, 1, 2] * t[:, 1]) * inv_z2 / tz
    )
    g_pos = g_t @ Wr

    # Sigma = M M^T, M = R diag(s)
    M = proj.R * proj.scales[:, None, :]
    G_M = 2.0 * G_sigma @ M
    g_scale = np.einsum("nij,nij->nj", proj.R, G_M)
    G_R = G_M * proj.scales[:, None, :]
    g_qhat = _rotmat_vjp(proj.quats, G_R)
    qh = proj.quats
    g_q = (g_qhat - qh * np.sum(qh * g_qhat, axis=1, keepdims=True)) / proj.quat_norms[:, None]

    op = proj.opacities
    inside = (cloud.colors >= 0.0) & (cloud.colors <= 1.0)
    grad = GaussianCloud(
        positions=g_pos,
        log_scales=g_scale * proj.scales,
        rotations=g_q,
        opacity_logits=(g_opac * op * (1.0 - op))[:, None],
        colors=g_col * inside,
    )
    # culled splats never reached the rasterizer; keep their gradients exactly zero
    if np.any(proj.culled):
        for arr in grad.arrays():
            arr[proj.culled] = 0.0
    return grad
