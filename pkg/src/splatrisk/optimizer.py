"""Two-stage reconstruction: coarse fit for pseudo ground truth, then the
excess-risk-weighted alternating optimization."""

from __future__ import annotations

import csv
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, List, Optional, Sequence

import numpy as np
from scipy.spatial import cKDTree

from . import geometry as geo
from .renderer import ContractError, RenderAdjoint, quat_to_rotmat, render, render_backward
from .risk import EMAState, WeightSimplex, estimate_curvature, excess_risk, update_weights
from .scene import (PARAM_FIELDS, Camera, Config, ConfigError, GaussianCloud, activate, camera_from_orbit,
                    init_cloud, logit, sigmoid)
from .texture import ResidualOracle, ScoreOracle, resize_image, texture_loss

log = logging.getLogger(__name__)


class DivergenceError(RuntimeError):
    pass


@dataclass
class View:
    image: np.ndarray                       # (H, W, 3)
    camera: Camera
    input_mask: Optional[np.ndarray] = None  # foreground mask supplied with the image
    depth: Optional[np.ndarray] = None       # coarse-stage pseudo ground truth below
    mask: Optional[np.ndarray] = None
    visibility: Optional[np.ndarray] = None
    discrepancy: Optional[np.ndarray] = None
    name: str = ""


@dataclass
class ViewSet:
    """Reference view first, auxiliary views after it."""

    views: List[View]
    _resized: dict = field(default_factory=dict, repr=False, compare=False)

    def __post_init__(self):
        if len(self.views) < 2:
            raise ContractError("need a reference view and at least one auxiliary view")
        shape = self.views[0].image.shape
        for v in self.views:
            if v.image.shape != shape or (v.camera.height, v.camera.width) != shape[:2]:
                raise ContractError("all views must share one resolution matching their cameras")

    def __len__(self):
        return len(self.views)

    def __getitem__(self, k) -> View:
        return self.views[k]

    def __iter__(self):
        return iter(self.views)

    @property
    def K(self) -> int:
        return len(self.views) - 1

    @property
    def cameras(self) -> List[Camera]:
        return [v.camera for v in self.views]

    @property
    def images(self) -> List[np.ndarray]:
        return [v.image for v in self.views]

    @property
    def resolution(self):
        return self.views[0].image.shape[:2]

    def images_at(self, res: int) -> List[np.ndarray]:
        """Images resampled to ``res`` x ``res``, cached per resolution."""
        if res not in self._resized:
            self._resized[res] = [resize_image(im, res, res) for im in self.images]
        return self._resized[res]

    def chain(self) -> List[int]:
        """View indices in azimuth order starting at the reference (no wraparound)."""
        az0 = self.views[0].camera.azimuth
        rel = [((v.camera.azimuth - az0) % 360.0, i) for i, v in enumerate(self.views)]
        return [i for _, i in sorted(rel)]

    def targets(self, k: int) -> geo.GeometryTargets:
        v = self.views[k]
        return geo.GeometryTargets(image=v.image, depth=v.depth, mask=v.mask, visibility=v.visibility,
                                   discrepancy=v.discrepancy, near=v.camera.near, far=v.camera.far)


# ----------------------------------------------------------------------------- Adam

@dataclass
class OptimizerState:
    m: GaussianCloud
    v: GaussianCloud
    step_count: np.ndarray  # per-Gaussian Adam step counter (new Gaussians start fresh)
    iteration: int = 0
    total_iters: int = 1
    grad_accum: np.ndarray = None
    grad_denom: np.ndarray = None
    rng: np.random.Generator = None        # view, pose and timestep draws
    split_rng: np.random.Generator = None  # densification offsets, so variants share the draws above
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-15

    @classmethod
    def fresh(cls, cloud: GaussianCloud, total_iters: int, seed: int) -> "OptimizerState":
        n = cloud.n
        return cls(m=GaussianCloud.zeros(n), v=GaussianCloud.zeros(n), step_count=np.zeros(n),
                   total_iters=max(total_iters, 1), grad_accum=np.zeros(n), grad_denom=np.zeros(n),
                   rng=np.random.default_rng(seed), split_rng=np.random.default_rng([seed, 1]))

    def learning_rates(self, config: Config) -> dict:
        frac = min(self.iteration / self.total_iters, 1.0)
        lr_pos = math.exp((1 - frac) * math.log(config.lr_position) + frac * math.log(config.lr_position_final))
        return {"positions": lr_pos, "log_scales": config.lr_scale, "rotations": config.lr_rotation,
                "opacity_logits": config.lr_opacity, "colors": config.lr_color}

    def apply(self, cloud: GaussianCloud, grad: GaussianCloud, config: Config):
        lrs = self.learning_rates(config)
        self.step_count += 1
        bc1 = (1 - self.beta1 ** self.step_count)[:, None]
        bc2 = (1 - self.beta2 ** self.step_count)[:, None]
        for f in PARAM_FIELDS:
            g = getattr(grad, f)
            m = getattr(self.m, f)
            v = getattr(self.v, f)
            m *= self.beta1
            m += (1 - self.beta1) * g
            v *= self.beta2
            v += (1 - self.beta2) * g * g
            getattr(cloud, f)[...] -= lrs[f] * (m / bc1) / (np.sqrt(v / bc2) + self.eps)

    def remap(self, keep: np.ndarray, n_new: int):
        """Carry moments through pruning (``keep``) and appended Gaussians (zeros)."""
        pad = GaussianCloud.zeros(n_new)
        self.m = self.m.subset(keep).concat(pad)
        self.v = self.v.subset(keep).concat(pad)
        self.step_count = np.concatenate([self.step_count[keep], np.zeros(n_new)])
        self.grad_accum = np.concatenate([self.grad_accum[keep], np.zeros(n_new)])
        self.grad_denom = np.concatenate([self.grad_denom[keep], np.zeros(n_new)])

    def reset_field(self, name: str):
        getattr(self.m, name)[...] = 0.0
        getattr(self.v, name)[...] = 0.0


# ----------------------------------------------------------------------------- report

@dataclass
class LossBreakdown:
    total: float
    geometry: np.ndarray      # per view, NaN where not evaluated this step
    texture: np.ndarray
    terms: dict = field(default_factory=dict)
    rolled_back: bool = False


@dataclass
class RunReport:
    n_views: int
    rows: List[dict] = field(default_factory=list)
    flags: List[dict] = field(default_factory=list)
    summary: dict = field(default_factory=dict)

    def term_names(self) -> List[str]:
        return [f"g{k}" for k in range(self.n_views)] + [f"t{k}" for k in range(self.n_views)]

    def flag(self, iteration: int, kind: str, detail: str = ""):
        self.flags.append({"iteration": iteration, "kind": kind, "detail": detail})
        log.warning("iteration %d: %s %s", iteration, kind, detail)

    def log_row(self, iteration: int, weighted_loss: float, losses, weights, risks, n_gaussians: int,
                psnr: Optional[float] = None):
        row = {"iteration": iteration, "weighted_loss": weighted_loss, "n_gaussians": n_gaussians}
        for name, l, w, r in zip(self.term_names(), losses, weights, risks):
            row[f"loss_{name}"] = float(l)
            row[f"weight_{name}"] = float(w)
            row[f"risk_{name}"] = float(r)
        row["psnr_heldout"] = float("nan") if psnr is None else float(psnr)
        self.rows.append(row)

    def columns(self) -> List[str]:
        cols = ["iteration", "weighted_loss", "n_gaussians"]
        for prefix in ("loss", "weight", "risk"):
            cols += [f"{prefix}_{n}" for n in self.term_names()]
        return cols + ["psnr_heldout"]

    def column(self, name: str) -> np.ndarray:
        return np.array([r[name] for r in self.rows])

    def loss_columns(self) -> np.ndarray:
        names = ["weighted_loss"] + [f"loss_{n}" for n in self.term_names()]
        return np.array([[r[n] for n in names] for r in self.rows])

    def weights_at(self, idx: int = -1) -> np.ndarray:
        return np.array([self.rows[idx][f"weight_{n}"] for n in self.term_names()])

    def write_csv(self, path):
        with open(path, "w", newline="") as fh:
            w = csv.DictWriter(fh, fieldnames=self.columns())
            w.writeheader()
            for r in self.rows:
                w.writerow({k: repr(v) if isinstance(v, float) else v for k, v in r.items()})
        return Path(path)

    def write_json(self, path):
        doc = {"n_views": self.n_views, "flags": self.flags, "summary": self.summary}
        with open(path, "w") as fh:
            json.dump(doc, fh, indent=2, default=_json_default)
        return Path(path)


def _json_default(o):
    if isinstance(o, np.ndarray):
        return o.tolist()
    if isinstance(o, (np.floating, np.integer)):
        return o.item()
    raise TypeError(type(o))


# ----------------------------------------------------------------------------- losses

def _geometry_grad(cloud: GaussianCloud, views: ViewSet, k: int, config: Config, use_gao: bool,
                   targets: Optional[geo.GeometryTargets] = None):
    view = views[k]
    out, ctx = render(cloud, view.camera, config.background, return_context=True)
    gl = geo.geometry_loss(out, targets or views.targets(k), config, use_gao=use_gao)
    grad, screen = render_backward(cloud, view.camera, gl.adjoint, config.background, ctx=ctx, return_screen=True)
    return gl, grad, screen, out


def sds_resolution(config: Config, iteration: int, total: int) -> int:
    """Stepwise schedule over equal stages of the run."""
    res = config.sds_resolutions
    stage = min(len(res) - 1, (iteration * len(res)) // max(total, 1))
    return int(res[stage])


def sample_pose(config: Config, rng: np.random.Generator, resolution: int) -> Camera:
    az = rng.uniform(*config.azimuth_range)
    el = rng.uniform(*config.elevation_range)
    return camera_from_orbit(az, el, config.orbit_radius, config.fov, resolution, resolution)


def _texture_terms(cloud, views: ViewSet, oracle, config: Config, pose: Camera, t: float, seed: int, use_tao: bool):
    res = pose.height
    out, ctx = render(cloud, pose, config.background, return_context=True)
    refs = views.images_at(res)
    terms = texture_loss(out.color, pose, refs, views.cameras, oracle, config, t, seed=seed, use_tao=use_tao)
    return terms, ctx


# ----------------------------------------------------------------------------- stages

def coarse_stage(views: ViewSet, config: Config, seed: Optional[int] = None,
                 cloud: Optional[GaussianCloud] = None, report: Optional[RunReport] = None):
    """Uniform-weight photometric + mask fit, then the pseudo ground-truth maps.

    Fills ``depth``, ``mask``, ``visibility`` and ``discrepancy`` on every
    view in place and returns the coarse cloud.
    """
    seed = config.seed if seed is None else seed
    cloud = init_cloud(config, seed) if cloud is None else cloud.copy()
    report = report or RunReport(len(views))
    state = OptimizerState.fresh(cloud, config.coarse_iters, seed + 1)
    fit_targets = [geo.GeometryTargets(image=v.image, mask=v.input_mask, near=v.camera.near, far=v.camera.far)
                   for v in views]
    n = len(views)
    per_step = config.views_per_step if config.views_per_step > 0 else n
    for it in range(config.coarse_iters):
        state.iteration = it
        ks = np.arange(n) if per_step >= n else state.rng.integers(0, n, size=per_step)
        grad = GaussianCloud.zeros(cloud.n)
        total = 0.0
        for k in ks:
            gl, g, screen, _ = _geometry_grad(cloud, views, int(k), config, True, fit_targets[k])
            total += gl.total
            grad.add_(g, 1.0 / len(ks))
            _accumulate_screen(state, screen, config)
        if not np.isfinite(total) or not grad.is_finite():
            raise DivergenceError(f"coarse stage diverged at iteration {it}")
        state.apply(cloud, grad, config)
        cloud, _ = _maintenance(cloud, state, config, it, config.coarse_iters, report)
    build_pseudo_ground_truth(cloud, views, config)
    return cloud


def build_pseudo_ground_truth(cloud: GaussianCloud, views: ViewSet, config: Config):
    """Render D_k, M_k from the coarse cloud and derive V_k, W_k along the azimuth chain."""
    renders = []
    for v in views:
        out = render(cloud, v.camera, config.background)
        v.depth = out.depth.copy()
        v.mask = (out.alpha > 0.5).astype(np.float64)
        renders.append(out)
    order = views.chain()
    ref = order[0]
    H, W = views.resolution
    views[ref].visibility = np.ones((H, W))
    views[ref].discrepancy = np.ones((H, W))
    for prev, k in zip(order[:-1], order[1:]):
        src, dst = views[prev], views[k]
        src_depth = np.where(src.mask > 0, src.depth, 0.0)
        wd = geo.warp(src_depth[..., None], src_depth, src.camera, dst.camera)
        dst.visibility = geo.visibility(wd, dst.depth, dst.mask, config.vis_tau, config.vis_mode)
        wc = geo.warp(src.image, src_depth, src.camera, dst.camera)
        dst.discrepancy = geo.discrepancy_weight(wc, dst.image, config.discrepancy_exponent)


# ----------------------------------------------------------------------------- step

def _accumulate_screen(state: OptimizerState, screen: np.ndarray, config: Config):
    # positional statistics are taken on the photometric scale, independent of lambda_v
    norm = np.linalg.norm(screen, axis=1) / max(config.lambda_v, 1e-12)
    seen = norm > 0
    state.grad_accum[seen] += norm[seen]
    state.grad_denom[seen] += 1


def step(state: OptimizerState, cloud: GaussianCloud, views: ViewSet, weights: WeightSimplex,
         oracle: ScoreOracle, config: Config, iteration: Optional[int] = None, total: Optional[int] = None,
         terms: Optional["TermGradients"] = None):
    """One Adam update on ``sum_k a_g^k L_g^k + a_t^k L_t^k``.

    With ``config.views_per_step > 0`` the geometry sum is estimated from that
    many views drawn in proportion to their weights. Per-term gradients
    already computed at the current parameters (``terms``) give the exact sum
    instead. Returns the updated cloud and a ``LossBreakdown``; a non-finite
    loss leaves the cloud untouched.
    """
    it = state.iteration if iteration is None else iteration
    total = state.total_iters if total is None else total
    n = len(views)
    if weights.n_views != n:
        raise ContractError("simplex size does not match the view set")
    if terms is not None:
        flat = np.zeros_like(terms.grads[0])
        for w, g in zip(weights.weights, terms.grads):
            if w > 0:
                flat += w * g
        total_loss = float(weights.weights @ np.nan_to_num(terms.losses))
        info = LossBreakdown(total=total_loss, geometry=terms.losses[:n].copy(), texture=terms.losses[n:].copy())
        grad = GaussianCloud.from_flat(flat, cloud.n)
        if not np.isfinite(total_loss) or not grad.is_finite():
            info.rolled_back = True
            return cloud, info
        state.apply(cloud, grad, config)
        return cloud, info
    a_g = weights.geometry
    a_t = weights.texture
    grad = GaussianCloud.zeros(cloud.n)
    g_losses = np.full(n, np.nan)
    t_losses = np.full(n, np.nan)
    total_loss = 0.0

    mass_g = a_g.sum()
    if mass_g > 0:
        per_step = config.views_per_step
        if per_step <= 0 or per_step >= n:
            ks, scale = [k for k in range(n) if a_g[k] > 0], None
        else:
            ks = state.rng.choice(n, size=per_step, p=a_g / mass_g)
            scale = mass_g / per_step
        for k in ks:
            gl, g, screen, _ = _geometry_grad(cloud, views, int(k), config, config.use_gao)
            w = a_g[k] if scale is None else scale
            g_losses[k] = gl.total
            total_loss += w * gl.total
            grad.add_(g, w)
            _accumulate_screen(state, screen, config)

    mass_t = a_t.sum()
    if mass_t > 0 and config.lambda_t > 0:
        res = sds_resolution(config, it, total)
        pose = sample_pose(config, state.rng, res)
        t = state.rng.uniform(config.t_min, config.t_max)
        terms, ctx = _texture_terms(cloud, views, oracle, config, pose, t, config.seed * 100003 + it, config.use_tao)
        t_losses[:] = terms.magnitudes
        total_loss += float(a_t @ terms.magnitudes)
        adj = RenderAdjoint(terms.combined(a_t))
        grad.add_(render_backward(cloud, pose, adj, config.background, ctx=ctx))

    info = LossBreakdown(total=float(total_loss), geometry=g_losses, texture=t_losses)
    if not np.isfinite(total_loss) or not grad.is_finite():
        info.rolled_back = True
        return cloud, info
    state.apply(cloud, grad, config)
    return cloud, info


# ----------------------------------------------------------------------------- risk

@dataclass
class RiskTracker:
    """Per-term EMA statistics and the most recent excess-risk estimates."""

    n_terms: int
    decay: float
    grad_states: List[EMAState] = None
    curv_states: List[EMAState] = None
    risks: np.ndarray = None
    losses: np.ndarray = None

    def __post_init__(self):
        self.reset()
        self.risks = np.zeros(self.n_terms)
        self.losses = np.full(self.n_terms, np.nan)

    def reset(self):
        self.grad_states = [EMAState(decay=self.decay) for _ in range(self.n_terms)]
        self.curv_states = [EMAState(decay=self.decay) for _ in range(self.n_terms)]


@dataclass
class TermGradients:
    grads: List[np.ndarray]
    probes: Optional[List[np.ndarray]]  # Gauss-Newton probes, one per term
    losses: np.ndarray


def _rademacher(rng, shape):
    return rng.integers(0, 2, size=shape) * 2.0 - 1.0


def _probe_adjoint(curv: RenderAdjoint, rng) -> RenderAdjoint:
    def one(c):
        return None if c is None else np.sqrt(c) * _rademacher(rng, c.shape)
    return RenderAdjoint(one(curv.color), one(curv.depth), one(curv.alpha))


def _stack(a: RenderAdjoint, b: RenderAdjoint) -> RenderAdjoint:
    def pair(x, y):
        return None if x is None else np.stack([x, y])
    return RenderAdjoint(pair(a.color, b.color), pair(a.depth, b.depth), pair(a.alpha, b.alpha))


def term_gradients(cloud: GaussianCloud, views: ViewSet, oracle: ScoreOracle, config: Config,
                   rng: np.random.Generator, iteration: int, total: int) -> TermGradients:
    """Separate gradients of every L_g^k and L_t^k at the current parameters.

    With ``config.curvature == "sampled"`` each term also gets a probe
    ``J^T sqrt(C) z`` (z Rademacher, C the loss curvature per pixel) whose
    square is an unbiased sample of the Gauss-Newton diagonal.
    """
    n = len(views)
    sampled = config.curvature == "sampled"
    grads, probes, losses = [], [], []
    for k in range(n):
        view = views[k]
        out, ctx = render(cloud, view.camera, config.background, return_context=True)
        gl = geo.geometry_loss(out, views.targets(k), config, use_gao=config.use_gao)
        if sampled:
            adj = _stack(gl.adjoint, _probe_adjoint(gl.curvature, rng))
            g, p = render_backward(cloud, view.camera, adj, config.background, ctx=ctx)
            probes.append(p.flat())
        else:
            g = render_backward(cloud, view.camera, gl.adjoint, config.background, ctx=ctx)
        grads.append(g.flat())
        losses.append(gl.total)
    if config.lambda_t > 0:
        res = sds_resolution(config, iteration, total)
        pose = sample_pose(config, rng, res)
        t = rng.uniform(config.t_min, config.t_max)
        terms, ctx = _texture_terms(cloud, views, oracle, config, pose, t, config.seed * 100003 + iteration + 7919,
                                    config.use_tao)
        adj = terms.adjoints
        if sampled:
            z = _rademacher(rng, adj.shape)
            adj = np.concatenate([adj, np.sqrt(terms.curvature)[..., None] * z])
        out = render_backward(cloud, pose, RenderAdjoint(adj), config.background, ctx=ctx)
        grads += [g.flat() for g in out[:n]]
        if sampled:
            probes += [g.flat() for g in out[n:]]
        losses += list(terms.losses)
    else:
        zero = np.zeros_like(grads[0])
        grads += [zero] * n
        if sampled:
            probes += [zero] * n
        losses += [0.0] * n
    return TermGradients(grads, probes if sampled else None, np.array(losses))


def estimate_risks(tracker: RiskTracker, terms: TermGradients, config: Config,
                   report: Optional[RunReport] = None, iteration: int = 0) -> np.ndarray:
    """Update every term's EMA statistics and return its excess-risk estimate.

    The curvature EMA is fed the term's own gradient (empirical Fisher) or its
    Gauss-Newton probe. Damping is ``config.damping`` relative to the mean
    curvature. Terms with non-finite inputs keep their previous estimate.
    """
    for i, g in enumerate(terms.grads):
        c = g if terms.probes is None else terms.probes[i]
        if not (np.all(np.isfinite(g)) and np.all(np.isfinite(c))):
            if report is not None:
                report.flag(iteration, "nonfinite_gradient", f"term {i}")
            continue
        gs, cs = tracker.grad_states[i], tracker.curv_states[i]
        gs.update(g)
        scale = float(np.mean(c * c)) if c.size else 0.0
        damping = config.damping * scale if scale > 0 else config.damping
        h = estimate_curvature(c, cs, damping)
        tracker.risks[i] = excess_risk(gs.smoothed_grad, h, gs).epsilon
    tracker.losses = terms.losses
    return tracker.risks.copy()


def normalize_risks(risks: np.ndarray, losses: np.ndarray, mode: str) -> np.ndarray:
    """Map raw estimates onto the scale fed to the weight update.

    ``share``: fraction of the summed risk. ``relative``: each term's risk over
    its own loss (the reducible fraction of that loss), then taken as shares.
    ``none``: unchanged.
    """
    if mode == "none":
        return risks
    if mode == "share":
        s = risks.sum()
        return risks / s if s > 0 else np.zeros_like(risks)
    if mode == "relative":
        losses = np.nan_to_num(np.asarray(losses, dtype=np.float64))
        rel = np.divide(risks, losses, out=np.zeros_like(risks), where=losses > 0)
        s = rel.sum()
        return rel / s if s > 0 else np.zeros_like(rel)
    raise ConfigError(f"unknown risk normalization {mode!r}")


# ----------------------------------------------------------------------------- maintenance

def reset_opacity(cloud: GaussianCloud, state: OptimizerState, value: float):
    cap = logit(value)
    cloud.opacity_logits[...] = np.minimum(cloud.opacity_logits, cap)
    state.reset_field("opacity_logits")


def densify_and_prune(cloud: GaussianCloud, state: OptimizerState, config: Config, scene_extent: float = 1.0,
                      report: Optional[RunReport] = None, iteration: int = 0):
    """Clone small / split large high-gradient Gaussians, then prune faint ones."""
    n = cloud.n
    mean_grad = np.divide(state.grad_accum, state.grad_denom, out=np.zeros(n), where=state.grad_denom > 0)
    hot = mean_grad >= config.grad_threshold
    room = config.max_gaussians - n
    if room <= 0:
        hot[:] = False
    elif hot.sum() > room:
        # keep the strongest candidates, ties by index
        idx = np.flatnonzero(hot)
        order = np.lexsort((idx, -mean_grad[idx]))
        hot[:] = False
        hot[idx[order[:room]]] = True
    act = activate(cloud)
    big = act.scales.max(axis=1) > config.percent_dense * scene_extent
    split = hot & big
    clone = hot & ~big

    new_parts = []
    if clone.any():
        new_parts.append(cloud.subset(clone))
    if split.any():
        idx = np.flatnonzero(split)
        children = cloud.subset(np.repeat(idx, 2))
        scales = np.repeat(act.scales[idx], 2, axis=0)
        rot = np.repeat(act.rotations[idx], 2, axis=0)
        offs = state.split_rng.normal(size=(len(children), 3)) * scales
        children.positions += np.einsum("nij,nj->ni", quat_to_rotmat(rot), offs)
        children.log_scales = np.log(scales / config.split_factor)
        new_parts.append(children)

    keep = ~split
    grown = cloud.subset(keep)
    n_new = 0
    for part in new_parts:
        grown = grown.concat(part)
        n_new += part.n
    state.remap(np.flatnonzero(keep), n_new)
    cloud = grown

    faint = sigmoid(cloud.opacity_logits[:, 0]) < config.prune_opacity
    if faint.all():
        if report is not None:
            report.flag(iteration, "prune_skipped", "every Gaussian below the opacity threshold")
    elif faint.any():
        keep = np.flatnonzero(~faint)
        state.remap(keep, 0)
        cloud = cloud.subset(keep)
    state.grad_accum[:] = 0.0
    state.grad_denom[:] = 0.0
    return cloud


def knn_outliers(positions: np.ndarray, k: int, kappa: float, min_ratio: float = 3.0) -> np.ndarray:
    """Boolean mask of points whose mean k-NN distance exceeds mean + kappa * std.

    A point must also sit ``min_ratio`` times the median spacing away, so the
    thinner boundary layer of a dense cluster is never trimmed.
    """
    n = positions.shape[0]
    if n <= k:
        return np.zeros(n, dtype=bool)
    dist, _ = cKDTree(positions).query(positions, k=k + 1)
    stat = dist[:, 1:].mean(axis=1)
    return (stat > stat.mean() + kappa * stat.std()) & (stat > min_ratio * np.median(stat))


def remove_floaters(cloud: GaussianCloud, k_neighbors: int = 10, kappa: float = 3.0,
                    state: Optional[OptimizerState] = None) -> GaussianCloud:
    out = knn_outliers(cloud.positions, k_neighbors, kappa)
    if not out.any():
        return cloud
    keep = np.flatnonzero(~out)
    if state is not None:
        state.remap(keep, 0)
    return cloud.subset(keep)


def _maintenance(cloud, state, config: Config, it: int, total: int, report: RunReport):
    """Densify / reset / floater schedule, keyed on the 1-based iteration count."""
    done = it + 1
    changed = False
    if config.densify_every > 0 and done % config.densify_every == 0 and done < total:
        cloud = densify_and_prune(cloud, state, config, report=report, iteration=it)
        changed = True
    if config.opacity_reset_every > 0 and done % config.opacity_reset_every == 0 and done < total:
        reset_opacity(cloud, state, config.opacity_reset_value)
    if config.floater_every > 0 and done % config.floater_every == 0:
        n0 = cloud.n
        cloud = remove_floaters(cloud, config.knn_k, config.knn_kappa, state)
        changed = changed or cloud.n != n0
    cloud.check()
    return cloud, changed


# ----------------------------------------------------------------------------- run

@dataclass
class RunResult:
    cloud: GaussianCloud
    coarse: GaussianCloud
    weights: WeightSimplex
    report: RunReport


def run(views: ViewSet, oracle: Optional[ScoreOracle] = None, config: Optional[Config] = None,
        coarse: Optional[GaussianCloud] = None, evaluator: Optional[Callable[[GaussianCloud], float]] = None,
        checkpoint: Optional[Callable[[GaussianCloud, int], None]] = None) -> RunResult:
    """Coarse stage followed by ``config.iterations`` weighted steps.

    ``coarse`` skips the coarse fit when the view maps are already populated.
    ``evaluator`` (cloud -> held-out PSNR) is called at every logged row.
    """
    config = config or Config()
    oracle = oracle or ResidualOracle()
    n = len(views)
    report = RunReport(n)
    if coarse is None:
        coarse = coarse_stage(views, config, report=report)
    elif any(v.depth is None for v in views):
        build_pseudo_ground_truth(coarse, views, config)
    cloud = coarse.copy()
    total = config.iterations
    state = OptimizerState.fresh(cloud, total, config.seed + 2)
    risk_rng = np.random.default_rng(config.seed + 3)
    weights = WeightSimplex.uniform(n)
    tracker = RiskTracker(2 * n, config.ema_decay)
    adaptive = config.adaptive and config.eta > 0
    T_w = config.weight_update_every

    def assess(it):
        terms = term_gradients(cloud, views, oracle, config, risk_rng, it, total)
        estimate_risks(tracker, terms, config, report, it)
        return terms

    def log_row(it):
        psnr = evaluator(cloud) if evaluator is not None else None
        wl = float(weights.weights @ np.nan_to_num(tracker.losses))
        report.log_row(it, wl, tracker.losses, weights.weights, tracker.risks, cloud.n, psnr)

    for it in range(total):
        state.iteration = it
        terms = None
        if it % T_w == 0:
            terms = assess(it)
            if adaptive and it >= config.warmup_iters:
                weights = update_weights(weights, normalize_risks(tracker.risks, tracker.losses, config.risk_normalization),
                                         config.eta)
            log_row(it)
        cloud, info = step(state, cloud, views, weights, oracle, config, it, total, terms)
        if info.rolled_back:
            report.flag(it, "nonfinite_loss", "step rolled back")
        cloud, changed = _maintenance(cloud, state, config, it, total, report)
        if changed:
            tracker.reset()
        if checkpoint is not None and config.checkpoint_every > 0 and (it + 1) % config.checkpoint_every == 0:
            checkpoint(cloud, it + 1)
    assess(total)
    log_row(total)
    report.summary = {
        "iterations": total,
        "final_weights": weights.weights.tolist(),
        "final_risks": tracker.risks.tolist(),
        "n_gaussians": cloud.n,
        "flags": len(report.flags),
    }
    return RunResult(cloud=cloud, coarse=coarse, weights=weights, report=report)
