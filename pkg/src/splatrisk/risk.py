"""Excess-risk estimates from a local quadratic model and the weight simplex update."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np

from .renderer import ContractError


@dataclass
class WeightSimplex:
    """Weights over ``[geometry_0..geometry_K, texture_0..texture_K]``."""

    weights: np.ndarray

    def __post_init__(self):
        self.weights = np.asarray(self.weights, dtype=np.float64)
        if self.weights.ndim != 1 or self.weights.size == 0 or self.weights.size % 2:
            raise ContractError("simplex needs an even, non-zero number of entries")
        if np.any(self.weights < 0) or not np.all(np.isfinite(self.weights)):
            raise ContractError("simplex weights must be finite and non-negative")
        if abs(self.weights.sum() - 1.0) > 1e-9:
            raise ContractError(f"simplex weights sum to {self.weights.sum()}, not 1")

    @classmethod
    def uniform(cls, n_views: int) -> "WeightSimplex":
        return cls(np.full(2 * n_views, 1.0 / (2 * n_views)))

    @property
    def n_views(self) -> int:
        return self.weights.size // 2

    @property
    def geometry(self) -> np.ndarray:
        return self.weights[: self.n_views]

    @property
    def texture(self) -> np.ndarray:
        return self.weights[self.n_views:]

    def view_share(self, k: int) -> float:
        """Combined geometry + texture weight of view ``k``."""
        return float(self.geometry[k] + self.texture[k])

    def masked(self, use_geometry: bool = True, use_texture: bool = True) -> "WeightSimplex":
        """Renormalize after zeroing disabled objective families."""
        w = self.weights.copy()
        if not use_geometry:
            w[: self.n_views] = 0.0
        if not use_texture:
            w[self.n_views:] = 0.0
        if w.sum() <= 0:
            raise ContractError("no objective left to weight")
        return WeightSimplex(w / w.sum())

    def term_names(self) -> list:
        k = self.n_views
        return [f"g{i}" for i in range(k)] + [f"t{i}" for i in range(k)]


@dataclass
class EMAState:
    """Bias-corrected exponential moving averages of a gradient and its square."""

    decay: float = 0.9
    mean: Optional[np.ndarray] = None
    sq: Optional[np.ndarray] = None
    count: int = 0

    def update(self, grad: np.ndarray):
        grad = np.asarray(grad, dtype=np.float64)
        if self.mean is None or self.mean.shape != grad.shape:
            self.mean = np.zeros_like(grad)
            self.sq = np.zeros_like(grad)
            self.count = 0
        self.count += 1
        self.mean = self.decay * self.mean + (1 - self.decay) * grad
        self.sq = self.decay * self.sq + (1 - self.decay) * grad * grad

    @property
    def smoothed_grad(self) -> np.ndarray:
        return self.mean / (1 - self.decay**self.count)

    @property
    def smoothed_sq(self) -> np.ndarray:
        return self.sq / (1 - self.decay**self.count)

    def resize(self, keep: np.ndarray, n_new: int):
        """Follow the parameter vector through pruning and densification."""
        if self.mean is None:
            return
        self.mean = np.concatenate([self.mean[keep], np.zeros(n_new)])
        self.sq = np.concatenate([self.sq[keep], np.zeros(n_new)])


def estimate_curvature(grad: np.ndarray, ema_state: EMAState, damping: float) -> np.ndarray:
    """Damped diagonal curvature ``EMA(g^2) + damping``.

    Updates ``ema_state`` in place. Raises ``ValueError`` on non-finite
    gradients without touching the state.
    """
    if not damping > 0:
        raise ContractError("damping must be positive")
    grad = np.asarray(grad, dtype=np.float64)
    if not np.all(np.isfinite(grad)):
        raise ValueError("non-finite gradient")
    ema_state.update(grad)
    return ema_state.smoothed_sq + damping


@dataclass
class ExcessRiskEstimate:
    epsilon: float
    gradient_norm: float
    curvature_mean: float
    curvature_min: float
    ema_state: Optional[EMAState] = field(default=None, repr=False)


def excess_risk(grad: np.ndarray, curvature: np.ndarray, ema_state: Optional[EMAState] = None) -> ExcessRiskEstimate:
    """``0.5 * g^T H^-1 g`` for a diagonal ``H``.

    Under the local quadratic model the optimum sits at ``-H^-1 g`` and this is
    the loss drop available there.
    """
    grad = np.asarray(grad, dtype=np.float64)
    curvature = np.asarray(curvature, dtype=np.float64)
    if grad.shape != curvature.shape:
        raise ContractError("gradient and curvature differ in shape")
    if np.any(curvature <= 0):
        raise ContractError("curvature must be strictly positive")
    eps = 0.5 * float(np.sum(grad * grad / curvature))
    return ExcessRiskEstimate(
        epsilon=eps,
        gradient_norm=float(np.linalg.norm(grad)),
        curvature_mean=float(curvature.mean()) if curvature.size else 0.0,
        curvature_min=float(curvature.min()) if curvature.size else 0.0,
        ema_state=ema_state,
    )


def update_weights(a: WeightSimplex, risks, eta: float) -> WeightSimplex:
    """Multiplicative update ``a_i * exp(eta * eps_i)``, renormalized in log space."""
    risks = np.asarray(risks, dtype=np.float64)
    if risks.shape != a.weights.shape:
        raise ContractError(f"{risks.size} risks for {a.weights.size} weights")
    if eta < 0:
        raise ContractError("eta must be non-negative")
    if eta == 0:
        return WeightSimplex(a.weights.copy())
    with np.errstate(divide="ignore"):
        logw = np.log(a.weights) + eta * risks
    finite = np.isfinite(logw)
    if not np.any(finite):
        raise ContractError("all weights vanished")
    logw = np.where(finite, logw, -np.inf)
    logw -= logw[finite].max()
    w = np.exp(logw)
    return WeightSimplex(w / w.sum())
