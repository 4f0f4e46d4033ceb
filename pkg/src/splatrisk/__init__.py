"""Gaussian-splat reconstruction from inconsistent views with excess-risk-guided objective weighting."""

from .scene import (Camera, Config, ConfigError, GaussianCloud, ParameterError, activate, camera_from_orbit,
                    init_cloud)
from .renderer import ContractError, RenderAdjoint, RenderOutput, project, render, render_backward
from .geometry import discrepancy_weight, geometry_loss, visibility, warp
from .texture import ResidualOracle, ScoreOracle, camera_weight, sds_gradient, texture_complexity, texture_loss
from .risk import EMAState, ExcessRiskEstimate, WeightSimplex, estimate_curvature, excess_risk, update_weights
from .optimizer import (OptimizerState, RunReport, View, ViewSet, coarse_stage, densify_and_prune,
                        remove_floaters, run, step)
from .harness import (CorruptionSpec, MetricResult, SceneSpec, SyntheticMVDOracle, corrupt_views, evaluate,
                      gen_scene)

__version__ = "0.1.0"
