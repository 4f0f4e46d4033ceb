"""Gaussian parameter sets, cameras and run configuration."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.spatial import cKDTree


class ConfigError(ValueError):
    """Raised for invalid configuration values."""


class ParameterError(ValueError):
    """Raised when Gaussian parameters are malformed or non-finite."""


PARAM_FIELDS = ("positions", "log_scales", "rotations", "opacity_logits", "colors")
PARAM_WIDTHS = {"positions": 3, "log_scales": 3, "rotations": 4, "opacity_logits": 1, "colors": 3}


def sigmoid(x):
    return 0.5 * (1.0 + np.tanh(0.5 * x))


def logit(p):
    p = np.asarray(p, dtype=np.float64)
    return np.log(p) - np.log1p(-p)


@dataclass
class GaussianCloud:
    """Raw (pre-activation) parameters of N Gaussians.

    Gradients with respect to a cloud are returned as a ``GaussianCloud`` of the
    same shape, so the field names double as parameter-group names.
    """

    positions: np.ndarray
    log_scales: np.ndarray
    rotations: np.ndarray
    opacity_logits: np.ndarray
    colors: np.ndarray

    def __post_init__(self):
        for name in PARAM_FIELDS:
            arr = np.asarray(getattr(self, name), dtype=np.float64)
            if arr.ndim == 1 and PARAM_WIDTHS[name] == 1:
                arr = arr[:, None]
            setattr(self, name, arr)
        n = self.positions.shape[0]
        for name in PARAM_FIELDS:
            arr = getattr(self, name)
            if arr.shape != (n, PARAM_WIDTHS[name]):
                raise ParameterError(f"{name} has shape {arr.shape}, expected ({n}, {PARAM_WIDTHS[name]})")

    def __len__(self):
        return self.positions.shape[0]

    @property
    def n(self) -> int:
        return self.positions.shape[0]

    def copy(self) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f).copy() for f in PARAM_FIELDS))

    def arrays(self):
        return [getattr(self, f) for f in PARAM_FIELDS]

    def flat(self) -> np.ndarray:
        return np.concatenate([getattr(self, f).ravel() for f in PARAM_FIELDS])

    @classmethod
    def zeros(cls, n: int) -> "GaussianCloud":
        return cls(*(np.zeros((n, PARAM_WIDTHS[f])) for f in PARAM_FIELDS))

    @classmethod
    def zeros_like(cls, other: "GaussianCloud") -> "GaussianCloud":
        return cls.zeros(other.n)

    @classmethod
    def from_flat(cls, vec: np.ndarray, n: int) -> "GaussianCloud":
        parts, i = [], 0
        for f in PARAM_FIELDS:
            w = PARAM_WIDTHS[f]
            parts.append(np.asarray(vec[i : i + n * w]).reshape(n, w))
            i += n * w
        return cls(*parts)

    def subset(self, idx) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f)[idx] for f in PARAM_FIELDS))

    def concat(self, other: "GaussianCloud") -> "GaussianCloud":
        return GaussianCloud(*(np.concatenate([getattr(self, f), getattr(other, f)]) for f in PARAM_FIELDS))

    def scaled(self, k: float) -> "GaussianCloud":
        return GaussianCloud(*(getattr(self, f) * k for f in PARAM_FIELDS))

    def add_(self, other: "GaussianCloud", k: float = 1.0) -> "GaussianCloud":
        for f in PARAM_FIELDS:
            getattr(self, f)[...] += k * getattr(other, f)
        return self

    def is_finite(self) -> bool:
        return all(np.all(np.isfinite(getattr(self, f))) for f in PARAM_FIELDS)

    def check(self):
        """Raise ``ParameterError`` unless the cloud satisfies its invariants."""
        if self.n < 1:
            raise ParameterError("cloud is empty")
        if not self.is_finite():
            raise ParameterError("cloud has non-finite entries")
        if np.any(np.linalg.norm(self.rotations, axis=1) == 0):
            raise ParameterError("zero quaternion")


@dataclass
class ActivatedGaussians:
    positions: np.ndarray
    scales: np.ndarray
    rotations: np.ndarray  # unit quaternions (w, x, y, z)
    opacities: np.ndarray  # (N,)
    colors: np.ndarray

    def __len__(self):
        return self.positions.shape[0]


def activate(cloud) -> ActivatedGaussians:
    """Map raw parameters to render-space attributes.

    Passing an already activated set re-normalizes quaternions and re-clamps
    colors and opacities, which leaves valid values untouched.
    """
    if isinstance(cloud, ActivatedGaussians):
        q = cloud.rotations / np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
        return ActivatedGaussians(
            cloud.positions.copy(),
            cloud.scales.copy(),
            q,
            np.clip(cloud.opacities, 0.0, 1.0),
            np.clip(cloud.colors, 0.0, 1.0),
        )
    if not cloud.is_finite():
        raise ParameterError("cloud has non-finite entries")
    norms = np.linalg.norm(cloud.rotations, axis=1, keepdims=True)
    if np.any(norms == 0):
        raise ParameterError("zero quaternion")
    return ActivatedGaussians(
        positions=cloud.positions.copy(),
        scales=np.exp(cloud.log_scales),
        rotations=cloud.rotations / norms,
        opacities=sigmoid(cloud.opacity_logits[:, 0]),
        colors=np.clip(cloud.colors, 0.0, 1.0),
    )


@dataclass(frozen=True)
class Camera:
    """Pinhole camera; camera space is x right, y down, z forward (OpenCV)."""

    width: int
    height: int
    vertical_fov: float  # degrees
    world_to_camera: np.ndarray
    near: float = 0.2
    far: float = 4.0
    azimuth: Optional[float] = None
    elevation: Optional[float] = None

    def __post_init__(self):
        w2c = np.asarray(self.world_to_camera, dtype=np.float64)
        object.__setattr__(self, "world_to_camera", w2c)
        if w2c.shape != (4, 4):
            raise ConfigError("world_to_camera must be 4x4")
        rot = w2c[:3, :3]
        if not np.allclose(rot.T @ rot, np.eye(3), atol=1e-6) or np.linalg.det(rot) < 0:
            raise ConfigError("world_to_camera rotation is not orthonormal")
        if not (0 < self.near < self.far):
            raise ConfigError("need 0 < near < far")
        if self.width <= 0 or self.height <= 0:
            raise ConfigError("image dimensions must be positive")
        if not (0 < self.vertical_fov < 180):
            raise ConfigError("fov must lie in (0, 180)")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    @property
    def focal(self) -> float:
        return 0.5 * self.height / np.tan(np.deg2rad(self.vertical_fov) / 2)

    @property
    def principal_point(self):
        return 0.5 * self.width, 0.5 * self.height

    def resized(self, width: int, height: Optional[int] = None) -> "Camera":
        return dataclasses.replace(self, width=width, height=height or width)

    def project(self, points: np.ndarray):
        """World points (M, 3) -> pixel coords (M, 2) and camera depth (M,)."""
        cam = points @ self.rotation.T + self.translation
        f = self.focal
        cx, cy = self.principal_point
        z = cam[:, 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            uv = np.stack([f * cam[:, 0] / z + cx, f * cam[:, 1] / z + cy], axis=1)
        return uv, z

    def unproject(self, uv: np.ndarray, depth: np.ndarray) -> np.ndarray:
        f = self.focal
        cx, cy = self.principal_point
        x = (uv[:, 0] - cx) / f * depth
        y = (uv[:, 1] - cy) / f * depth
        cam = np.stack([x, y, depth], axis=1)
        return (cam - self.translation) @ self.rotation

    def pixel_rays(self) -> np.ndarray:
        """Unit-depth camera-space directions for every pixel center, (H, W, 3)."""
        f = self.focal
        cx, cy = self.principal_point
        u = np.arange(self.width) + 0.5
        v = np.arange(self.height) + 0.5
        uu, vv = np.meshgrid(u, v)
        return np.stack([(uu - cx) / f, (vv - cy) / f, np.ones_like(uu)], axis=-1)

    def to_dict(self) -> dict:
        return {
            "width": self.width,
            "height": self.height,
            "vertical_fov": self.vertical_fov,
            "world_to_camera": self.world_to_camera.tolist(),
            "near": self.near,
            "far": self.far,
            "azimuth": self.azimuth,
            "elevation": self.elevation,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            width=int(d["width"]),
            height=int(d["height"]),
            vertical_fov=float(d["vertical_fov"]),
            world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64),
            near=float(d["near"]),
            far=float(d["far"]),
            azimuth=d.get("azimuth"),
            elevation=d.get("elevation"),
        )


def look_at(center, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    center = np.asarray(center, dtype=np.float64)
    forward = np.asarray(target, dtype=np.float64) - center
    forward /= np.linalg.norm(forward)
    up = np.asarray(up, dtype=np.float64)
    right = np.cross(forward, up)
    if np.linalg.norm(right) < 1e-9:
        # looking straight along the up axis; any perpendicular right vector works
        right = np.cross(forward, np.array([1.0, 0.0, 0.0]))
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    rot = np.stack([right, down, forward])
    w2c = np.eye(4)
    w2c[:3, :3] = rot
    w2c[:3, 3] = -rot @ center
    return w2c


def orbit_center(azimuth: float, elevation: float, radius: float) -> np.ndarray:
    az, el = np.deg2rad(azimuth), np.deg2rad(elevation)
    return radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])


def camera_from_orbit(
    azimuth: float,
    elevation: float,
    radius: float,
    fov: float,
    width: int,
    height: int,
    near: float = 0.2,
    far: float = 4.0,
) -> Camera:
    """Camera on a sphere around the origin, looking at it with +z up.

    Azimuth rotates about +z starting from +x; elevation is measured from the
    xy-plane.
    """
    if not radius > 0:
        raise ConfigError(f"orbit radius must be positive, got {radius}")
    if not (0 < fov < 180):
        raise ConfigError(f"fov must lie in (0, 180), got {fov}")
    center = orbit_center(azimuth, elevation, radius)
    return Camera(
        width=int(width),
        height=int(height),
        vertical_fov=float(fov),
        world_to_camera=look_at(center),
        near=near,
        far=far,
        azimuth=float(azimuth),
        elevation=float(elevation),
    )


@dataclass
class Config:
    """Every tunable of the reconstruction pipeline."""

    # objective balancing
    lambda_v: float = 1e4
    lambda_d: float = 10.0
    lambda_m: float = 1e3
    lambda_t: float = 1.0
    discrepancy_exponent: float = 4.0
    eta: float = 3.0

    # initialization
    n_init: int = 5000
    init_radius: float = 0.5
    init_opacity: float = 0.1
    init_color: float = 128.0 / 255.0

    # learning rates
    lr_position: float = 1e-3
    lr_position_final: float = 2e-5
    lr_scale: float = 5e-3
    lr_rotation: float = 5e-3
    lr_opacity: float = 5e-2
    lr_color: float = 1e-2

    # schedule
    iterations: int = 1500
    coarse_iters: int = 400
    densify_every: int = 100
    opacity_reset_every: int = 500
    floater_every: int = 400
    weight_update_every: int = 10
    warmup_iters: int = 100
    checkpoint_every: int = 0

    # densification
    grad_threshold: float = 2e-4
    prune_opacity: float = 0.01
    split_factor: float = 1.6
    percent_dense: float = 0.01
    opacity_reset_value: float = 0.05
    max_gaussians: int = 20000
    knn_k: int = 10
    knn_kappa: float = 3.0

    # geometry objective
    vis_tau: float = 0.05
    vis_mode: str = "textual"

    # texture objective
    sobel_kernel: int = 5
    sobel_sigma: float = 1.5
    t_min: float = 0.02
    t_max: float = 0.98
    sds_resolutions: tuple = (128, 256, 384, 512)

    # excess risk
    damping: float = 1e-8
    ema_decay: float = 0.9
    risk_normalization: str = "relative"
    curvature: str = "sampled"

    # geometry views per step; 0 evaluates every view
    views_per_step: int = 0

    # cameras
    image_size: int = 320
    orbit_radius: float = 2.0
    fov: float = 49.1
    azimuth_range: tuple = (-180.0, 180.0)
    elevation_range: tuple = (-30.0, 30.0)
    background: tuple = (0.0, 0.0, 0.0)

    # ablation switches
    use_gao: bool = True
    use_tao: bool = True
    adaptive: bool = True

    seed: int = 0

    def __post_init__(self):
        self.sds_resolutions = tuple(int(r) for r in self.sds_resolutions)
        self.azimuth_range = tuple(float(a) for a in self.azimuth_range)
        self.elevation_range = tuple(float(a) for a in self.elevation_range)
        self.background = tuple(float(a) for a in self.background)
        self.validate()

    def validate(self):
        for name in ("lambda_v", "lambda_d", "lambda_m", "lambda_t"):
            if getattr(self, name) < 0:
                raise ConfigError(f"{name} must be >= 0")
        if self.eta < 0:
            raise ConfigError("eta must be >= 0")
        if not self.vis_tau > 0:
            raise ConfigError("vis_tau must be > 0")
        if not self.damping > 0:
            raise ConfigError("damping must be > 0")
        if self.weight_update_every < 1:
            raise ConfigError("weight_update_every must be >= 1")
        if self.n_init < 1:
            raise ConfigError("n_init must be >= 1")
        if not self.discrepancy_exponent > 0:
            raise ConfigError("discrepancy_exponent must be > 0")
        if not (0 <= self.ema_decay < 1):
            raise ConfigError("ema_decay must lie in [0, 1)")
        if self.vis_mode not in ("textual", "literal"):
            raise ConfigError(f"unknown visibility mode {self.vis_mode!r}")
        if self.iterations < 0 or self.coarse_iters < 0:
            raise ConfigError("iteration counts must be >= 0")
        if self.curvature not in ("empirical", "sampled"):
            raise ConfigError(f"unknown curvature surrogate {self.curvature!r}")
        if self.risk_normalization not in ("share", "relative", "none"):
            raise ConfigError(f"unknown risk normalization {self.risk_normalization!r}")
        if self.views_per_step < 0:
            raise ConfigError("views_per_step must be >= 0")
        if not (0 < self.t_min <= self.t_max < 1):
            raise ConfigError("need 0 < t_min <= t_max < 1")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        for k, v in d.items():
            if isinstance(v, tuple):
                d[k] = list(v)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "Config":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def replace(self, **kw) -> "Config":
        return dataclasses.replace(self, **kw)


def init_cloud(config: Config, seed: int) -> GaussianCloud:
    """Uniform random Gaussians inside a ball, grey and faint."""
    if config.n_init < 1:
        raise ConfigError("n_init must be >= 1")
    rng = np.random.default_rng(seed)
    n = config.n_init
    direction = rng.normal(size=(n, 3))
    direction /= np.linalg.norm(direction, axis=1, keepdims=True)
    radius = config.init_radius * rng.uniform(size=n) ** (1.0 / 3.0)
    positions = direction * radius[:, None]
    return GaussianCloud(
        positions=positions,
        log_scales=np.repeat(np.log(knn_scale(positions))[:, None], 3, axis=1),
        rotations=np.tile([1.0, 0.0, 0.0, 0.0], (n, 1)),
        opacity_logits=np.full((n, 1), logit(config.init_opacity)),
        colors=np.full((n, 3), config.init_color),
    )


def knn_scale(positions: np.ndarray, k: int = 3) -> np.ndarray:
    """Root-mean-square distance to the k nearest neighbours, floored."""
    n = positions.shape[0]
    if n < 2:
        return np.full(n, 0.05)
    k = min(k, n - 1)
    dist, _ = cKDTree(positions).query(positions, k=k + 1)
    d = np.sqrt(np.mean(dist[:, 1:] ** 2, axis=1))
    return np.maximum(d, 1e-4)
