"""Synthetic scenes with controlled inconsistencies, image metrics, and a
synthetic multi-view oracle for the texture objective."""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass, field
from typing import Dict, List, Optional, Sequence

import numpy as np
from scipy import ndimage

from .optimizer import View, ViewSet
from .renderer import ContractError, render
from .scene import Camera, ConfigError, GaussianCloud, camera_from_orbit, logit
from .texture import gaussian_kernel, timestep_weight

SCENE_KINDS = ("gaussian-blob", "textured-sphere", "box-grid")
PSNR_CAP = 99.0


# ----------------------------------------------------------------------------- scenes

@dataclass
class SceneSpec:
    kind: str = "textured-sphere"
    count: int = 2000
    frequency: float = 3.0
    seed: int = 0

    def __post_init__(self):
        if self.kind not in SCENE_KINDS:
            raise ConfigError(f"unknown scene kind {self.kind!r}; expected one of {SCENE_KINDS}")
        if self.count < 1:
            raise ConfigError("scene count must be >= 1")

    @classmethod
    def from_dict(cls, d: dict) -> "SceneSpec":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ConfigError(f"unknown scene keys: {sorted(unknown)}")
        return cls(**d)

    def to_dict(self) -> dict:
        return dataclasses.asdict(self)


def _frame_quaternions(normals: np.ndarray) -> np.ndarray:
    """Quaternions (w, x, y, z) rotating +z onto each unit normal."""
    z = np.array([0.0, 0.0, 1.0])
    axis = np.cross(z, normals)
    s = np.linalg.norm(axis, axis=1)
    c = normals @ z
    angle = np.arctan2(s, c)
    axis = np.where(s[:, None] > 1e-12, axis / np.maximum(s, 1e-12)[:, None], np.array([1.0, 0.0, 0.0]))
    q = np.concatenate([np.cos(angle / 2)[:, None], np.sin(angle / 2)[:, None] * axis], axis=1)
    return q


def _sphere_cloud(spec: SceneSpec, rng) -> GaussianCloud:
    n = spec.count
    r = 0.35
    # Fibonacci lattice keeps coverage even
    i = np.arange(n) + 0.5
    polar = np.arccos(1 - 2 * i / n)
    azim = np.pi * (1 + 5**0.5) * i
    normals = np.stack([np.sin(polar) * np.cos(azim), np.sin(polar) * np.sin(azim), np.cos(polar)], axis=1)
    spacing = np.sqrt(4 * np.pi * r * r / n)
    # centers sit half a splat width inside r so the rendered silhouette is the sphere's
    pos = normals * (r - 0.35 * spacing)
    f = spec.frequency
    u = np.arctan2(normals[:, 1], normals[:, 0])
    v = polar
    checker = np.sign(np.sin(f * u) * np.sin(f * v))
    base = rng.uniform(0.2, 0.8, size=3)
    alt = rng.uniform(0.2, 0.8, size=3)
    colors = np.where(checker[:, None] > 0, base, alt)
    colors = np.clip(colors + 0.15 * np.cos(2 * f * v)[:, None], 0.02, 0.98)
    scales = np.tile([spacing * 0.7, spacing * 0.7, spacing * 0.12], (n, 1))
    return GaussianCloud(positions=pos, log_scales=np.log(scales), rotations=_frame_quaternions(normals),
                         opacity_logits=np.full((n, 1), logit(0.95)), colors=colors)


def _blob_cloud(spec: SceneSpec, rng) -> GaussianCloud:
    n = spec.count
    pos = rng.normal(scale=0.16, size=(n, 3))
    norm = np.linalg.norm(pos, axis=1, keepdims=True)
    pos = np.where(norm > 0.45, pos * 0.45 / np.maximum(norm, 1e-12), pos)
    scales = np.exp(rng.normal(np.log(0.04), 0.3, size=(n, 3)))
    q = rng.normal(size=(n, 4))
    q /= np.linalg.norm(q, axis=1, keepdims=True)
    dirs = rng.normal(size=(3, 3))
    phase = rng.uniform(0, 2 * np.pi, size=3)
    colors = 0.5 + 0.4 * np.sin(spec.frequency * 2 * np.pi * (pos @ dirs.T) + phase)
    return GaussianCloud(positions=pos, log_scales=np.log(scales), rotations=q,
                         opacity_logits=np.full((n, 1), logit(0.9)), colors=np.clip(colors, 0.02, 0.98))


def _box_cloud(spec: SceneSpec, rng) -> GaussianCloud:
    # four boxes on a 2x2 grid with different heights
    centers, sizes = [], []
    for ix in (-1, 1):
        for iy in (-1, 1):
            h = rng.uniform(0.2, 0.45)
            centers.append([0.17 * ix, 0.17 * iy, -0.25 + h / 2])
            sizes.append([0.26, 0.26, h])
    centers, sizes = np.array(centers), np.array(sizes)
    face_area = []
    for s in sizes:
        face_area += [s[1] * s[2], s[1] * s[2], s[0] * s[2], s[0] * s[2], s[0] * s[1], s[0] * s[1]]
    face_area = np.array(face_area)
    per_face = np.maximum(1, np.round(spec.count * face_area / face_area.sum())).astype(int)
    box_colors = rng.uniform(0.15, 0.85, size=(4, 3))
    pos, nrm, col, spc = [], [], [], []
    f = 0
    for b in range(4):
        c, s = centers[b], sizes[b]
        for axis in range(3):
            for sign in (-1.0, 1.0):
                m = per_face[f]
                f += 1
                uv = rng.uniform(-0.5, 0.5, size=(m, 2))
                p = np.empty((m, 3))
                others = [a for a in range(3) if a != axis]
                p[:, axis] = c[axis] + sign * s[axis] / 2
                p[:, others[0]] = c[others[0]] + uv[:, 0] * s[others[0]]
                p[:, others[1]] = c[others[1]] + uv[:, 1] * s[others[1]]
                n = np.zeros((m, 3))
                n[:, axis] = sign
                stripes = 0.5 + 0.5 * np.sign(np.sin(spec.frequency * np.pi * (p[:, others[0]] + p[:, others[1]]) / 0.26))
                col.append(np.clip(box_colors[b] * (0.6 + 0.4 * stripes[:, None]), 0.02, 0.98))
                pos.append(p)
                nrm.append(n)
                spc.append(np.full(m, np.sqrt(s[others[0]] * s[others[1]] / m)))
    pos, nrm, col, spc = map(np.concatenate, (pos, nrm, col, spc))
    scales = np.stack([spc * 0.8, spc * 0.8, spc * 0.15], axis=1)
    return GaussianCloud(positions=pos, log_scales=np.log(scales), rotations=_frame_quaternions(nrm),
                         opacity_logits=np.full((len(pos), 1), logit(0.95)), colors=col)


def scene_cloud(spec: SceneSpec) -> GaussianCloud:
    rng = np.random.default_rng(spec.seed)
    build = {"gaussian-blob": _blob_cloud, "textured-sphere": _sphere_cloud, "box-grid": _box_cloud}[spec.kind]
    cloud = build(spec, rng)
    cloud.check()
    return cloud


def training_poses(n_views: int) -> List[tuple]:
    """(azimuth, elevation) of the reference (0, 0) and evenly spaced auxiliary views."""
    poses = [(0.0, 0.0)]
    for k in range(1, n_views):
        az = 360.0 * k / n_views
        az = az - 360.0 if az > 180.0 else az
        poses.append((az, 20.0 if k % 2 else -10.0))
    return poses


def heldout_poses(n_views: int) -> List[tuple]:
    """Azimuths halfway between training azimuths, so the two sets never coincide."""
    poses = []
    for k in range(n_views):
        az = 360.0 * (k + 0.5) / n_views
        az = az - 360.0 if az > 180.0 else az
        poses.append((az, 10.0 if k % 2 else 0.0))
    return poses


def azimuth_group(camera: Camera, reference: Camera) -> str:
    d = (camera.azimuth - reference.azimuth + 180.0) % 360.0 - 180.0
    return "near" if abs(d) <= 90.0 else "far"


def _render_view(cloud, az, el, size, fov, radius, name) -> View:
    cam = camera_from_orbit(az, el, radius, fov, size, size)
    out = render(cloud, cam)
    return View(image=out.color, camera=cam, input_mask=(out.alpha > 0.5).astype(np.float64), name=name)


@dataclass
class SyntheticScene:
    spec: SceneSpec
    cloud: GaussianCloud
    views: ViewSet
    heldout: ViewSet
    image_size: int
    fov: float = 49.1
    radius: float = 2.0


def gen_scene(spec: SceneSpec, n_views: int = 8, n_heldout: int = 8, image_size: int = 320,
              fov: float = 49.1, radius: float = 2.0) -> SyntheticScene:
    """Ground-truth cloud plus clean training and held-out renders."""
    cloud = scene_cloud(spec)
    train = [_render_view(cloud, az, el, image_size, fov, radius, f"view{k}")
             for k, (az, el) in enumerate(training_poses(n_views))]
    held = [_render_view(cloud, az, el, image_size, fov, radius, f"heldout{k}")
            for k, (az, el) in enumerate(heldout_poses(n_heldout))]
    return SyntheticScene(spec, cloud, ViewSet(train), ViewSet(held), image_size, fov, radius)


# ----------------------------------------------------------------------------- corruption

@dataclass
class ViewCorruption:
    jitter: float = 0.0         # degrees of pose error
    noise: float = 0.0          # pixel noise standard deviation
    patches: int = 0            # hue-shift discs
    patch_radius: float = 0.08  # fraction of image width
    patch_shift: float = 0.0    # hue rotation as a fraction of a full turn

    def __post_init__(self):
        for f in dataclasses.fields(self):
            if getattr(self, f.name) < 0:
                raise ConfigError(f"corruption {f.name} must be >= 0")

    def is_identity(self) -> bool:
        return self.jitter == 0 and self.noise == 0 and (self.patches == 0 or self.patch_shift == 0)


@dataclass
class CorruptionSpec:
    views: Dict[int, ViewCorruption] = field(default_factory=dict)
    seed: int = 0

    def __post_init__(self):
        self.views = {int(k): (v if isinstance(v, ViewCorruption) else ViewCorruption(**v))
                      for k, v in self.views.items()}
        if 0 in self.views and not self.views[0].is_identity():
            raise ConfigError("the reference view cannot be corrupted")

    def for_view(self, k: int) -> ViewCorruption:
        return self.views.get(k, ViewCorruption())

    @classmethod
    def from_dict(cls, d: dict) -> "CorruptionSpec":
        unknown = set(d) - {"views", "seed"}
        if unknown:
            raise ConfigError(f"unknown corruption keys: {sorted(unknown)}")
        return cls(views={int(k): v for k, v in d.get("views", {}).items()}, seed=d.get("seed", 0))

    def to_dict(self) -> dict:
        return {"views": {str(k): dataclasses.asdict(v) for k, v in self.views.items()}, "seed": self.seed}


def experiment_corruption(n_views: int, corrupted: Sequence[int], noise: float = 0.3, falloff: float = 0.05,
                          seed: int = 0) -> CorruptionSpec:
    """Strong noise on ``corrupted`` views plus mild noise growing with azimuth
    distance from the reference, the way generated views degrade away from
    their conditioning image."""
    spec = {}
    for k, (az, _) in enumerate(training_poses(n_views)):
        if k == 0:
            continue
        sigma = falloff * abs(az) / 180.0
        if k in corrupted:
            sigma = noise
        if sigma > 0:
            spec[k] = ViewCorruption(noise=sigma)
    return CorruptionSpec(views=spec, seed=seed)


def hue_rotate(rgb: np.ndarray, turns: float) -> np.ndarray:
    """Rotate colors about the grey axis by ``turns`` of a full circle."""
    theta = 2 * np.pi * turns
    k = np.ones(3) / np.sqrt(3)
    K = np.array([[0, -k[2], k[1]], [k[2], 0, -k[0]], [-k[1], k[0], 0]])
    R = np.eye(3) + np.sin(theta) * K + (1 - np.cos(theta)) * K @ K
    return rgb @ R.T


def _apply_pixel_corruption(image, mask, c: ViewCorruption, rng) -> np.ndarray:
    out = image.copy()
    H, W = image.shape[:2]
    if c.patches > 0 and c.patch_shift > 0:
        fg = np.flatnonzero(mask.ravel() > 0) if mask is not None else np.arange(H * W)
        if fg.size == 0:
            fg = np.arange(H * W)
        yy, xx = np.mgrid[0:H, 0:W]
        for _ in range(c.patches):
            cy, cx = np.divmod(fg[rng.integers(fg.size)], W)
            disc = (yy - cy) ** 2 + (xx - cx) ** 2 <= (c.patch_radius * W) ** 2
            out[disc] = hue_rotate(out[disc], c.patch_shift)
    if c.noise > 0:
        out = out + rng.normal(scale=c.noise, size=out.shape)
    return np.clip(out, 0.0, 1.0)


def jitter_pose(camera: Camera, degrees: float, rng) -> Camera:
    phi = rng.uniform(0, 2 * np.pi)
    az = camera.azimuth + degrees * np.cos(phi)
    el = camera.elevation + degrees * np.sin(phi)
    r = float(np.linalg.norm(camera.center))
    fov = camera.vertical_fov
    return camera_from_orbit(az, el, r, fov, camera.width, camera.height, camera.near, camera.far)


def corrupt_views(views: ViewSet, spec: CorruptionSpec, cloud: Optional[GaussianCloud] = None) -> ViewSet:
    """Inconsistent copies of the auxiliary views; cameras and view 0 untouched.

    Geometric jitter re-renders from a perturbed pose and therefore needs the
    ground-truth ``cloud``.
    """
    out = []
    for k, v in enumerate(views):
        c = spec.for_view(k)
        if k == 0 or c.is_identity():
            out.append(dataclasses.replace(v))
            continue
        rng = np.random.default_rng([spec.seed, k])
        image = v.image
        if c.jitter > 0:
            if cloud is None:
                raise ContractError("geometric jitter needs the ground-truth cloud")
            image = render(cloud, jitter_pose(v.camera, c.jitter, rng)).color
        image = _apply_pixel_corruption(image, v.input_mask, c, rng)
        out.append(dataclasses.replace(v, image=image))
    return ViewSet(out)


# ----------------------------------------------------------------------------- metrics

def psnr(a: np.ndarray, b: np.ndarray) -> float:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"images differ in shape: {a.shape} vs {b.shape}")
    mse = float(np.mean((a - b) ** 2))
    if mse <= 10 ** (-PSNR_CAP / 10):
        return PSNR_CAP
    return min(PSNR_CAP, 10 * np.log10(1.0 / mse))


def ssim(a: np.ndarray, b: np.ndarray, window: int = 11, sigma: float = 1.5, k1: float = 0.01,
         k2: float = 0.03) -> float:
    """Mean SSIM over valid window positions, averaged over channels."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ContractError(f"images differ in shape: {a.shape} vs {b.shape}")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    g = gaussian_kernel(window, sigma)
    c1, c2 = k1**2, k2**2
    half = window // 2
    vals = []
    for ch in range(a.shape[2]):
        x, y = a[..., ch], b[..., ch]

        def blur(z):
            return ndimage.correlate(z, g, mode="constant")[half:-half, half:-half]

        mx, my = blur(x), blur(y)
        sxx = blur(x * x) - mx * mx
        syy = blur(y * y) - my * my
        sxy = blur(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        vals.append(s.mean())
    return float(np.mean(vals))


@dataclass
class MetricResult:
    psnr: float
    ssim: float
    per_view: List[dict] = field(default_factory=list)

    def group(self, name: str) -> Optional[dict]:
        rows = [r for r in self.per_view if r["group"] == name]
        if not rows:
            return None
        return {"psnr": float(np.mean([r["psnr"] for r in rows])),
                "ssim": float(np.mean([r["ssim"] for r in rows])), "count": len(rows)}


def evaluate(cloud: GaussianCloud, heldout: ViewSet, reference: Optional[Camera] = None,
             background=(0.0, 0.0, 0.0)) -> MetricResult:
    """PSNR/SSIM of ``cloud`` against every held-out view, tagged near/far."""
    ref = reference
    if ref is None:
        ref = camera_from_orbit(0.0, 0.0, 2.0, heldout[0].camera.vertical_fov, 1, 1)
    rows = []
    for v in heldout:
        out = render(cloud, v.camera, background)
        if out.color.shape != v.image.shape:
            raise ContractError("held-out image resolution does not match its camera")
        rows.append({"name": v.name, "azimuth": v.camera.azimuth, "group": azimuth_group(v.camera, ref),
                     "psnr": psnr(out.color, v.image), "ssim": ssim(out.color, v.image)})
    return MetricResult(psnr=float(np.mean([r["psnr"] for r in rows])),
                        ssim=float(np.mean([r["ssim"] for r in rows])), per_view=rows)


# ----------------------------------------------------------------------------- oracle

class SyntheticMVDOracle:
    """Stand-in for a multi-view diffusion prior.

    Its prediction for pose ``p`` conditioned on reference ``k`` is the
    ground-truth render at ``p``, blurred in proportion to the angle between
    ``p`` and camera ``k`` and carrying view ``k``'s corruption (fresh noise
    of the same strength, pose jitter). The returned score is
    ``w(t) * (rendered - prediction)``.
    """

    def __init__(self, cloud: GaussianCloud, cameras: Sequence[Camera], corruption: Optional[CorruptionSpec] = None,
                 blur_per_degree: float = 0.02, background=(0.0, 0.0, 0.0)):
        self.cloud = cloud
        self.cameras = list(cameras)
        self.corruption = corruption or CorruptionSpec()
        self.blur_per_degree = blur_per_degree
        self.background = background
        self._cache_key = None
        self._cache = {}

    def _clean(self, pose: Camera, jitter: float, seed: int) -> np.ndarray:
        key = (pose.world_to_camera.tobytes(), pose.width, pose.height)
        if key != self._cache_key:
            self._cache_key = key
            self._cache = {}
        jkey = (jitter, seed) if jitter > 0 else 0.0
        if jkey not in self._cache:
            cam = pose if jitter == 0 else jitter_pose(pose, jitter, np.random.default_rng(seed))
            self._cache[jkey] = render(self.cloud, cam, self.background).color
        return self._cache[jkey]

    def predict(self, pose: Camera, view_index: int, seed: int) -> np.ndarray:
        c = self.corruption.for_view(view_index)
        image = self._clean(pose, c.jitter, seed)
        ref = self.cameras[view_index]
        cosang = np.clip(pose.center @ ref.center / (np.linalg.norm(pose.center) * np.linalg.norm(ref.center)), -1, 1)
        angle = np.degrees(np.arccos(cosang))
        sigma = self.blur_per_degree * angle * pose.width / 320.0
        if sigma > 1e-3:
            image = ndimage.gaussian_filter(image, sigma=(sigma, sigma, 0), mode="nearest")
        if c.noise > 0:
            rng = np.random.default_rng([seed, view_index])
            image = np.clip(image + rng.normal(scale=c.noise, size=image.shape), 0.0, 1.0)
        return image

    def score(self, rendered, reference, t, pose, seed, view_index):
        if pose is None:
            raise ContractError("the synthetic oracle needs the sampled pose")
        return timestep_weight(t) * (rendered - self.predict(pose, view_index, seed))
