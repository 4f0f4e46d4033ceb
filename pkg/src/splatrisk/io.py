"""On-disk formats: PLY export, JSON checkpoints, view sets, PNGs and run manifests."""

from __future__ import annotations

import hashlib
import json
import os
from pathlib import Path
from typing import Optional

import numpy as np
from PIL import Image

from .optimizer import View, ViewSet
from .scene import PARAM_FIELDS, ActivatedGaussians, Camera, GaussianCloud, ParameterError, activate

PLY_FIELDS = ("x", "y", "z", "opacity", "scale_0", "scale_1", "scale_2",
              "rot_0", "rot_1", "rot_2", "rot_3", "f_dc_0", "f_dc_1", "f_dc_2")

CHECKPOINT_FORMAT = "splatrisk-checkpoint/1"
MANIFEST_NAME = "manifest.json"


def write_ply(path, cloud) -> Path:
    """Binary little-endian PLY of the activated cloud, one float32 per field."""
    act = activate(cloud)
    cols = np.concatenate([act.positions, act.opacities[:, None], act.scales, act.rotations, act.colors], axis=1)
    header = ["ply", "format binary_little_endian 1.0", f"element vertex {len(act)}"]
    header += [f"property float {name}" for name in PLY_FIELDS]
    header.append("end_header")
    path = Path(path)
    with open(path, "wb") as f:
        f.write(("\n".join(header) + "\n").encode("ascii"))
        f.write(cols.astype("<f4").tobytes())
    return path


def read_ply(path) -> ActivatedGaussians:
    with open(path, "rb") as f:
        data = f.read()
    end = data.find(b"end_header\n")
    if end < 0:
        raise ParameterError(f"{path}: no PLY header")
    lines = data[:end].decode("ascii").splitlines()
    if "format binary_little_endian 1.0" not in lines:
        raise ParameterError(f"{path}: only binary little-endian PLY is supported")
    n = next(int(l.split()[-1]) for l in lines if l.startswith("element vertex"))
    names = [l.split()[-1] for l in lines if l.startswith("property")]
    if tuple(names) != PLY_FIELDS:
        raise ParameterError(f"{path}: unexpected vertex layout {names}")
    cols = np.frombuffer(data[end + len(b"end_header\n"):], dtype="<f4", count=n * len(names))
    cols = cols.reshape(n, len(names)).astype(np.float64)
    return ActivatedGaussians(positions=cols[:, 0:3], opacities=cols[:, 3], scales=cols[:, 4:7],
                              rotations=cols[:, 7:11], colors=cols[:, 11:14])


def save_checkpoint(path, cloud: GaussianCloud, iteration: int, seed: int, extra: Optional[dict] = None) -> Path:
    """Raw parameters as nested lists; floats round-trip exactly through ``repr``."""
    doc = {
        "format": CHECKPOINT_FORMAT,
        "iteration": int(iteration),
        "seed": int(seed),
        "n_gaussians": len(cloud),
        "params": {name: getattr(cloud, name).tolist() for name in PARAM_FIELDS},
    }
    if extra:
        doc["extra"] = extra
    path = Path(path)
    path.write_text(json.dumps(doc))
    return path


def load_checkpoint(path):
    """Returns ``(cloud, iteration, seed, extra)``."""
    doc = json.loads(Path(path).read_text())
    if doc.get("format") != CHECKPOINT_FORMAT:
        raise ParameterError(f"{path}: not a checkpoint")
    params = {}
    for name in PARAM_FIELDS:
        arr = np.asarray(doc["params"][name], dtype=np.float64)
        params[name] = arr.reshape(doc["n_gaussians"], -1)
    cloud = GaussianCloud(**params)
    cloud.check()
    return cloud, doc["iteration"], doc["seed"], doc.get("extra", {})


def write_png(path, image: np.ndarray) -> Path:
    img = np.clip(np.asarray(image, dtype=np.float64), 0.0, 1.0)
    img = np.round(img * 255.0).astype(np.uint8)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    Image.fromarray(img).save(path, format="PNG")
    return Path(path)


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(path), dtype=np.float64) / 255.0


def save_viewset(path, views: ViewSet) -> Path:
    """Float images, input masks and cameras in one ``.npz``; PNGs are for viewing only."""
    arrays = {"images": np.stack([v.image for v in views])}
    if all(v.input_mask is not None for v in views):
        arrays["input_masks"] = np.stack([v.input_mask for v in views])
    arrays["cameras"] = np.array(json.dumps([v.camera.to_dict() for v in views]))
    arrays["names"] = np.array([v.name for v in views])
    np.savez_compressed(path, **arrays)
    return Path(path)


def load_viewset(path) -> ViewSet:
    with np.load(path) as z:
        images = z["images"]
        masks = z["input_masks"] if "input_masks" in z else None
        cams = [Camera.from_dict(d) for d in json.loads(str(z["cameras"]))]
        names = [str(n) for n in z["names"]]
    views = []
    for k, cam in enumerate(cams):
        views.append(View(image=images[k], camera=cam, input_mask=None if masks is None else masks[k], name=names[k]))
    return ViewSet(views)


def sha256(path) -> str:
    h = hashlib.sha256()
    with open(path, "rb") as f:
        for chunk in iter(lambda: f.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


class Manifest:
    """Artifacts of a run directory with their seeds and content hashes.

    Paths are stored relative to the run directory. The manifest holds no
    timestamps, so identical inputs give an identical file.
    """

    def __init__(self, root, seed: int, meta: Optional[dict] = None):
        self.root = Path(root)
        self.seed = int(seed)
        self.meta = dict(meta or {})
        self.artifacts = []

    def add(self, path, seed: Optional[int] = None, kind: str = ""):
        rel = Path(path).resolve().relative_to(self.root.resolve()).as_posix()
        self.artifacts = [a for a in self.artifacts if a["path"] != rel]
        self.artifacts.append({"path": rel, "kind": kind, "seed": self.seed if seed is None else int(seed),
                               "sha256": sha256(path)})

    def find(self, kind: str) -> list:
        return [self.root / a["path"] for a in self.artifacts if a["kind"] == kind]

    def to_dict(self) -> dict:
        return {"seed": self.seed, "meta": self.meta, "artifacts": sorted(self.artifacts, key=lambda a: a["path"])}

    def write(self) -> Path:
        path = self.root / MANIFEST_NAME
        path.write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n")
        return path

    @classmethod
    def load(cls, root) -> "Manifest":
        root = Path(root)
        path = root / MANIFEST_NAME if root.is_dir() else root
        doc = json.loads(path.read_text())
        if not isinstance(doc, dict) or "artifacts" not in doc or "seed" not in doc:
            raise ParameterError(f"{path}: not a run manifest")
        m = cls(path.parent, doc["seed"], doc.get("meta"))
        m.artifacts = list(doc["artifacts"])
        for a in m.artifacts:
            if not (m.root / a["path"]).exists():
                raise ParameterError(f"{path}: listed artifact {a['path']} is missing")
        return m


def ensure_dir(path) -> Path:
    path = Path(path)
    os.makedirs(path, exist_ok=True)
    return path
