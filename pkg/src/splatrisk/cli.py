"""Command-line entry point: ``gen``, ``optimize``, ``eval`` and ``export-ply``.

Exit codes: 0 success, 2 usage or configuration error, 1 runtime failure.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from . import io
from .harness import CorruptionSpec, SceneSpec, SyntheticMVDOracle, corrupt_views, evaluate, gen_scene
from .optimizer import run
from .renderer import ContractError, render
from .scene import Config, ConfigError, ParameterError, camera_from_orbit

log = logging.getLogger("splatrisk")


class UsageError(Exception):
    """Bad arguments or inputs; maps to exit code 2."""


PRESETS = {
    "full": {},
    # 2000 Gaussians at 128 px for 600 iterations, one geometry view per step;
    # maintenance cadences shrink with the run length (600 / 1500)
    "reduced": dict(n_init=2000, image_size=128, iterations=600, coarse_iters=200, views_per_step=1,
                    sds_resolutions=(64, 96, 128, 160), max_gaussians=2000,
                    densify_every=40, opacity_reset_every=200, floater_every=160, warmup_iters=40),
}


def preset_config(name: str = "full", **overrides) -> Config:
    if name not in PRESETS:
        raise ConfigError(f"unknown preset {name!r}")
    return Config(**{**PRESETS[name], **overrides})


def _read_json(path, what: str) -> dict:
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{what} not found: {path}")
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as e:
        raise UsageError(f"{what} {path} is not valid JSON: {e}") from None
    if not isinstance(doc, dict):
        raise UsageError(f"{what} {path} must hold a JSON object")
    return doc


def _apply_threads():
    raw = os.environ.get("ERGO_THREADS")
    if raw is None:
        return
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"ERGO_THREADS must be a positive integer, got {raw!r}") from None
    if n < 1:
        raise UsageError(f"ERGO_THREADS must be a positive integer, got {raw!r}")
    import numba
    numba.set_num_threads(min(n, numba.config.NUMBA_NUM_THREADS))


# ----------------------------------------------------------------------------- gen

def cmd_gen(args) -> int:
    spec_doc = _read_json(args.spec, "scene spec")
    if args.seed is not None:
        spec_doc["seed"] = args.seed
    spec = SceneSpec.from_dict(spec_doc)
    if args.corruption:
        corr_doc = _read_json(args.corruption, "corruption spec")
        corr_doc.setdefault("seed", spec.seed)
        if args.seed is not None:
            corr_doc["seed"] = args.seed
        corruption = CorruptionSpec.from_dict(corr_doc)
    else:
        corruption = CorruptionSpec(seed=spec.seed)

    out = io.ensure_dir(args.out)
    scene = gen_scene(spec, n_views=args.views, n_heldout=args.heldout, image_size=args.image_size)
    views = corrupt_views(scene.views, corruption, scene.cloud)

    m = io.Manifest(out, spec.seed, meta={"command": "gen", "image_size": args.image_size,
                                          "n_views": args.views, "n_heldout": args.heldout})
    (out / "scene.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n")
    (out / "corruption.json").write_text(json.dumps(corruption.to_dict(), indent=2, sort_keys=True) + "\n")
    m.add(out / "scene.json", kind="scene-spec")
    m.add(out / "corruption.json", seed=corruption.seed, kind="corruption-spec")
    m.add(io.save_checkpoint(out / "ground_truth.json", scene.cloud, 0, spec.seed), kind="ground-truth")
    m.add(io.save_viewset(out / "views.npz", views), seed=corruption.seed, kind="views")
    m.add(io.save_viewset(out / "heldout.npz", scene.heldout), kind="heldout")
    img_dir = io.ensure_dir(out / "images")
    for k, v in enumerate(views):
        m.add(io.write_png(img_dir / f"train_{k:02d}.png", v.image), seed=corruption.seed, kind="image")
    for k, v in enumerate(scene.heldout):
        m.add(io.write_png(img_dir / f"heldout_{k:02d}.png", v.image), kind="image")
    path = m.write()
    print(f"wrote {len(m.artifacts)} artifacts to {out} ({path.name})")
    return 0


# ----------------------------------------------------------------------------- optimize

def _load_run(run_dir):
    run_dir = Path(run_dir)
    if not (run_dir / io.MANIFEST_NAME).is_file():
        raise UsageError(f"no manifest in {run_dir}")
    try:
        m = io.Manifest.load(run_dir)
    except (ParameterError, json.JSONDecodeError, KeyError) as e:
        raise UsageError(f"invalid manifest in {run_dir}: {e}") from None
    need = {kind: m.find(kind) for kind in ("views", "heldout", "ground-truth", "corruption-spec")}
    missing = [k for k, v in need.items() if not v]
    if missing:
        raise UsageError(f"manifest in {run_dir} lists no {', '.join(missing)}")
    return m, {k: v[0] for k, v in need.items()}


def build_config(args, seed: int) -> Config:
    base = _read_json(args.config, "config file") if args.config else {}
    cfg = preset_config(args.preset).to_dict()
    cfg.update(base)
    # the run's seed unless the config file or --seed names another
    cfg["seed"] = args.seed if args.seed is not None else base.get("seed", seed)
    if args.iters is not None:
        cfg["iterations"] = args.iters
    if args.eta is not None:
        cfg["eta"] = args.eta
    if args.uniform_weights:
        cfg["adaptive"] = False
    if args.baseline:
        cfg.update(use_gao=False, use_tao=False, adaptive=False)
    if args.no_gao:
        cfg["use_gao"] = False
    if args.no_tao:
        cfg["use_tao"] = False
    return Config.from_dict(cfg)


def cmd_optimize(args) -> int:
    if args.no_gao and args.no_tao:
        raise UsageError("--no-gao together with --no-tao leaves no objective to optimize")
    m, files = _load_run(args.run)
    config = build_config(args, m.seed)
    views = io.load_viewset(files["views"])
    gt, _, _, _ = io.load_checkpoint(files["ground-truth"])
    corruption = CorruptionSpec.from_dict(json.loads(files["corruption-spec"].read_text()))
    oracle = SyntheticMVDOracle(gt, views.cameras, corruption)

    out = io.ensure_dir(m.root / args.name)
    (out / "config.json").write_text(json.dumps(config.to_dict(), indent=2, sort_keys=True) + "\n")
    m.add(out / "config.json", seed=config.seed, kind="config")

    def checkpoint(cloud, it):
        m.add(io.save_checkpoint(out / f"checkpoint_{it:05d}.json", cloud, it, config.seed), seed=config.seed,
              kind="checkpoint")

    log.info("optimizing %d views for %d iterations", len(views), config.iterations)
    result = run(views, oracle, config, checkpoint=checkpoint)
    add = lambda p, kind: m.add(p, seed=config.seed, kind=kind)
    add(io.save_checkpoint(out / "coarse.json", result.coarse, 0, config.seed), "coarse")
    add(io.save_checkpoint(out / "final.json", result.cloud, config.iterations, config.seed,
                           extra={"weights": result.weights.weights.tolist()}), "final")
    add(io.write_ply(out / "cloud.ply", result.cloud), "ply")
    add(result.report.write_csv(out / "report.csv"), "report")
    add(result.report.write_json(out / "report.json"), "summary")
    m.write()
    print(f"optimized {len(result.cloud)} Gaussians; outputs in {out}")
    return 0


# ----------------------------------------------------------------------------- eval

METRIC_FIELDS = ("name", "azimuth", "group", "psnr", "ssim", "count")


def write_metrics(path, metrics) -> Path:
    with open(path, "w", newline="") as f:
        w = csv.DictWriter(f, fieldnames=METRIC_FIELDS)
        w.writeheader()
        for r in metrics.per_view:
            w.writerow({**r, "psnr": repr(float(r["psnr"])), "ssim": repr(float(r["ssim"])), "count": 1})
        for g in ("near", "far"):
            s = metrics.group(g)
            if s is not None:
                w.writerow({"name": f"group:{g}", "azimuth": "", "group": g, "psnr": repr(s["psnr"]),
                            "ssim": repr(s["ssim"]), "count": s["count"]})
        w.writerow({"name": "all", "azimuth": "", "group": "all", "psnr": repr(metrics.psnr),
                    "ssim": repr(metrics.ssim), "count": len(metrics.per_view)})
    return Path(path)


def plot_report(report_csv, out_dir) -> list:
    """Per-iteration weight and risk curves as PNG files."""
    import matplotlib
    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    with open(report_csv, newline="") as f:
        rows = list(csv.DictReader(f))
    if not rows:
        return []
    its = np.array([float(r["iteration"]) for r in rows])
    written = []
    for prefix, ylabel, log_y in (("weight_", "simplex weight", False), ("risk_", "excess risk", True)):
        names = [c for c in rows[0] if c.startswith(prefix)]
        fig, ax = plt.subplots(figsize=(7, 4))
        for c in names:
            y = np.array([float(r[c]) if r[c] not in ("", "nan") else np.nan for r in rows])
            ax.plot(its, y, label=c[len(prefix):], lw=1.2, ls="-" if c[len(prefix)] == "g" else "--")
        if log_y:
            ax.set_yscale("symlog", linthresh=1e-6)
        ax.set_xlabel("iteration")
        ax.set_ylabel(ylabel)
        ax.legend(ncol=4, fontsize=7)
        fig.tight_layout()
        path = Path(out_dir) / f"{prefix.rstrip('_')}s.png"
        fig.savefig(path, dpi=100)
        plt.close(fig)
        written.append(path)
    return written


def cmd_eval(args) -> int:
    m, files = _load_run(args.run)
    ckpt = Path(args.checkpoint) if args.checkpoint else m.root / "optimize" / "final.json"
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    try:
        cloud, _, seed, _ = io.load_checkpoint(ckpt)
    except (ParameterError, json.JSONDecodeError, KeyError) as e:
        raise UsageError(f"unreadable checkpoint {ckpt}: {e}") from None
    heldout = io.load_viewset(files["heldout"])
    metrics = evaluate(cloud, heldout)

    out = io.ensure_dir(m.root / args.name)
    m.add(write_metrics(out / "metrics.csv", metrics), seed=seed, kind="metrics")
    report = ckpt.parent / "report.csv"
    if args.plots and report.is_file():
        for p in plot_report(report, out):
            m.add(p, seed=seed, kind="plot")
    if args.turntable > 0:
        cam0 = heldout[0].camera
        radius = float(np.linalg.norm(cam0.center))
        for i in range(args.turntable):
            az = -180.0 + 360.0 * i / args.turntable
            cam = camera_from_orbit(az, 15.0, radius, cam0.vertical_fov, cam0.width, cam0.height)
            m.add(io.write_png(out / f"turntable_{i:03d}.png", render(cloud, cam).color), seed=seed, kind="turntable")
    m.write()
    near, far = metrics.group("near"), metrics.group("far")
    print(f"PSNR {metrics.psnr:.2f} dB  SSIM {metrics.ssim:.4f}"
          + (f"  near {near['psnr']:.2f}" if near else "") + (f"  far {far['psnr']:.2f}" if far else ""))
    return 0


# ----------------------------------------------------------------------------- export-ply

def cmd_export_ply(args) -> int:
    ckpt = Path(args.checkpoint)
    if not ckpt.is_file():
        raise UsageError(f"checkpoint not found: {ckpt}")
    try:
        cloud, _, _, _ = io.load_checkpoint(ckpt)
    except (ParameterError, json.JSONDecodeError, KeyError) as e:
        raise UsageError(f"unreadable checkpoint {ckpt}: {e}") from None
    path = io.write_ply(args.out, cloud)
    print(f"wrote {len(cloud)} Gaussians to {path}")
    return 0


# ----------------------------------------------------------------------------- parser

def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="splatrisk", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("gen", help="render a synthetic scene and its (corrupted) views")
    g.add_argument("--spec", required=True, help="scene spec JSON (kind, count, frequency, seed)")
    g.add_argument("--corruption", help="corruption spec JSON (views: {index: {...}}, seed)")
    g.add_argument("--seed", type=int, help="overrides the seeds in both spec files")
    g.add_argument("--out", required=True)
    g.add_argument("--views", type=int, default=8, help="training views including the reference")
    g.add_argument("--heldout", type=int, default=8)
    g.add_argument("--image-size", type=int, default=320)
    g.set_defaults(func=cmd_gen)

    o = sub.add_parser("optimize", help="coarse fit then the weighted main loop")
    o.add_argument("--run", required=True, help="run directory written by gen")
    o.add_argument("--config", help="JSON file of Config fields; flags below win")
    o.add_argument("--preset", choices=sorted(PRESETS), default="full")
    o.add_argument("--iters", type=int)
    o.add_argument("--eta", type=float)
    o.add_argument("--seed", type=int)
    o.add_argument("--uniform-weights", action="store_true", help="freeze the simplex at uniform")
    o.add_argument("--no-gao", action="store_true", help="plain photometric geometry objective")
    o.add_argument("--no-tao", action="store_true", help="plain texture objective")
    o.add_argument("--baseline", action="store_true", help="plain objectives with uniform weights")
    o.add_argument("--name", default="optimize", help="output subdirectory")
    o.set_defaults(func=cmd_optimize)

    e = sub.add_parser("eval", help="held-out PSNR/SSIM split by azimuth group")
    e.add_argument("--run", required=True)
    e.add_argument("--checkpoint", help="defaults to <run>/optimize/final.json")
    e.add_argument("--name", default="eval")
    e.add_argument("--turntable", type=int, default=0, help="number of turntable frames to render")
    e.add_argument("--no-plots", dest="plots", action="store_false")
    e.set_defaults(func=cmd_eval)

    x = sub.add_parser("export-ply", help="write a checkpoint as a 3DGS-layout PLY")
    x.add_argument("--checkpoint", required=True)
    x.add_argument("--out", required=True)
    x.set_defaults(func=cmd_export_ply)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as e:
        return int(e.code or 0)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    try:
        _apply_threads()
        return args.func(args)
    except (UsageError, ConfigError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 2
    except (ContractError, ParameterError, OSError, RuntimeError, ValueError) as e:
        print(f"error: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
