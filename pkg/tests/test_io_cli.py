import json

import numpy as np
import pytest

from helpers import random_cloud
from splatrisk import io
from splatrisk.cli import main
from splatrisk.harness import SceneSpec, scene_cloud
from splatrisk.optimizer import RunReport
from splatrisk.scene import ParameterError, activate


def test_ply_layout_and_values(tmp_path, rng):
    cloud = random_cloud(rng, 7)
    path = io.write_ply(tmp_path / "c.ply", cloud)
    raw = path.read_bytes()
    header = raw[: raw.index(b"end_header\n")].decode().splitlines()
    assert header[1] == "format binary_little_endian 1.0"
    assert header[2] == "element vertex 7"
    assert [l.split()[-1] for l in header if l.startswith("property")] == list(io.PLY_FIELDS)
    assert len(raw) - raw.index(b"end_header\n") - len(b"end_header\n") == 7 * 14 * 4
    back = io.read_ply(path)
    act = activate(cloud)
    for f in ("positions", "scales", "rotations", "opacities", "colors"):
        assert np.allclose(getattr(back, f), getattr(act, f), atol=1e-6)


def test_checkpoint_round_trip_is_exact(tmp_path, rng):
    cloud = random_cloud(rng, 9)
    io.save_checkpoint(tmp_path / "k.json", cloud, 123, 7, extra={"note": 1})
    back, it, seed, extra = io.load_checkpoint(tmp_path / "k.json")
    assert np.array_equal(back.flat(), cloud.flat())
    assert (it, seed, extra) == (123, 7, {"note": 1})
    (tmp_path / "bad.json").write_text("{}")
    with pytest.raises(ParameterError):
        io.load_checkpoint(tmp_path / "bad.json")


def test_png_round_trip(tmp_path, rng):
    img = rng.uniform(size=(5, 6, 3))
    back = io.read_png(io.write_png(tmp_path / "a.png", img))
    assert back.shape == img.shape
    assert np.max(np.abs(back - img)) <= 0.5 / 255 + 1e-12


def test_report_csv(tmp_path):
    rep = RunReport(2)
    rep.log_row(0, 1.5, np.array([1.0, 2.0, 3.0, 4.0]), np.full(4, 0.25), np.array([0.1, 0.2, 0.3, 0.4]), 10)
    rep.write_csv(tmp_path / "r.csv")
    text = (tmp_path / "r.csv").read_text().splitlines()
    assert "loss_g0" in text[0] and "weight_t1" in text[0] and "risk_g1" in text[0]
    assert len(text) == 2


SPEC = {"kind": "gaussian-blob", "count": 60, "frequency": 2.0}
TINY_CFG = {"n_init": 80, "coarse_iters": 10, "iterations": 12, "sds_resolutions": [24], "max_gaussians": 200,
            "densify_every": 5, "opacity_reset_every": 0, "floater_every": 0, "warmup_iters": 5,
            "weight_update_every": 3, "checkpoint_every": 6}


@pytest.fixture(scope="module")
def run_dir(tmp_path_factory):
    root = tmp_path_factory.mktemp("cli")
    (root / "scene.json").write_text(json.dumps(SPEC))
    (root / "corr.json").write_text(json.dumps({"views": {"2": {"noise": 0.3}}}))
    (root / "cfg.json").write_text(json.dumps(TINY_CFG))
    rc = main(["gen", "--spec", str(root / "scene.json"), "--corruption", str(root / "corr.json"), "--seed", "7",
               "--out", str(root / "run"), "--image-size", "24"])
    assert rc == 0
    return root


def test_gen_outputs(run_dir):
    run = run_dir / "run"
    assert len(list((run / "images").glob("*.png"))) == 16
    manifest = json.loads((run / "manifest.json").read_text())
    assert manifest["seed"] == 7
    paths = {a["path"] for a in manifest["artifacts"]}
    assert {"views.npz", "heldout.npz", "ground_truth.json", "scene.json", "corruption.json"} <= paths
    for a in manifest["artifacts"]:
        assert a["sha256"] == io.sha256(run / a["path"])


def test_gen_rerun_same_manifest(run_dir, tmp_path):
    args = ["gen", "--spec", str(run_dir / "scene.json"), "--corruption", str(run_dir / "corr.json"), "--seed", "7",
            "--image-size", "24", "--out"]
    assert main(args + [str(tmp_path / "again")]) == 0
    a = (run_dir / "run" / "manifest.json").read_bytes()
    b = (tmp_path / "again" / "manifest.json").read_bytes()
    assert a == b


def test_gen_missing_spec(tmp_path, capsys):
    assert main(["gen", "--spec", str(tmp_path / "nope.json"), "--out", str(tmp_path / "o")]) == 2
    assert "nope.json" in capsys.readouterr().err


def _optimize(run_dir, *extra):
    return main(["optimize", "--run", str(run_dir / "run"), "--config", str(run_dir / "cfg.json"), *extra])


def test_optimize_outputs_and_eval(run_dir):
    assert _optimize(run_dir) == 0
    out = run_dir / "run" / "optimize"
    for name in ("final.json", "coarse.json", "cloud.ply", "report.csv", "report.json", "checkpoint_00006.json"):
        assert (out / name).is_file(), name
    assert main(["eval", "--run", str(run_dir / "run"), "--turntable", "2"]) == 0
    ev = run_dir / "run" / "eval"
    assert (ev / "weights.png").is_file() and (ev / "risks.png").is_file()
    assert (ev / "turntable_001.png").is_file()
    rows = [l.split(",") for l in (ev / "metrics.csv").read_text().splitlines()[1:]]
    per_view = [r for r in rows if r[5] == "1"]
    agg = [r for r in rows if r[0] == "all"][0]
    assert float(agg[3]) == pytest.approx(np.mean([float(r[3]) for r in per_view]), abs=1e-12)
    groups = [r for r in rows if r[0].startswith("group:")]
    assert sum(int(r[5]) for r in groups) == len(per_view) == 8
    # every artifact is registered in the manifest
    paths = {a["path"] for a in json.loads((run_dir / "run" / "manifest.json").read_text())["artifacts"]}
    assert {"optimize/final.json", "optimize/cloud.ply", "eval/metrics.csv"} <= paths


def test_optimize_uniform_differs_after_warmup(run_dir):
    assert _optimize(run_dir, "--name", "adaptive") == 0
    assert _optimize(run_dir, "--uniform-weights", "--name", "uniform") == 0
    import csv

    def rows(name):
        with open(run_dir / "run" / name / "report.csv") as f:
            return list(csv.DictReader(f))

    a, u = rows("adaptive"), rows("uniform")
    wcols = [c for c in a[0] if c.startswith("weight_")]
    for ra, ru in zip(a, u):
        same = all(ra[c] == ru[c] for c in wcols)
        if int(ra["iteration"]) <= TINY_CFG["warmup_iters"]:
            assert same and ra == ru
    assert not all(all(ra[c] == ru[c] for c in wcols) for ra, ru in zip(a, u))


def test_optimize_iters_zero_is_coarse(run_dir):
    assert _optimize(run_dir, "--iters", "0", "--name", "zero") == 0
    out = run_dir / "run" / "zero"
    final, _, _, _ = io.load_checkpoint(out / "final.json")
    coarse, _, _, _ = io.load_checkpoint(out / "coarse.json")
    assert np.array_equal(final.flat(), coarse.flat())


def test_optimize_rejections(run_dir, tmp_path):
    assert _optimize(run_dir, "--no-gao", "--no-tao") == 2
    assert main(["optimize", "--run", str(tmp_path)]) == 2
    (tmp_path / "manifest.json").write_text("[1, 2]")
    assert main(["optimize", "--run", str(tmp_path)]) == 2
    (run_dir / "badcfg.json").write_text(json.dumps({"bogus": 1}))
    assert main(["optimize", "--run", str(run_dir / "run"), "--config", str(run_dir / "badcfg.json")]) == 2


def test_eval_missing_checkpoint(run_dir):
    assert main(["eval", "--run", str(run_dir / "run"), "--checkpoint", "missing.json"]) == 2


def test_eval_ground_truth_is_perfect(run_dir):
    ckpt = run_dir / "run" / "ground_truth.json"
    assert main(["eval", "--run", str(run_dir / "run"), "--checkpoint", str(ckpt), "--name", "gt",
                 "--no-plots"]) == 0
    rows = (run_dir / "run" / "gt" / "metrics.csv").read_text().splitlines()[1:]
    assert all(float(r.split(",")[3]) == 99.0 for r in rows)


def test_export_ply(run_dir, tmp_path):
    ckpt = run_dir / "run" / "ground_truth.json"
    assert main(["export-ply", "--checkpoint", str(ckpt), "--out", str(tmp_path / "gt.ply")]) == 0
    assert len(io.read_ply(tmp_path / "gt.ply")) == len(scene_cloud(SceneSpec(**SPEC, seed=7)))
    assert main(["export-ply", "--checkpoint", str(tmp_path / "nope.json"), "--out", "x.ply"]) == 2


def test_threads_env(run_dir, monkeypatch):
    monkeypatch.setenv("ERGO_THREADS", "zero")
    assert main(["export-ply", "--checkpoint", str(run_dir / "run" / "ground_truth.json"), "--out",
                 str(run_dir / "t.ply")]) == 2
    monkeypatch.setenv("ERGO_THREADS", "1")
    assert main(["export-ply", "--checkpoint", str(run_dir / "run" / "ground_truth.json"), "--out",
                 str(run_dir / "t.ply")]) == 0


def test_bad_usage_exit_code():
    assert main(["frobnicate"]) == 2
    assert main(["gen"]) == 2
