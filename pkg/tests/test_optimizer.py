import numpy as np
import pytest

from helpers import random_cloud
from splatrisk.harness import SceneSpec, gen_scene, psnr
from splatrisk.optimizer import (OptimizerState, RunReport, ViewSet, build_pseudo_ground_truth, coarse_stage,
                                 densify_and_prune, normalize_risks, remove_floaters, run, sds_resolution, step)
from splatrisk.renderer import render
from splatrisk.risk import WeightSimplex
from splatrisk.scene import Config, GaussianCloud, logit
from splatrisk.texture import ResidualOracle

TINY = dict(n_init=150, coarse_iters=30, iterations=30, image_size=32, sds_resolutions=(24, 32),
            max_gaussians=400, densify_every=10, opacity_reset_every=25, floater_every=20, warmup_iters=10,
            weight_update_every=5)


@pytest.fixture(scope="module")
def tiny_scene():
    return gen_scene(SceneSpec("gaussian-blob", count=40, seed=3), n_views=4, n_heldout=4, image_size=32)


def fresh_views(scene):
    return ViewSet([type(v)(image=v.image, camera=v.camera, input_mask=v.input_mask, name=v.name)
                    for v in scene.views])


def test_coarse_fit_quality():
    scene = gen_scene(SceneSpec("gaussian-blob", count=50, seed=0), n_views=8, image_size=48)
    cfg = Config(n_init=600, coarse_iters=150, max_gaussians=2000, views_per_step=2)
    cloud = coarse_stage(scene.views, cfg)
    scores = [psnr(render(cloud, v.camera).color, v.image) for v in scene.views]
    assert np.mean(scores) >= 25.0


def test_reference_maps_are_ones(tiny_scene):
    views = fresh_views(tiny_scene)
    coarse_stage(views, Config(**TINY))
    assert np.all(views[0].visibility == 1) and np.all(views[0].discrepancy == 1)
    for v in views:
        assert v.depth.shape == v.mask.shape == v.visibility.shape == (32, 32)


def test_single_auxiliary_chain(tiny_scene):
    views = ViewSet([fresh_views(tiny_scene)[k] for k in (0, 1)])
    cloud = random_cloud(np.random.default_rng(0), 30)
    build_pseudo_ground_truth(cloud, views, Config(**TINY))
    assert views.chain() == [0, 1]
    assert np.all(views[0].visibility == 1)
    assert views[1].visibility.shape == (32, 32)


def test_sds_resolution_stages():
    cfg = Config()
    got = [sds_resolution(cfg, it, 1500) for it in (0, 374, 375, 749, 750, 1125, 1499)]
    assert got == [128, 128, 256, 256, 384, 512, 512]


def _prepared(scene, **kw):
    views = fresh_views(scene)
    cfg = Config(**{**TINY, **kw})
    cloud = coarse_stage(views, cfg)
    return views, cfg, cloud


def test_zero_texture_weights_is_geometry_only(tiny_scene):
    views, cfg, cloud = _prepared(tiny_scene)
    w = WeightSimplex(np.r_[np.full(4, 0.25), np.zeros(4)])
    a, b = cloud.copy(), cloud.copy()
    step(OptimizerState.fresh(a, 10, 0), a, views, w, ResidualOracle(), cfg)
    step(OptimizerState.fresh(b, 10, 0), b, views, w, ResidualOracle(), cfg.replace(lambda_t=0.0))
    assert np.array_equal(a.flat(), b.flat())


def test_one_view_weight_ignores_others(tiny_scene):
    views, cfg, cloud = _prepared(tiny_scene)
    w = WeightSimplex(np.eye(8)[1])
    a, b = cloud.copy(), cloud.copy()
    step(OptimizerState.fresh(a, 10, 0), a, views, w, ResidualOracle(), cfg)
    for k in (0, 2, 3):
        views[k].image = np.random.default_rng(k).uniform(size=views[k].image.shape)
    step(OptimizerState.fresh(b, 10, 0), b, views, w, ResidualOracle(), cfg)
    assert np.array_equal(a.flat(), b.flat())


def test_step_rolls_back_on_nan(tiny_scene):
    views, cfg, cloud = _prepared(tiny_scene)

    class NaNOracle:
        def score(self, rendered, reference, t, pose, seed, view_index):
            return np.full(rendered.shape, np.nan)

    before = cloud.flat().copy()
    cloud, info = step(OptimizerState.fresh(cloud, 10, 0), cloud, views, WeightSimplex.uniform(4), NaNOracle(), cfg)
    assert info.rolled_back
    assert np.array_equal(cloud.flat(), before)


def _hot_state(cloud, hot_idx, value=1.0):
    state = OptimizerState.fresh(cloud, 10, 0)
    state.grad_accum[hot_idx] = value
    state.grad_denom[hot_idx] = 1
    return state


def test_densify_no_triggers_only_prunes():
    cloud = random_cloud(np.random.default_rng(0), 10)
    cloud.opacity_logits[:] = logit(0.5)
    cloud.opacity_logits[3] = logit(0.001)
    out = densify_and_prune(cloud, OptimizerState.fresh(cloud, 10, 0), Config())
    assert len(out) == 9
    assert np.array_equal(out.positions, np.delete(cloud.positions, 3, axis=0))


def test_split_adds_exactly_one():
    cloud = random_cloud(np.random.default_rng(0), 5)
    cloud.opacity_logits[:] = logit(0.5)
    cloud.log_scales[:] = np.log(0.005)
    cloud.log_scales[2] = np.log(0.2)  # large: split
    out = densify_and_prune(cloud, _hot_state(cloud, [2]), Config())
    assert len(out) == 6
    assert np.allclose(np.exp(out.log_scales[-2:]), 0.2 / 1.6)


def test_clone_small():
    cloud = random_cloud(np.random.default_rng(0), 5)
    cloud.opacity_logits[:] = logit(0.5)
    cloud.log_scales[:] = np.log(0.005)
    state = _hot_state(cloud, [1, 4])
    out = densify_and_prune(cloud, state, Config())
    assert len(out) == 7
    assert np.array_equal(out.positions[-2:], cloud.positions[[1, 4]])
    assert state.m.n == 7 and state.grad_accum.sum() == 0


def test_prune_everything_is_skipped_and_flagged():
    cloud = random_cloud(np.random.default_rng(0), 5)
    cloud.opacity_logits[:] = logit(0.001)
    report = RunReport(2)
    out = densify_and_prune(cloud, OptimizerState.fresh(cloud, 10, 0), Config(), report=report)
    assert len(out) == 5
    assert report.flags and report.flags[0]["kind"] == "prune_skipped"


def test_densify_respects_cap():
    cloud = random_cloud(np.random.default_rng(0), 5)
    cloud.opacity_logits[:] = logit(0.5)
    cloud.log_scales[:] = np.log(0.005)
    out = densify_and_prune(cloud, _hot_state(cloud, [0, 1, 2, 3]), Config(max_gaussians=7))
    assert len(out) == 7


def _cloud_at(positions):
    n = len(positions)
    c = GaussianCloud.zeros(n)
    c.positions[:] = positions
    c.rotations[:, 0] = 1
    return c


@pytest.mark.parametrize("seed", range(5))
@pytest.mark.parametrize("n", [100, 400, 2000])
def test_floaters_dense_cluster_untouched(seed, n):
    rng = np.random.default_rng(seed)
    cube = rng.uniform(-0.5, 0.5, (n, 3))
    d = rng.normal(size=(n, 3))
    ball = d / np.linalg.norm(d, axis=1, keepdims=True) * rng.uniform(size=(n, 1)) ** (1 / 3)
    for pts in (cube, ball):
        assert len(remove_floaters(_cloud_at(pts), 10, 3.0)) == n


def test_floaters_isolated_point_removed():
    rng = np.random.default_rng(1)
    pts = rng.normal(scale=0.05, size=(100, 3))
    radius = np.linalg.norm(pts, axis=1).max()
    outlier = np.array([[20 * radius, 0, 0]])
    out = remove_floaters(_cloud_at(np.vstack([pts, outlier])), 10, 3.0)
    assert len(out) == 100
    assert np.array_equal(out.positions, pts)


def test_floaters_small_cloud_guard():
    pts = np.random.default_rng(0).normal(size=(10, 3))
    assert len(remove_floaters(_cloud_at(pts), 10, 3.0)) == 10


def test_normalize_risks():
    r = np.array([1.0, 3.0, 0.0, 4.0])
    assert np.allclose(normalize_risks(r, np.ones(4), "share"), r / 8)
    assert np.array_equal(normalize_risks(r, np.ones(4), "none"), r)
    rel = normalize_risks(r, np.array([1.0, 6.0, 1.0, 2.0]), "relative")
    assert np.allclose(rel, np.array([1.0, 0.5, 0.0, 2.0]) / 3.5)


def test_run_eta_zero_equals_uniform(tiny_scene):
    views = fresh_views(tiny_scene)
    cfg = Config(**TINY)
    coarse = coarse_stage(views, cfg)
    a = run(views, ResidualOracle(), cfg.replace(eta=0.0), coarse=coarse)
    b = run(views, ResidualOracle(), cfg.replace(adaptive=False), coarse=coarse)
    assert np.array_equal(a.report.loss_columns(), b.report.loss_columns())
    assert np.allclose(a.weights.weights, 1 / 8)
    for row in range(len(a.report.rows)):
        assert np.allclose(a.report.weights_at(row), 1 / 8)


def test_run_report_invariants(tiny_scene):
    views = fresh_views(tiny_scene)
    res = run(views, ResidualOracle(), Config(**TINY))
    rep = res.report
    its = rep.column("iteration")
    assert its[0] == 0 and its[-1] == TINY["iterations"]
    for row in range(len(rep.rows)):
        w = rep.weights_at(row)
        assert abs(w.sum() - 1) < 1e-9 and np.all(w >= 0)
    # the simplex stays uniform through warm-up
    for row in np.flatnonzero(its < TINY["warmup_iters"]):
        assert np.allclose(rep.weights_at(int(row)), 1 / 8)
    res.cloud.check()


def test_iters_zero_returns_coarse(tiny_scene):
    views = fresh_views(tiny_scene)
    res = run(views, ResidualOracle(), Config(**{**TINY, "iterations": 0}))
    assert np.array_equal(res.cloud.flat(), res.coarse.flat())
