import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from splatrisk.scene import (Camera, Config, ConfigError, GaussianCloud, ParameterError, activate, camera_from_orbit,
                             init_cloud, logit, sigmoid)


def test_init_cloud_matches_config():
    cfg = Config()
    cloud = init_cloud(cfg, seed=0)
    assert len(cloud) == 5000
    assert np.allclose(sigmoid(cloud.opacity_logits), 0.1)
    assert np.allclose(cloud.colors, 128 / 255)
    assert np.max(np.linalg.norm(cloud.positions, axis=1)) <= 0.5


def test_init_cloud_deterministic():
    cfg = Config(n_init=300)
    a, b = init_cloud(cfg, 5), init_cloud(cfg, 5)
    for x, y in zip(a.arrays(), b.arrays()):
        assert np.array_equal(x, y)
    assert not np.array_equal(a.positions, init_cloud(cfg, 6).positions)


def test_activation_examples():
    cloud = GaussianCloud(positions=np.zeros((1, 3)), log_scales=np.full((1, 3), np.log(0.03)),
                          rotations=[[2.0, 0, 0, 0]], opacity_logits=[[0.0]], colors=[[1.5, -0.2, 0.4]])
    act = activate(cloud)
    assert act.opacities[0] == 0.5
    assert np.array_equal(act.rotations[0], [1.0, 0, 0, 0])
    assert np.allclose(act.scales, 0.03, atol=1e-12)
    assert np.array_equal(act.colors[0], [1.0, 0.0, 0.4])


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_activation_idempotent(seed):
    rng = np.random.default_rng(seed)
    n = 7
    cloud = GaussianCloud(rng.normal(size=(n, 3)), rng.normal(size=(n, 3)), rng.normal(size=(n, 4)),
                          rng.normal(size=(n, 1)) * 3, rng.normal(size=(n, 3)))
    once = activate(cloud)
    twice = activate(once)
    for f in ("positions", "scales", "rotations", "opacities", "colors"):
        assert np.allclose(getattr(once, f), getattr(twice, f), atol=1e-12, rtol=0)


def test_activation_rejects_bad_clouds():
    cloud = GaussianCloud.zeros(2)
    with pytest.raises(ParameterError):
        activate(cloud)  # zero quaternions
    cloud.rotations[:, 0] = 1
    cloud.positions[0, 0] = np.nan
    with pytest.raises(ParameterError):
        activate(cloud)


def test_cloud_shape_validation():
    with pytest.raises(ParameterError):
        GaussianCloud(np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 3)), np.zeros((2, 1)), np.zeros((2, 3)))


def test_flat_round_trip(rng):
    from helpers import random_cloud
    cloud = random_cloud(rng, 5)
    back = GaussianCloud.from_flat(cloud.flat(), 5)
    assert np.array_equal(back.flat(), cloud.flat())


def test_logit_inverts_sigmoid():
    p = np.linspace(0.01, 0.99, 11)
    assert np.allclose(sigmoid(logit(p)), p)


def test_orbit_camera_look_at():
    cam = camera_from_orbit(0, 0, 2, 49.1, 64, 64)
    assert np.isclose(np.linalg.norm(cam.center), 2.0)
    # optical axis (+z in camera space) points at the origin
    axis = cam.rotation.T @ np.array([0, 0, 1.0])
    assert np.allclose(axis, -cam.center / 2.0)


@settings(max_examples=40, deadline=None)
@given(st.floats(-180, 180), st.floats(-60, 60), st.floats(0.5, 5))
def test_orbit_camera_rigid_and_centered(az, el, radius):
    cam = camera_from_orbit(az, el, radius, 49.1, 33, 21)
    R = cam.rotation
    assert np.allclose(R.T @ R, np.eye(3), atol=1e-9)
    uv, z = cam.project(np.zeros((1, 3)))
    assert np.allclose(uv[0], [16.5, 10.5], atol=0.5)
    assert np.isclose(z[0], radius)


def test_azimuth_about_z():
    c90 = camera_from_orbit(90, 0, 2, 49.1, 8, 8).center
    assert np.allclose(c90, [0, 2, 0], atol=1e-12)
    up = camera_from_orbit(0, 30, 2, 49.1, 8, 8).center
    assert up[2] > 0


def test_camera_round_trip():
    cam = camera_from_orbit(30, 10, 2, 49.1, 40, 30)
    back = Camera.from_dict(cam.to_dict())
    assert np.array_equal(back.world_to_camera, cam.world_to_camera)
    assert (back.width, back.height, back.azimuth) == (40, 30, 30.0)


def test_unproject_inverts_project(rng):
    cam = camera_from_orbit(40, -15, 2, 49.1, 50, 50)
    pts = rng.uniform(-0.5, 0.5, (20, 3))
    uv, z = cam.project(pts)
    assert np.allclose(cam.unproject(uv, z), pts)


def test_config_validation_and_round_trip():
    cfg = Config(eta=2.0, sds_resolutions=[64, 96])
    assert Config.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ConfigError):
        Config.from_dict({"not_a_key": 1})
    for bad in (dict(eta=-1), dict(damping=0), dict(vis_mode="x"), dict(curvature="hessian"), dict(t_min=0)):
        with pytest.raises(ConfigError):
            Config(**bad)


def test_default_hyperparameters():
    cfg = Config()
    assert (cfg.lambda_v, cfg.lambda_d, cfg.lambda_m, cfg.lambda_t) == (1e4, 10.0, 1e3, 1.0)
    assert cfg.eta == 3.0
    assert cfg.iterations == 1500
    assert (cfg.densify_every, cfg.opacity_reset_every, cfg.floater_every) == (100, 500, 400)
    assert (cfg.lr_position, cfg.lr_position_final) == (1e-3, 2e-5)
    assert (cfg.lr_scale, cfg.lr_rotation, cfg.lr_opacity, cfg.lr_color) == (5e-3, 5e-3, 5e-2, 1e-2)
    assert (cfg.n_init, cfg.init_radius, cfg.init_opacity) == (5000, 0.5, 0.1)
    assert (cfg.orbit_radius, cfg.fov, cfg.image_size, cfg.discrepancy_exponent) == (2.0, 49.1, 320, 4.0)
    assert cfg.sds_resolutions == (128, 256, 384, 512)
    assert (cfg.curvature, cfg.risk_normalization) == ("sampled", "relative")
