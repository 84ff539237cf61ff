import dataclasses

import numpy as np
import pytest

from posecal import autodiff as ad
from posecal import train
from posecal.autodiff import Tape, Tensor
from posecal.errors import ShapeError, ValidationError
from posecal.seqmodel import (ErrorModel, ModelConfig, SensorWindow, WindowBatch, forward,
                              odometry_increments, selective_scan, selective_scan_reference)

from conftest import random_poses, sim_pairs
from fdcheck import check_op, numeric_grad, rel_error

TINY = ModelConfig(d_model=16, n_blocks=2, seq_len=8, d_image=16, d_imu=16, d_odom=16,
                   head_hidden=16, ssm_state_dim=4, expand=2)


def scan_inputs(rng, t, d, s, lead=()):
    delta = rng.uniform(0.01, 1.0, lead + (t, d))
    a_log = rng.uniform(-1.0, 1.5, (d, s))
    b = rng.standard_normal(lead + (t, s))
    c = rng.standard_normal(lead + (t, s))
    x = rng.standard_normal(lead + (t, d))
    return delta, a_log, b, c, x


def test_scan_matches_reference_on_random_shapes(rng):
    for _ in range(100):
        t, d, s = int(rng.integers(1, 129)), int(rng.integers(1, 5)), int(rng.integers(1, 5))
        args = scan_inputs(rng, t, d, s)
        assert np.max(np.abs(selective_scan(*args).data - selective_scan_reference(*args))) < 1e-10


def test_scan_taped_and_untaped_paths_agree(rng):
    args = scan_inputs(rng, 50, 3, 4, lead=(2,))
    plain = selective_scan(*args).data
    tensors = [Tensor(a, requires_grad=True) for a in args]
    with Tape():
        taped = selective_scan(*tensors).data
    assert np.array_equal(plain, taped)
    for i in range(2):
        ref = selective_scan_reference(args[0][i], args[1], args[2][i], args[3][i], args[4][i])
        assert np.max(np.abs(plain[i] - ref)) < 1e-10


def test_scan_zero_decay_accumulates(rng):
    delta, _, b, c, x = scan_inputs(rng, 30, 2, 3)
    a_log = np.full((2, 3), -1000.0)  # A = -0.0, so the decay is exactly one
    y = selective_scan(delta, a_log, b, c, x).data
    h = np.cumsum(delta[:, :, None] * b[:, None, :] * x[:, :, None], axis=0)
    assert np.allclose(y, np.einsum("ts,tds->td", c, h), atol=1e-12)


def test_scan_scalar_hand_example():
    ln2 = np.log(2.0)
    delta = np.full((2, 1), ln2)
    y = selective_scan(delta, np.zeros((1, 1)), np.ones((2, 1)), np.ones((2, 1)), np.array([[1.0], [0.0]])).data
    h0 = ln2 * 1.0 * 1.0
    h1 = np.exp(-ln2) * h0 + ln2 * 1.0 * 0.0
    assert y[0, 0] == h0 and y[1, 0] == h1
    assert y[1, 0] == pytest.approx(0.5 * ln2, abs=1e-15)


def test_scan_rejects_bad_inputs(rng):
    delta, a_log, b, c, x = scan_inputs(rng, 5, 2, 3)
    with pytest.raises(ValueError):
        selective_scan(-delta, a_log, b, c, x)
    with pytest.raises(ShapeError):
        selective_scan(delta, a_log, b[:, :2], c, x)


def test_scan_gradients(rng):
    args = scan_inputs(rng, 12, 3, 4, lead=(2,))
    assert max(check_op(selective_scan, *args)) < 1e-4


def odd_config(**kw):
    return dataclasses.replace(TINY, **kw)


def random_model(config=TINY, seed=0, scale=0.3):
    """Model whose zero-initialised layers are replaced with random values."""
    model = ErrorModel(config, seed=seed)
    rng = np.random.default_rng(seed + 100)
    for name, p in model.params.items():
        if p.requires_grad and not np.any(p.data) and p.data.ndim:
            p.data = rng.uniform(-scale, scale, p.data.shape)
    return model


@pytest.mark.parametrize("config", [TINY, ModelConfig(seq_len=8), odd_config(modalities=("image",)),
                                    odd_config(modalities=("imu", "odom")), odd_config(use_odom_cov=True)])
def test_fresh_model_is_identity(config):
    pairs = sim_pairs(seq_len=8)
    windows = [w for w, _ in pairs]
    if config.use_odom_cov:
        rng = np.random.default_rng(0)
        windows = [dataclasses.replace(w, odom_cov=rng.standard_normal((8, 21))) for w in windows]
    model = ErrorModel(config, seed=3)
    mu, sigma = model.predict(windows)
    assert np.all(mu == 0.0)
    assert np.all(sigma == np.eye(6))


def test_fresh_model_identity_on_arbitrary_inputs(rng):
    model = ErrorModel(TINY, seed=1)
    win = SensorWindow(np.arange(8.0), random_poses(rng, 8, max_angle=3.0),
                       image_cues=1e3 * rng.standard_normal((8, 8)), imu_chunks=rng.standard_normal((8, 16, 6)))
    gaussians = forward(win, model)
    assert len(gaussians) == 8
    assert all(np.all(g.mu == 0.0) and np.all(g.sigma == np.eye(6)) for g in gaussians)


def test_sequence_lengths():
    cfg = ModelConfig(seq_len=100)
    pairs = sim_pairs(seq_len=100, duration=7.0)
    model = ErrorModel(cfg)
    batch = WindowBatch.from_windows([pairs[0][0]], cfg)
    assert model.encode_inputs(batch).shape == (1, 300, 64)
    cam = dataclasses.replace(cfg, modalities=("image",))
    batch = WindowBatch.from_windows([pairs[0][0]], cam)
    assert ErrorModel(cam).encode_inputs(batch).shape == (1, 100, 64)


def test_zero_cues_through_zero_projections_give_zero_features():
    model = ErrorModel(TINY)
    for name in ("proj.image.w", "proj.image.b", "proj.imu.w", "proj.imu.b", "proj.odom.w",
                 "proj.odom.b", "modality_embed"):
        model.params[name].data = np.zeros_like(model.params[name].data)
    win = SensorWindow(np.arange(8.0), np.tile(np.eye(4), (8, 1, 1)), np.zeros((8, 8)), np.zeros((8, 16, 6)))
    feats = model.encode_inputs(WindowBatch.from_windows([win], TINY))
    assert np.all(feats.data == 0.0)


def test_zero_out_proj_block_is_residual(rng):
    cfg = ModelConfig(zero_init_out_proj=True)
    model = ErrorModel(cfg)
    x = rng.standard_normal((1, 300, 64))
    out = model.block(Tensor(x), 0)
    assert out.shape == (1, 300, 64)
    assert np.array_equal(out.data, x)


def test_block_shape_and_causality(rng):
    model = random_model(ModelConfig())
    x = rng.standard_normal((1, 300, 64))
    out = model.block(Tensor(x), 1).data
    assert out.shape == (1, 300, 64)
    x2 = x.copy()
    x2[:, 150:] += rng.standard_normal((1, 150, 64))
    out2 = model.block(Tensor(x2), 1).data
    assert np.array_equal(out[:, :150], out2[:, :150])
    assert not np.allclose(out[:, 150:], out2[:, 150:])


def test_full_model_is_causal_in_odometry(rng):
    # with only the odometry stream, output t depends on poses up to t
    cfg = odd_config(modalities=("odom",))
    model = random_model(cfg)
    win = SensorWindow(np.arange(8.0), random_poses(rng, 8, max_angle=0.5))
    mu, sigma = model.predict(win)
    moved = win.odom_poses.copy()
    moved[5:] = random_poses(rng, 3, max_angle=0.5)
    mu2, sigma2 = model.predict(SensorWindow(win.timestamps, moved))
    assert np.array_equal(mu[:5], mu2[:5]) and np.array_equal(sigma[:5], sigma2[:5])


@pytest.mark.parametrize("sign", [1.0, -1.0])
def test_predictions_spd_even_at_clamp(sign):
    model = random_model(TINY)
    model.params["cov_head.l2.b"].data[:6] = sign * np.array([60.0, 45.0, 30.0, 90.0, 25.0, 40.0])
    windows = [w for w, _ in sim_pairs(seq_len=8)]
    mu, d, l = model.forward(WindowBatch.from_windows(windows, TINY))
    assert np.all(d.data == sign * TINY.d_clamp)
    _, sigma = model.predict(windows)
    np.linalg.cholesky(sigma)


def test_mixed_clamp_stays_finite():
    # exp(40) spread between axes is beyond double precision for Cholesky,
    # but the reconstruction itself must stay finite and symmetric
    model = random_model(TINY)
    model.params["cov_head.l2.b"].data[:6] = [60.0, -60.0, 45.0, -45.0, 30.0, -30.0]
    _, sigma = model.predict([w for w, _ in sim_pairs(seq_len=8)])
    assert np.all(np.isfinite(sigma))
    assert np.allclose(sigma, np.swapaxes(sigma, -1, -2), rtol=1e-12, atol=0)


def test_missing_modality_is_omitted():
    pairs = sim_pairs(seq_len=8)
    w = pairs[0][0]
    bare = SensorWindow(w.timestamps, w.odom_poses)
    batch = WindowBatch.from_windows([bare], TINY)
    assert batch.image is None and batch.imu is None
    assert ErrorModel(TINY).encode_inputs(batch).shape == (1, 8, 16)
    with pytest.raises(ValueError):
        WindowBatch.from_windows([bare], odd_config(modalities=("image",)))


def test_window_validation(rng):
    poses = random_poses(rng, 4)
    with pytest.raises(ValidationError):
        SensorWindow(np.array([0.0, 1.0, 1.0, 2.0]), poses)
    with pytest.raises(ShapeError):
        SensorWindow(np.arange(4.0), poses, image_cues=np.zeros((3, 8)))
    with pytest.raises(ShapeError):
        SensorWindow(np.arange(4.0), poses, imu_chunks=np.zeros((4, 16, 3)))
    with pytest.raises(ValueError):
        ModelConfig(modalities=())
    with pytest.raises(ValueError):
        ModelConfig(modalities=("lidar",))


def test_odometry_increments(rng):
    poses = random_poses(rng, 5)
    inc = odometry_increments(poses)
    assert np.array_equal(inc[0], np.zeros(6))
    from posecal import lie
    rebuilt = poses[0].copy()
    for k in range(1, 5):
        rebuilt = rebuilt @ lie.exp_se3(inc[k])
        assert np.allclose(rebuilt, poses[k], atol=1e-9)
    # invariant to a common left transform
    g = random_poses(rng, 1)[0]
    assert np.allclose(odometry_increments(g @ poses), inc, atol=1e-9)


def test_end_to_end_gradient(rng):
    """Total training loss against finite differences on 20 random parameter entries."""
    pairs = sim_pairs(seq_len=8, n_trajectories=2)[:3]
    model = random_model(TINY, scale=0.2)
    model.set_normalization(WindowBatch.from_windows([w for w, _ in pairs], TINY))
    batch = WindowBatch.from_windows([w for w, _ in pairs], TINY)
    targets = np.stack([t for _, t in pairs])
    cfg = train.TrainConfig(lambda_s=1.0)

    # the likelihood term sees the mean as a constant, so the oracle holds it fixed
    mu_fixed = model.mean_head(model.features(batch), batch).data

    def total():
        readout = model.features(batch)
        d, l = model.cov_head(readout)
        lg = train.geo_loss_from_targets(model.mean_head(readout, batch), targets, cfg.p_weight, cfg.lambda_s)
        return lg + train.nll_loss(mu_fixed[:, 1:], d[:, 1:], l[:, 1:], targets[:, 1:])

    lg, ln = train.losses(model, batch, targets, cfg)
    assert (lg + ln).item() == total().item()

    with Tape() as tape:
        lg, ln = train.losses(model, batch, targets, cfg)
        loss = lg + ln
    model.zero_grad()
    tape.backward(loss)

    names = sorted(model.trainable())
    picks = [(names[i], None) for i in rng.choice(len(names), 20, replace=False)]
    analytic, numeric = [], []
    for name, _ in picks:
        p = model.params[name]
        j = int(rng.integers(p.data.size))
        analytic.append(p.grad.reshape(-1)[j])

        def f(x, p=p):
            old = p.data
            p.data = x
            try:
                return total().item()
            finally:
                p.data = old

        numeric.append(numeric_grad(f, p.data.copy(), indices=[j]).reshape(-1)[j])
    assert rel_error(np.array(analytic), np.array(numeric)) < 1e-3


def test_forward_is_deterministic():
    windows = [w for w, _ in sim_pairs(seq_len=8)]
    a = random_model(TINY, seed=4).predict(windows)
    b = random_model(TINY, seed=4).predict(windows)
    assert all(np.array_equal(x, y) for x, y in zip(a, b))
