import numpy as np
import pytest

from posecal import lie


def random_twists(rng, n, max_angle=2.0, max_trans=3.0):
    """Twists with rotation angle uniform in [0, max_angle) and random axis."""
    axis = rng.standard_normal((n, 3))
    axis /= np.linalg.norm(axis, axis=1, keepdims=True)
    angle = rng.uniform(0.0, max_angle, size=(n, 1))
    rho = rng.uniform(-max_trans, max_trans, size=(n, 3))
    return np.concatenate([rho, axis * angle], axis=1)


def random_poses(rng, n, max_angle=2.0):
    return lie.exp_se3(random_twists(rng, n, max_angle))


@pytest.fixture
def rng():
    return np.random.default_rng(12345)


def sim_pairs(seq_len=8, n_trajectories=1, duration=4.0, stride=4, seed=0, **kw):
    """Small simulated (window, targets) set for unit tests."""
    from posecal import synth

    cfg = synth.SimConfig(n_trajectories=n_trajectories, duration=duration, **kw)
    return synth.windows_from(synth.simulate(cfg, seed), seq_len, stride)
