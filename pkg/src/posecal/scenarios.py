"""Ready-made synthetic experiments shared by the demos and the acceptance suite.

Each scenario fixes a simulator recipe, a small model and a training
configuration that finish in a few minutes on one CPU core.

* ``bias``: a random-walk drift with a constant per-step bias (pose
  correction should remove most of it);
* ``calibration``: per-step noise inflated during long events that leave
  fingerprints in the IMU or image cues (uncertainty should follow them);
* ``near_zero``: a well-tuned odometry with tiny unbiased noise (correction
  must not make it worse).
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np

from . import metrics, synth, train
from .seqmodel import ErrorModel, ModelConfig

TINY_MODEL = ModelConfig(d_model=32, n_blocks=2, expand=1, ssm_state_dim=8,
                         d_image=32, d_imu=32, d_odom=32, head_hidden=32)

SIMS = {
    "bias": synth.SimConfig(
        n_trajectories=20, yaw_modes=("constant",), ar_coeff=1.0,
        base_sigma=(0.002, 0.002, 0.002, 0.0005, 0.0005, 0.0005),
        bias_twist=(0.001, 0.0, 0.0, 0.0, 0.0, 0.002),
        events_per_trajectory=1, event_probability=0.5,
    ),
    "calibration": synth.SimConfig(
        n_trajectories=40, yaw_modes=("constant", "forward"),
        events_per_trajectory=1, event_probability=0.5,
        event_duration=(8.0, 16.0), event_scale=(5.0, 15.0),
    ),
    "near_zero": synth.SimConfig(
        n_trajectories=20, yaw_modes=("constant", "forward"),
        base_sigma=(1e-4, 1e-4, 1e-4, 2e-5, 2e-5, 2e-5),
        events_per_trajectory=0,
    ),
}

TRAIN = {
    "bias": train.TrainConfig(lr_mean=1e-3, lr_cov=1e-3, batch_size=8, epochs=30),
    "calibration": train.TrainConfig(lr_mean=1e-3, lr_cov=1e-3, batch_size=8, epochs=20, zero_mean=True),
    "near_zero": train.TrainConfig(lr_mean=1e-4, lr_cov=1e-3, batch_size=8, epochs=30),
}

STRIDE = 20
HELD_OUT_OFFSET = 1000
# held-out draws are smaller than training draws; evaluation chunks overlap more
HELD_OUT_TRAJECTORIES = 10


@dataclass
class Outcome:
    model: ErrorModel
    report: metrics.CalibrationReport
    history: list


def datasets(name: str, seed: int, held_out: bool = False, n_trajectories: int | None = None):
    sim = SIMS[name]
    if n_trajectories is None and held_out:
        n_trajectories = HELD_OUT_TRAJECTORIES
    if n_trajectories is not None:
        sim = dataclasses.replace(sim, n_trajectories=n_trajectories)
    return synth.simulate(sim, seed + (HELD_OUT_OFFSET if held_out else 0))


def run(name: str, seed: int, model_config: ModelConfig = TINY_MODEL, epochs: int | None = None,
        mode: str | None = None) -> Outcome:
    """Train on the scenario's training draw and evaluate on a held-out draw."""
    tcfg = dataclasses.replace(TRAIN[name], seed=seed)
    if epochs is not None:
        tcfg = dataclasses.replace(tcfg, epochs=epochs)
    pairs = synth.windows_from(datasets(name, seed), model_config.seq_len, STRIDE)
    model = ErrorModel(model_config, seed=seed)
    result = train.fit(pairs, model, tcfg)
    if mode is None:
        mode = "zero_mean" if tcfg.zero_mean else "non_zero_mean"
    report = metrics.evaluate(model, datasets(name, seed, held_out=True), mode, model_config.seq_len)
    return Outcome(model, report, result.history)


def constant_baseline(name: str, seed: int, seq_len: int = 100) -> metrics.CalibrationReport:
    """Constant-covariance baseline fitted to the training residual scale."""
    pairs = synth.windows_from(datasets(name, seed), seq_len, STRIDE)
    base = metrics.ConstantBaseline.fit(np.concatenate([t[1:] for _, t in pairs]))
    mode = "zero_mean" if TRAIN[name].zero_mean else "non_zero_mean"
    return metrics.evaluate(base, datasets(name, seed, held_out=True), mode, seq_len)
