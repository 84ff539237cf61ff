"""Synthetic trajectories with scheduled, cue-correlated pose drift.

The estimated trajectory is produced from ground truth by left-multiplying
``exp(-e_i)``, where ``e_i = rho * e_{i-1} + xi_i`` and each innovation
``xi_i`` is Gaussian with a per-step standard deviation set by a
:class:`NoiseSchedule`. With ``rho = 0`` (the default) ``pose_error(gt_i,
est_i)`` recovers ``xi_i`` exactly.

Noise events can leave fingerprints in the auxiliary streams: ``"imu"``
events inflate IMU sample noise, ``"image"`` / ``"image:<k>"`` events lift an
image-cue channel, ``"none"`` events are unobservable.
"""

from __future__ import annotations

import dataclasses
import logging
import warnings
from dataclasses import dataclass, field

import numpy as np

from . import lie
from .errors import ShapeError, ValidationError
from .seqmodel import SensorWindow

log = logging.getLogger(__name__)

SHAPES = ("circle", "lemniscate", "line", "helix")
YAW_MODES = ("constant", "forward")
IMAGE_CHANNELS = 8
IMU_SAMPLES = 16
# background noise of the synthetic IMU (accel m/s^2, gyro rad/s)
IMU_ACCEL_STD = 0.05
IMU_GYRO_STD = 0.005


@dataclass
class Trajectory:
    timestamps: np.ndarray
    poses: np.ndarray

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.poses = np.asarray(self.poses, dtype=np.float64)
        n = len(self.timestamps)
        if self.poses.shape != (n, 4, 4):
            raise ShapeError(f"poses must be ({n}, 4, 4), got {self.poses.shape}")
        if n > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValidationError("trajectory timestamps must be strictly increasing")

    def __len__(self):
        return len(self.timestamps)

    @property
    def positions(self) -> np.ndarray:
        return self.poses[:, :3, 3]


# ---------------------------------------------------------------------------
# ground truth


def _path(shape: str, t: np.ndarray, speed: float, rng: np.random.Generator):
    """Positions and velocities of a planar/helical curve at times ``t``."""
    if shape == "line":
        heading = rng.uniform(-np.pi, np.pi)
        u = np.array([np.cos(heading), np.sin(heading), 0.0])
        return t[:, None] * speed * u, np.tile(speed * u, (len(t), 1))
    if shape in ("circle", "helix"):
        radius = rng.uniform(2.0, 4.0)
        climb = 0.2 * speed if shape == "helix" else 0.0
        v_h = np.sqrt(speed**2 - climb**2)
        w = v_h / radius
        phase = rng.uniform(-np.pi, np.pi)
        a = w * t + phase
        pos = np.stack([radius * (np.cos(a) - np.cos(phase)), radius * (np.sin(a) - np.sin(phase)), climb * t], -1)
        vel = np.stack([-v_h * np.sin(a), v_h * np.cos(a), np.full_like(t, climb)], -1)
        return pos, vel
    if shape == "lemniscate":
        # Gerono figure eight; angular rate set from the mean speed of the curve
        scale = rng.uniform(2.0, 4.0)
        s = np.linspace(0.0, 2 * np.pi, 2049)
        mean_speed = np.mean(scale * np.hypot(np.cos(s), np.cos(2 * s)))
        w = speed / mean_speed
        a = w * t
        pos = np.stack([scale * np.sin(a), scale * np.sin(a) * np.cos(a), np.zeros_like(t)], -1)
        vel = np.stack([scale * w * np.cos(a), scale * w * np.cos(2 * a), np.zeros_like(t)], -1)
        return pos, vel
    raise ValueError(f"unknown shape {shape!r}; expected one of {SHAPES}")


def gen_ground_truth(shape: str, duration: float, rate: float, speed: float,
                     yaw_mode: str = "constant", seed: int = 0) -> Trajectory:
    """Smooth trajectory sampled at ``rate`` Hz over ``[0, duration]``.

    ``round(duration * rate)`` poses are produced, the first at t=0 and the
    last at t=duration. ``yaw_mode="forward"`` points the x-axis along the
    horizontal velocity; ``"constant"`` keeps one (seeded) heading.
    """
    if duration <= 0 or rate <= 0 or speed <= 0:
        raise ValueError("duration, rate and speed must be positive")
    if yaw_mode not in YAW_MODES:
        raise ValueError(f"unknown yaw_mode {yaw_mode!r}; expected one of {YAW_MODES}")
    n = max(int(round(duration * rate)), 2)
    t = np.linspace(0.0, duration, n)
    rng = np.random.default_rng(seed)
    pos, vel = _path(shape, t, speed, rng)
    if yaw_mode == "forward":
        yaw = np.arctan2(vel[:, 1], vel[:, 0])
    else:
        yaw = np.full(n, rng.uniform(-np.pi, np.pi))
    poses = np.tile(np.eye(4), (n, 1, 1))
    c, s = np.cos(yaw), np.sin(yaw)
    poses[:, 0, 0], poses[:, 0, 1], poses[:, 1, 0], poses[:, 1, 1] = c, -s, s, c
    poses[:, :3, 3] = pos
    return Trajectory(t, poses)


# ---------------------------------------------------------------------------
# noise schedule


@dataclass
class NoiseEvent:
    start_time: float
    end_time: float
    scale: float
    cue_channel: str = "imu"

    def __post_init__(self):
        if self.scale < 1.0:
            raise ValidationError("event scale must be >= 1")
        if self.end_time < self.start_time:
            raise ValidationError("event ends before it starts")
        if not (self.cue_channel in ("imu", "image", "none") or self.cue_channel.startswith("image:")):
            raise ValidationError(f"unknown cue channel {self.cue_channel!r}")

    def image_channel(self) -> int | None:
        if self.cue_channel == "image":
            return 0
        if self.cue_channel.startswith("image:"):
            k = int(self.cue_channel.split(":", 1)[1])
            if not 0 <= k < IMAGE_CHANNELS:
                raise ValidationError(f"image cue channel {k} out of range")
            return k
        return None


@dataclass
class NoiseSchedule:
    """Per-axis base std, scaling events and an optional per-step bias twist.

    ``cue_amplitude`` is the offset written into an image-cue channel per
    unit of ``log(scale)`` while its event is active. ``ar_coeff`` is the
    first-order autoregressive coefficient of the accumulated error.
    """

    base_sigma: np.ndarray = field(default_factory=lambda: np.zeros(6))
    events: list[NoiseEvent] = field(default_factory=list)
    bias_twist: np.ndarray | None = None
    ar_coeff: float = 0.0
    cue_amplitude: float = 2.0
    full_cov: np.ndarray | None = None

    def __post_init__(self):
        self.base_sigma = np.asarray(self.base_sigma, dtype=np.float64)
        if self.base_sigma.shape != (6,) or np.any(self.base_sigma < 0):
            raise ValidationError("base_sigma must be six non-negative numbers")
        self.events = [e if isinstance(e, NoiseEvent) else NoiseEvent(*e) for e in self.events]
        if self.bias_twist is not None:
            self.bias_twist = np.asarray(self.bias_twist, dtype=np.float64)
            if self.bias_twist.shape != (6,):
                raise ValidationError("bias_twist must be a 6-vector")
        if self.full_cov is not None:
            self.full_cov = np.asarray(self.full_cov, dtype=np.float64)
            if self.full_cov.shape != (6, 6):
                raise ValidationError("full_cov must be 6x6")
        if not -1.0 <= self.ar_coeff <= 1.0:
            raise ValidationError("ar_coeff must lie in [-1, 1]")

    def scales(self, timestamps: np.ndarray) -> np.ndarray:
        """Multiplier on ``base_sigma`` at each timestamp (largest active event)."""
        out = np.ones(len(timestamps))
        for ev in self.events:
            active = (timestamps >= ev.start_time) & (timestamps <= ev.end_time)
            out[active] = np.maximum(out[active], ev.scale)
        return out

    def validate_span(self, timestamps: np.ndarray) -> None:
        t0, t1 = timestamps[0], timestamps[-1]
        for ev in self.events:
            if ev.start_time < t0 or ev.end_time > t1:
                raise ValidationError(f"event [{ev.start_time}, {ev.end_time}] outside trajectory span [{t0}, {t1}]")

    def to_dict(self) -> dict:
        return {
            "base_sigma": self.base_sigma.tolist(),
            "events": [dataclasses.asdict(e) for e in self.events],
            "bias_twist": None if self.bias_twist is None else self.bias_twist.tolist(),
            "ar_coeff": self.ar_coeff,
            "cue_amplitude": self.cue_amplitude,
            "full_cov": None if self.full_cov is None else self.full_cov.tolist(),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "NoiseSchedule":
        d = dict(d)
        d["events"] = [NoiseEvent(**e) for e in d.get("events", [])]
        return cls(**d)


@dataclass
class SimulatedDataset:
    ground_truth: Trajectory
    estimated: Trajectory
    image_cues: np.ndarray
    imu_chunks: np.ndarray
    true_noise: np.ndarray
    injected: np.ndarray
    schedule: NoiseSchedule
    seed: int = 0
    odom_cov: np.ndarray | None = None

    def __post_init__(self):
        n = len(self.ground_truth)
        if len(self.estimated) != n or not np.array_equal(self.ground_truth.timestamps, self.estimated.timestamps):
            raise ValidationError("ground truth and estimate must share timestamps")
        for name in ("image_cues", "imu_chunks", "true_noise", "injected"):
            if len(getattr(self, name)) != n:
                raise ValidationError(f"{name} is not aligned with the trajectory")

    def __len__(self):
        return len(self.ground_truth)

    def windows(self, seq_len: int = 100, stride: int = 10):
        return make_windows(self, seq_len, stride)


def _imu_from_truth(gt: Trajectory, k: int) -> tuple[np.ndarray, np.ndarray]:
    """Noise-free body-frame (accel, gyro) samples ``[N, K, 3]`` each.

    Acceleration is gravity-compensated and comes from finite differences of
    positions, linearly interpolated inside each interval; angular velocity
    is constant over an interval.
    """
    t = gt.timestamps
    n = len(t)
    rot = gt.poses[:, :3, :3]
    if n < 3:
        vel = np.gradient(gt.positions, t, axis=0) if n > 1 else np.zeros((n, 3))
        acc_w = np.zeros((n, 3))
    else:
        vel = np.gradient(gt.positions, t, axis=0)
        acc_w = np.gradient(vel, t, axis=0)
    acc_b = np.einsum("nji,nj->ni", rot, acc_w)
    gyro = np.zeros((n, 3))
    if n > 1:
        rel = np.swapaxes(rot[:-1], 1, 2) @ rot[1:]
        gyro[1:] = lie.log_so3(rel) / np.diff(t)[:, None]
        gyro[0] = gyro[1]
    frac = (np.arange(1, k + 1) / k)[None, :, None]
    prev = np.concatenate([acc_b[:1], acc_b[:-1]])
    accel = prev[:, None, :] * (1 - frac) + acc_b[:, None, :] * frac
    return accel, np.repeat(gyro[:, None, :], k, axis=1)


def inject_drift(gt: Trajectory, sched: NoiseSchedule, seed: int = 0,
                 imu_samples: int = IMU_SAMPLES) -> SimulatedDataset:
    """Corrupt ``gt`` according to ``sched`` and synthesise cue streams."""
    sched.validate_span(gt.timestamps)
    rng = np.random.default_rng(seed)
    n = len(gt)
    scales = sched.scales(gt.timestamps)
    sigma = sched.base_sigma[None, :] * scales[:, None]
    bias = np.zeros(6) if sched.bias_twist is None else sched.bias_twist
    z = rng.standard_normal((n, 6))
    if sched.full_cov is not None:
        chol = np.linalg.cholesky(sched.full_cov)
        xi = bias + scales[:, None] * (z @ chol.T)
        sigma = np.sqrt(np.diag(sched.full_cov))[None, :] * scales[:, None]
    else:
        xi = bias + sigma * z
    err = xi.copy()
    if sched.ar_coeff != 0.0:
        for i in range(1, n):
            err[i] = sched.ar_coeff * err[i - 1] + xi[i]
    est = lie.exp_se3(-err) @ gt.poses if np.any(err) else gt.poses.copy()

    image = rng.standard_normal((n, IMAGE_CHANNELS))
    accel, gyro = _imu_from_truth(gt, imu_samples)
    imu_scale = np.ones(n)
    for ev in sched.events:
        active = (gt.timestamps >= ev.start_time) & (gt.timestamps <= ev.end_time)
        ch = ev.image_channel()
        if ch is not None:
            image[active, ch] += sched.cue_amplitude * np.log(ev.scale)
        elif ev.cue_channel == "imu":
            imu_scale[active] = np.maximum(imu_scale[active], ev.scale)
    noise = rng.standard_normal((n, imu_samples, 6))
    noise[..., :3] *= IMU_ACCEL_STD
    noise[..., 3:] *= IMU_GYRO_STD
    imu = np.concatenate([accel, gyro], axis=-1) + noise * imu_scale[:, None, None]
    return SimulatedDataset(gt, Trajectory(gt.timestamps.copy(), est), image, imu, sigma, xi, sched, seed)


# ---------------------------------------------------------------------------
# windowing


def make_windows(dataset: SimulatedDataset, seq_len: int = 100, stride: int = 10):
    """Overlapping ``(SensorWindow, targets)`` pairs.

    Each window is re-anchored so its first estimated pose equals the first
    ground-truth pose; ``targets[i] = log(gt_i inv(est_i))`` on the
    re-anchored poses, hence ``targets[0] = 0``.
    """
    if seq_len < 2:
        raise ValueError("window length must be at least 2")
    if stride < 1:
        raise ValueError("stride must be at least 1")
    n = len(dataset)
    if n < seq_len:
        warnings.warn(f"trajectory of length {n} is shorter than the window length {seq_len}", stacklevel=2)
        return []
    gt = dataset.ground_truth.poses
    est = dataset.estimated.poses
    out = []
    for start in range(0, n - seq_len + 1, stride):
        sl = slice(start, start + seq_len)
        if np.array_equal(gt[start], est[start]):
            poses = est[sl].copy()  # exact when nothing drifted yet
        else:
            poses = gt[start] @ lie.inverse(est[start]) @ est[sl]
        poses[0] = gt[start]
        targets = lie.log_se3(lie.pose_error(gt[sl], poses))
        targets[0] = 0.0
        window = SensorWindow(
            timestamps=dataset.ground_truth.timestamps[sl],
            odom_poses=poses,
            image_cues=dataset.image_cues[sl],
            imu_chunks=dataset.imu_chunks[sl],
            odom_cov=None if dataset.odom_cov is None else dataset.odom_cov[sl],
            start_index=start,
        )
        out.append((window, targets))
    return out


# ---------------------------------------------------------------------------
# batch generation


@dataclass
class SimConfig:
    """Recipe for a set of simulated trajectories with random noise events."""

    n_trajectories: int = 10
    shapes: tuple = SHAPES
    yaw_modes: tuple = ("constant",)
    duration: float = 20.0
    rate: float = 15.0
    speed: float = 1.0
    base_sigma: tuple = (0.002, 0.002, 0.002, 0.0005, 0.0005, 0.0005)
    bias_twist: tuple | None = None
    ar_coeff: float = 0.0
    events_per_trajectory: int = 2
    # each event slot is filled with this probability
    event_probability: float = 1.0
    event_duration: tuple = (2.0, 5.0)
    event_scale: tuple = (3.0, 8.0)
    event_cues: tuple = ("imu", "image")
    cue_amplitude: float = 2.0

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        return {k: list(v) if isinstance(v, tuple) else v for k, v in d.items()}

    @classmethod
    def from_dict(cls, d: dict) -> "SimConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown simulation keys: {sorted(unknown)}")
        return cls(**{k: tuple(v) if isinstance(v, list) else v for k, v in d.items()})


def random_schedule(cfg: SimConfig, timestamps: np.ndarray, rng: np.random.Generator) -> NoiseSchedule:
    events = []
    t0, t1 = timestamps[0], timestamps[-1]
    for _ in range(cfg.events_per_trajectory):
        if rng.uniform() >= cfg.event_probability:
            continue
        length = min(rng.uniform(*cfg.event_duration), t1 - t0)
        start = rng.uniform(t0, t1 - length)
        scale = float(np.exp(rng.uniform(np.log(cfg.event_scale[0]), np.log(cfg.event_scale[1]))))
        cue = str(cfg.event_cues[rng.integers(len(cfg.event_cues))])
        events.append(NoiseEvent(float(start), float(start + length), scale, cue))
    return NoiseSchedule(
        base_sigma=np.array(cfg.base_sigma, dtype=np.float64),
        events=events,
        bias_twist=None if cfg.bias_twist is None else np.array(cfg.bias_twist, dtype=np.float64),
        ar_coeff=cfg.ar_coeff,
        cue_amplitude=cfg.cue_amplitude,
    )


def simulate(cfg: SimConfig, seed: int = 0) -> list[SimulatedDataset]:
    """Generate ``cfg.n_trajectories`` datasets; pure in ``(cfg, seed)``."""
    seeds = np.random.SeedSequence(seed).spawn(cfg.n_trajectories)
    out = []
    for i, ss in enumerate(seeds):
        rng = np.random.default_rng(ss)
        shape = cfg.shapes[i % len(cfg.shapes)]
        yaw = cfg.yaw_modes[i % len(cfg.yaw_modes)]
        gt = gen_ground_truth(shape, cfg.duration, cfg.rate, cfg.speed, yaw, int(rng.integers(2**31)))
        sched = random_schedule(cfg, gt.timestamps, rng)
        out.append(inject_drift(gt, sched, int(rng.integers(2**31))))
    return out


def windows_from(datasets, seq_len: int = 100, stride: int = 10):
    """Concatenate the windows of several datasets, in order."""
    out = []
    for ds in datasets:
        out.extend(make_windows(ds, seq_len, stride))
    return out
