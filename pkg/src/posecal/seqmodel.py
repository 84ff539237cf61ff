"""Selective state-space network mapping sensor windows to per-step error Gaussians.

Pipeline for one window of ``T`` poses:

1. image cues, IMU chunks and odometry increments are encoded separately and
   projected to ``d_model``; each segment gets a learned modality embedding;
2. the segments are concatenated along the *sequence* axis in the order
   ``[image, imu, odom]`` (length up to ``3T``);
3. ``n_blocks`` gated selective-scan blocks process the sequence causally;
4. the last ``T`` positions (the odometry segment when present) feed two
   heads: a mean head plus a zero-initialised skip MLP on the raw odometry
   increment, and a covariance head emitting LDL parameters ``(d, l)``.

The final layers of both heads and of the skip MLP start at zero, so a fresh
model predicts ``mu = 0`` and ``sigma = I`` for every input.
"""

from __future__ import annotations

import dataclasses
import json
import threading
from dataclasses import dataclass, field
from typing import Sequence

import numpy as np

from . import _scan
from . import autodiff as ad
from . import lie
from .autodiff import Tensor, apply_op
from .errors import ShapeError, ValidationError
from .gaussian import ErrorGaussian, ldl_to_cov

MODALITIES = ("image", "imu", "odom")
ODOM_DIM = 6
COV_PARAMS = 21


@dataclass
class SensorWindow:
    """Aligned ``T``-step slice of every input stream.

    ``odom_poses`` are 4x4 estimated poses; ``imu_chunks`` holds ``K`` IMU
    samples (accel xyz, gyro xyz) for the interval ending at each pose.
    Streams set to ``None`` are treated as absent.
    """

    timestamps: np.ndarray
    odom_poses: np.ndarray
    image_cues: np.ndarray | None = None
    imu_chunks: np.ndarray | None = None
    odom_cov: np.ndarray | None = None
    start_index: int = 0

    def __post_init__(self):
        self.timestamps = np.asarray(self.timestamps, dtype=np.float64)
        self.odom_poses = np.asarray(self.odom_poses, dtype=np.float64)
        t = len(self.timestamps)
        if self.odom_poses.shape != (t, 4, 4):
            raise ShapeError(f"odom_poses must be ({t}, 4, 4), got {self.odom_poses.shape}")
        if t > 1 and np.any(np.diff(self.timestamps) <= 0):
            raise ValidationError("window timestamps must be strictly increasing")
        for name in ("image_cues", "imu_chunks", "odom_cov"):
            arr = getattr(self, name)
            if arr is None:
                continue
            arr = np.asarray(arr, dtype=np.float64)
            if len(arr) != t:
                raise ShapeError(f"{name} has length {len(arr)}, expected {t}")
            setattr(self, name, arr)
        if self.imu_chunks is not None and (self.imu_chunks.ndim != 3 or self.imu_chunks.shape[2] != 6):
            raise ShapeError(f"imu_chunks must be (T, K, 6), got {self.imu_chunks.shape}")
        if self.odom_cov is not None and self.odom_cov.shape[1:] != (COV_PARAMS,):
            raise ShapeError(f"odom_cov must be (T, 21), got {self.odom_cov.shape}")

    def __len__(self):
        return len(self.timestamps)


@dataclass
class ModelConfig:
    n_blocks: int = 4
    d_model: int = 64
    d_image: int = 256
    d_imu: int = 128
    d_odom: int = 128
    ssm_state_dim: int = 16
    conv_width: int = 4
    seq_len: int = 100
    d_clamp: float = 20.0
    expand: int = 2
    head_hidden: int = 64
    image_channels: int = 8
    imu_samples: int = 16
    use_odom_cov: bool = False
    freeze_encoders: bool = False
    zero_init_out_proj: bool = False
    # RMS normalisation before each block and before the heads
    rms_norm: bool = True
    modalities: tuple = MODALITIES

    def __post_init__(self):
        self.modalities = tuple(self.modalities)
        ints = ("n_blocks", "d_model", "d_image", "d_imu", "d_odom", "ssm_state_dim",
                "conv_width", "seq_len", "expand", "head_hidden", "image_channels", "imu_samples")
        for name in ints:
            if int(getattr(self, name)) < 1:
                raise ValueError(f"{name} must be positive")
        if self.d_clamp <= 0:
            raise ValueError("d_clamp must be positive")
        unknown = set(self.modalities) - set(MODALITIES)
        if unknown:
            raise ValueError(f"unknown modalities {sorted(unknown)}")
        if not self.modalities:
            raise ValueError("at least one modality is required")

    @property
    def d_inner(self) -> int:
        return self.expand * self.d_model

    def to_json(self) -> str:
        d = dataclasses.asdict(self)
        d["modalities"] = list(self.modalities)
        return json.dumps(d, sort_keys=True, separators=(",", ":"))

    @classmethod
    def from_dict(cls, d: dict) -> "ModelConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        return cls(**{k: v for k, v in d.items() if k in names})


# ---------------------------------------------------------------------------
# feature extraction


def odometry_increments(poses: np.ndarray) -> np.ndarray:
    """Body-frame motion between consecutive poses as twists; first row zero.

    Increments stay far from the log branch cut even when the absolute
    heading wraps around, which raw absolute logs would not.
    """
    poses = np.asarray(poses, dtype=np.float64)
    out = np.zeros(poses.shape[:-3] + (poses.shape[-3], 6))
    if poses.shape[-3] > 1:
        rel = lie.inverse(poses[..., :-1, :, :]) @ poses[..., 1:, :, :]
        out[..., 1:, :] = lie.log_se3(rel)
    return out


@dataclass
class WindowBatch:
    """Stacked model inputs for ``B`` windows (numpy arrays, batch first)."""

    image: np.ndarray | None
    imu: np.ndarray | None
    odom: np.ndarray | None
    odom_raw: np.ndarray | None
    seq_len: int

    @classmethod
    def from_windows(cls, windows: Sequence[SensorWindow], config: ModelConfig) -> "WindowBatch":
        if not windows:
            raise ValueError("empty batch")
        t = len(windows[0])
        if any(len(w) != t for w in windows):
            raise ShapeError("all windows in a batch must share one length")
        mods = set(config.modalities)
        image = imu = odom = raw = None
        if "image" in mods and all(w.image_cues is not None for w in windows):
            image = np.stack([w.image_cues for w in windows])
            if image.shape[-1] != config.image_channels:
                raise ShapeError(f"expected {config.image_channels} image cue channels, got {image.shape[-1]}")
        if "imu" in mods and all(w.imu_chunks is not None for w in windows):
            imu = np.stack([w.imu_chunks for w in windows])
            if imu.shape[2] != config.imu_samples:
                raise ShapeError(f"expected {config.imu_samples} IMU samples per chunk, got {imu.shape[2]}")
            imu = imu.reshape(len(windows), t, -1)
        if "odom" in mods:
            raw = np.stack([odometry_increments(w.odom_poses) for w in windows])
            odom = raw
            if config.use_odom_cov:
                if not all(w.odom_cov is not None for w in windows):
                    raise ValidationError("config.use_odom_cov is set but a window lacks odom_cov")
                odom = np.concatenate([raw, np.stack([w.odom_cov for w in windows])], axis=-1)
        if image is None and imu is None and odom is None:
            raise ValueError("window carries none of the configured modalities")
        return cls(image, imu, odom, raw, t)


# ---------------------------------------------------------------------------
# selective scan


def selective_scan_reference(delta, a_log, b, c, x) -> np.ndarray:
    """Step-by-step recurrence on plain arrays ``[T, d]`` (slow; used as a check)."""
    delta, a_log, b, c, x = (np.asarray(v, dtype=np.float64) for v in (delta, a_log, b, c, x))
    t_len, d = x.shape
    a = -np.exp(a_log)
    h = np.zeros_like(a)
    y = np.zeros((t_len, d))
    for t in range(t_len):
        for ch in range(d):
            for n in range(a.shape[1]):
                h[ch, n] = np.exp(delta[t, ch] * a[ch, n]) * h[ch, n] + delta[t, ch] * b[t, n] * x[t, ch]
            y[t, ch] = np.dot(c[t], h[ch])
    return y


_local = threading.local()


def _scratch(shape) -> np.ndarray:
    """Reusable per-thread buffer; avoids page-faulting a fresh array per call."""
    buf = getattr(_local, "buf", None)
    size = int(np.prod(shape))
    if buf is None or buf.size < size:
        buf = _local.buf = np.empty(size)
    return buf[:size].reshape(shape)


# exp(-80) ~ 2e-35 is zero for the recurrence; deeper arguments only hit
# numpy's slow underflow path
_MIN_LOG_DECAY = -80.0


def _decay(delta, a, out):
    np.multiply(delta[..., None], a, out=out)
    np.maximum(out, _MIN_LOG_DECAY, out=out)
    return np.exp(out, out=out)


def selective_scan(delta, a_log, b, c, x) -> Tensor:
    """Input-dependent diagonal SSM scan.

    Shapes: ``delta, x: [..., T, d]``, ``b, c: [..., T, s]``, ``a_log: [d, s]``.
    With ``A = -exp(a_log)``, per channel::

        h_t = exp(delta_t * A) * h_{t-1} + delta_t * B_t * x_t,  h_{-1} = 0
        y_t = <C_t, h_t>
    """
    delta, a_log, b, c, x = (ad.as_tensor(v) for v in (delta, a_log, b, c, x))
    dl, al, bm, cm, xv = delta.data, a_log.data, b.data, c.data, x.data
    if dl.shape != xv.shape or al.ndim != 2 or al.shape[0] != xv.shape[-1]:
        raise ShapeError(f"selective_scan: delta {dl.shape}, x {xv.shape}, A_log {al.shape}")
    if bm.shape != cm.shape or bm.shape[:-1] != xv.shape[:-1] or bm.shape[-1] != al.shape[1]:
        raise ShapeError(f"selective_scan: B {bm.shape}, C {cm.shape} vs x {xv.shape}, A_log {al.shape}")
    if np.any(dl <= 0):
        raise ValueError("selective_scan requires strictly positive delta")

    lead = xv.shape[:-2]
    t_len, d = xv.shape[-2:]
    s = al.shape[1]
    dl3 = np.ascontiguousarray(dl.reshape(-1, t_len, d))
    x3 = np.ascontiguousarray(xv.reshape(-1, t_len, d))
    b3 = np.ascontiguousarray(bm.reshape(-1, t_len, s))
    c3 = np.ascontiguousarray(cm.reshape(-1, t_len, s))
    a = -np.exp(al)
    inputs = (delta, a_log, b, c, x)
    if ad.active_tape() is None or not any(v.requires_grad for v in inputs):
        decay = _decay(dl3, a, _scratch(dl3.shape + (s,)))
        return Tensor(_scan.scan_inference(decay, dl3, b3, c3, x3).reshape(lead + (t_len, d)))
    decay = _decay(dl3, a, np.empty(dl3.shape + (s,)))
    y, h = _scan.scan_forward(decay, dl3, b3, c3, x3)

    def vjp(gy, needs):
        gy3 = np.ascontiguousarray(gy.reshape(-1, t_len, d))
        g_delta, g_a, g_b, g_c, g_x = _scan.scan_backward(gy3, dl3, a, b3, c3, x3, h, decay)
        return (
            g_delta.reshape(dl.shape),
            g_a * a,
            g_b.reshape(bm.shape),
            g_c.reshape(cm.shape),
            g_x.reshape(xv.shape),
        )

    return apply_op(y.reshape(lead + (t_len, d)), inputs, vjp)


# ---------------------------------------------------------------------------
# parameters


def _uniform(rng, shape, fan_in):
    bound = 1.0 / np.sqrt(fan_in)
    return rng.uniform(-bound, bound, size=shape)


def init_params(config: ModelConfig, seed: int = 0) -> dict[str, Tensor]:
    """Deterministic parameter initialisation keyed by dotted names."""
    rng = np.random.default_rng(seed)
    shapes: dict[str, np.ndarray] = {}

    def linear(name, n_in, n_out, zero=False):
        shapes[f"{name}.w"] = np.zeros((n_in, n_out)) if zero else _uniform(rng, (n_in, n_out), n_in)
        shapes[f"{name}.b"] = np.zeros(n_out) if zero else _uniform(rng, (n_out,), n_in)

    dm, di, s = config.d_model, config.d_inner, config.ssm_state_dim
    odom_in = ODOM_DIM + (COV_PARAMS if config.use_odom_cov else 0)
    imu_in = config.imu_samples * 6

    linear("enc.image.l1", config.image_channels, config.d_image)
    linear("enc.image.l2", config.d_image, config.d_image)
    linear("proj.image", config.d_image, dm)
    linear("enc.imu.l1", imu_in, config.d_imu)
    linear("enc.imu.l2", config.d_imu, config.d_imu)
    linear("proj.imu", config.d_imu, dm)
    linear("enc.odom", odom_in, config.d_odom)
    linear("proj.odom", config.d_odom, dm)
    shapes["modality_embed"] = rng.normal(0.0, 0.02, size=(len(MODALITIES), dm))

    for i in range(config.n_blocks):
        p = f"block{i}"
        shapes[f"{p}.norm.w"] = np.ones(dm)
        linear(f"{p}.in_proj", dm, di)
        linear(f"{p}.gate_proj", dm, di)
        shapes[f"{p}.conv.k"] = _uniform(rng, (di, config.conv_width), config.conv_width)
        shapes[f"{p}.conv.b"] = np.zeros(di)
        shapes[f"{p}.dt_proj.w"] = _uniform(rng, (di, di), di) * 0.1
        # softplus(bias) spread log-uniformly over [1e-3, 1e-1]
        dt = np.exp(rng.uniform(np.log(1e-3), np.log(1e-1), size=di))
        shapes[f"{p}.dt_proj.b"] = dt + np.log(-np.expm1(-dt))
        shapes[f"{p}.B_proj.w"] = _uniform(rng, (di, s), di)
        shapes[f"{p}.C_proj.w"] = _uniform(rng, (di, s), di)
        shapes[f"{p}.A_log"] = np.log(np.tile(np.arange(1, s + 1, dtype=np.float64), (di, 1)))
        linear(f"{p}.out_proj", di, dm, zero=config.zero_init_out_proj)

    shapes["final_norm.w"] = np.ones(dm)
    h = config.head_hidden
    linear("mu_head.l1", dm, h)
    linear("mu_head.l2", h, 6, zero=True)
    linear("cov_head.l1", dm, h)
    linear("cov_head.l2", h, COV_PARAMS, zero=True)
    linear("skip.l1", ODOM_DIM, 6)
    linear("skip.l2", 6, 6, zero=True)

    # per-feature input standardisation, filled in from training data
    shapes["norm.image.mean"] = np.zeros(config.image_channels)
    shapes["norm.image.std"] = np.ones(config.image_channels)
    shapes["norm.imu.mean"] = np.zeros(imu_in)
    shapes["norm.imu.std"] = np.ones(imu_in)
    shapes["norm.odom.mean"] = np.zeros(odom_in)
    shapes["norm.odom.std"] = np.ones(odom_in)
    # the mean head predicts in units of the typical training error per axis
    shapes["norm.target.scale"] = np.ones(6)

    return {k: Tensor(v, requires_grad=not k.startswith("norm."), name=k) for k, v in shapes.items()}


def param_group(name: str) -> str:
    """Optimiser group of a parameter: ``mean``, ``cov``, ``backbone`` or ``buffer``."""
    if name.startswith("norm."):
        return "buffer"
    if name.startswith(("mu_head.", "skip.")):
        return "mean"
    if name.startswith("cov_head."):
        return "cov"
    return "backbone"


def _linear(x, params, name):
    return x @ params[f"{name}.w"] + params[f"{name}.b"]


class ErrorModel:
    """Parameters plus the forward pass of the error-distribution network."""

    def __init__(self, config: ModelConfig | None = None, seed: int = 0,
                 params: dict[str, Tensor] | None = None):
        self.config = config or ModelConfig()
        self.params = params if params is not None else init_params(self.config, seed)
        if self.config.freeze_encoders:
            for k, v in self.params.items():
                if k.startswith(("enc.image.", "enc.imu.")):
                    v.requires_grad = False

    def trainable(self) -> dict[str, Tensor]:
        return {k: v for k, v in self.params.items() if v.requires_grad}

    def zero_grad(self) -> None:
        for v in self.params.values():
            v.grad = None

    def set_normalization(self, batch: WindowBatch) -> None:
        """Standardise each input feature using statistics of ``batch``."""
        for key, arr in (("image", batch.image), ("imu", batch.imu), ("odom", batch.odom)):
            if arr is None:
                continue
            flat = arr.reshape(-1, arr.shape[-1])
            std = flat.std(axis=0)
            self.params[f"norm.{key}.mean"].data = flat.mean(axis=0)
            self.params[f"norm.{key}.std"].data = np.where(std > 1e-8, std, 1.0)

    def set_target_scale(self, targets: np.ndarray) -> None:
        """Scale mean predictions by the per-axis RMS of training targets."""
        flat = np.asarray(targets, dtype=np.float64).reshape(-1, 6)
        rms = np.sqrt(np.mean(flat * flat, axis=0))
        self.params["norm.target.scale"].data = np.where(rms > 1e-12, rms, 1.0)

    def _norm(self, arr: np.ndarray, key: str) -> np.ndarray:
        p = self.params
        return (arr - p[f"norm.{key}.mean"].data) / p[f"norm.{key}.std"].data

    def encode_inputs(self, batch: WindowBatch) -> Tensor:
        """Encode and concatenate present modalities along the sequence axis."""
        p = self.params
        segments = []
        if batch.image is not None:
            f = _linear(ad.silu(_linear(Tensor(self._norm(batch.image, "image")), p, "enc.image.l1")), p, "enc.image.l2")
            segments.append(_linear(ad.silu(f), p, "proj.image") + p["modality_embed"][0])
        if batch.imu is not None:
            f = _linear(ad.silu(_linear(Tensor(self._norm(batch.imu, "imu")), p, "enc.imu.l1")), p, "enc.imu.l2")
            segments.append(_linear(ad.silu(f), p, "proj.imu") + p["modality_embed"][1])
        if batch.odom is not None:
            f = ad.silu(_linear(Tensor(self._norm(batch.odom, "odom")), p, "enc.odom"))
            segments.append(_linear(f, p, "proj.odom") + p["modality_embed"][2])
        if not segments:
            raise ValueError("no modality available to encode")
        return segments[0] if len(segments) == 1 else ad.concat(segments, axis=1)

    def block(self, x: Tensor, i: int) -> Tensor:
        """Gated selective-scan block with a residual connection; shape-preserving."""
        p = self.params
        pre = f"block{i}"
        xn = ad.rms_norm(x, p[f"{pre}.norm.w"]) if self.config.rms_norm else x
        u = _linear(xn, p, f"{pre}.in_proj")
        u = ad.swapaxes(ad.conv1d_causal_depthwise(ad.swapaxes(u, 1, 2), p[f"{pre}.conv.k"]), 1, 2)
        u = ad.silu(u + p[f"{pre}.conv.b"])
        delta = ad.softplus(_linear(u, p, f"{pre}.dt_proj"))
        y = selective_scan(delta, p[f"{pre}.A_log"], u @ p[f"{pre}.B_proj.w"], u @ p[f"{pre}.C_proj.w"], u)
        gate = ad.silu(_linear(xn, p, f"{pre}.gate_proj"))
        return _linear(y * gate, p, f"{pre}.out_proj") + x

    def features(self, batch: WindowBatch) -> Tensor:
        """Backbone output at the last ``T`` positions, ``[B, T, d_model]``."""
        x = self.encode_inputs(batch)
        for i in range(self.config.n_blocks):
            x = self.block(x, i)
        x = x[:, -batch.seq_len:, :]
        return ad.rms_norm(x, self.params["final_norm.w"]) if self.config.rms_norm else x

    def mean_head(self, readout: Tensor, batch: WindowBatch) -> Tensor:
        p = self.params
        mu = _linear(ad.silu(_linear(readout, p, "mu_head.l1")), p, "mu_head.l2")
        if batch.odom_raw is not None:
            raw = Tensor(self._norm(batch.odom, "odom")[..., :ODOM_DIM])
            mu = mu + _linear(ad.silu(_linear(raw, p, "skip.l1")), p, "skip.l2")
        return mu * p["norm.target.scale"]

    def cov_head(self, readout: Tensor) -> tuple[Tensor, Tensor]:
        p = self.params
        cov = _linear(ad.silu(_linear(readout, p, "cov_head.l1")), p, "cov_head.l2")
        clamp = self.config.d_clamp
        return ad.clip(cov[..., :6], -clamp, clamp), cov[..., 6:]

    def forward(self, batch: WindowBatch) -> tuple[Tensor, Tensor, Tensor]:
        """Return ``(mu [B,T,6], d [B,T,6], l [B,T,15])`` tensors."""
        readout = self.features(batch)
        d, l = self.cov_head(readout)
        return self.mean_head(readout, batch), d, l

    def _batch(self, windows):
        single = isinstance(windows, SensorWindow)
        return single, WindowBatch.from_windows([windows] if single else list(windows), self.config)

    def predict(self, windows: Sequence[SensorWindow] | SensorWindow) -> tuple[np.ndarray, np.ndarray]:
        """Numpy ``(mu [B,T,6], sigma [B,T,6,6])`` for one window or a list."""
        single, batch = self._batch(windows)
        mu, d, l = self.forward(batch)
        sigma = ldl_to_cov(d.data, l.data)
        if single:
            return mu.data[0], sigma[0]
        return mu.data, sigma

    def predict_covariance(self, windows: Sequence[SensorWindow] | SensorWindow) -> np.ndarray:
        """Covariances only; the mean head is never evaluated."""
        single, batch = self._batch(windows)
        d, l = self.cov_head(self.features(batch))
        sigma = ldl_to_cov(d.data, l.data)
        return sigma[0] if single else sigma

    def predict_gaussians(self, window: SensorWindow) -> list[ErrorGaussian]:
        mu, sigma = self.predict(window)
        return [ErrorGaussian(m, s) for m, s in zip(mu, sigma)]


def forward(window: SensorWindow, model: ErrorModel) -> list[ErrorGaussian]:
    """Per-step error distributions for one window."""
    return model.predict_gaussians(window)
