"""Training objectives, AdamW and the decoupled fit loop.

The mean path is trained with a geodesic loss on the corrected pose plus a
smoothness penalty; the covariance path with the Gaussian negative
log-likelihood in which the predicted mean is detached. Both losses are
summed and backpropagated once; each parameter group then steps with its
own learning rate.
"""

from __future__ import annotations

import csv
import dataclasses
import logging
import math
import sys
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from . import autodiff as ad
from . import lie
from .autodiff import Tape, Tensor, apply_op
from .errors import DivergenceError, ShapeError, ValidationError
from .gaussian import DIM, LOG_2PI, TRIL_COLS, TRIL_ROWS, unit_lower
from .seqmodel import ErrorModel, SensorWindow, WindowBatch, param_group

if sys.version_info >= (3, 11):
    import tomllib
else:  # pragma: no cover
    import tomli as tomllib

log = logging.getLogger(__name__)

DIVERGENCE_LIMIT = 1e8


@dataclass
class TrainConfig:
    lr_mean: float = 1e-6
    lr_cov: float = 1e-4
    # shared encoder/SSM parameters; None means "same as lr_cov"
    lr_backbone: float | None = None
    lambda_s: float = 100.0
    batch_size: int = 128
    micro_batch: int = 16
    epochs: int = 10
    seed: int = 0
    p_weight: np.ndarray = field(default_factory=lambda: np.eye(DIM))
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 1e-2
    geo_weight: float = 1.0
    cov_warmup_epochs: int = 0
    # zero-mean training: the covariance is fitted to raw errors, no mean loss
    zero_mean: bool = False
    # start the log-variance bias at the per-axis second moment of the targets
    init_cov_bias: bool = True

    def __post_init__(self):
        self.p_weight = np.asarray(self.p_weight, dtype=np.float64)
        if self.lr_mean <= 0 or self.lr_cov <= 0 or (self.lr_backbone is not None and self.lr_backbone <= 0):
            raise ValidationError("learning rates must be positive")
        if self.p_weight.shape != (DIM, DIM) or not np.allclose(self.p_weight, self.p_weight.T):
            raise ValidationError("p_weight must be a symmetric 6x6 matrix")
        if np.linalg.eigvalsh(self.p_weight)[0] <= 0:
            raise ValidationError("p_weight must be positive definite")
        if self.batch_size < 1 or self.micro_batch < 1 or self.epochs < 0:
            raise ValidationError("batch_size, micro_batch must be positive and epochs non-negative")

    def group_lr(self, group: str) -> float:
        if group == "mean":
            return self.lr_mean
        if group == "cov":
            return self.lr_cov
        return self.lr_cov if self.lr_backbone is None else self.lr_backbone

    def to_toml(self) -> str:
        lines = []
        for f in dataclasses.fields(self):
            v = getattr(self, f.name)
            if v is None:
                continue
            if isinstance(v, np.ndarray):
                rows = ", ".join("[" + ", ".join(repr(float(x)) for x in row) + "]" for row in v)
                lines.append(f"{f.name} = [{rows}]")
            elif isinstance(v, bool):
                lines.append(f"{f.name} = {str(v).lower()}")
            else:
                lines.append(f"{f.name} = {v!r}")
        return "\n".join(lines) + "\n"

    @classmethod
    def from_dict(cls, d: dict) -> "TrainConfig":
        names = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - names
        if unknown:
            raise ValidationError(f"unknown training keys: {sorted(unknown)}")
        return cls(**d)


def load_toml(path) -> dict:
    with open(path, "rb") as fh:
        return tomllib.load(fh)


# ---------------------------------------------------------------------------
# losses


def _composed_log_sq(pred: Tensor, targets: np.ndarray, p_weight: np.ndarray) -> Tensor:
    """Per-step ``||log(exp(pred) exp(target)^-1)||_P^2`` with its exact gradient.

    With ``r = log(exp(pred) exp(-target))`` the Jacobian is
    ``dr/dpred = J(r)^-1 J(pred)`` (left Jacobians); at ``r = 0`` this is the
    identity, i.e. the first-order BCH linearisation.
    """
    shape = pred.shape[:-1]
    xp = pred.data.reshape(-1, DIM)
    xt = np.asarray(targets, dtype=np.float64).reshape(-1, DIM)
    r = lie.log_se3(lie.exp_se3(xp) @ lie.exp_se3(-xt))
    pr = r @ p_weight
    out = np.sum(pr * r, axis=-1)

    def vjp(g, needs):
        w = np.linalg.solve(np.swapaxes(lie.se3_left_jacobian(r), -1, -2), (2.0 * pr)[..., None])
        grad = (np.swapaxes(lie.se3_left_jacobian(xp), -1, -2) @ w)[..., 0]
        return (g.reshape(-1, 1) * grad).reshape(pred.shape),

    return apply_op(out.reshape(shape), (pred,), vjp)


def smoothness_penalty(pred, targets) -> Tensor:
    """``1/(T-1) * sum_i ||(tgt_i - tgt_{i-1}) - (pred_i - pred_{i-1})||^2`` per window.

    Works on ``[..., T, 6]``; returns one value per leading index.
    """
    pred = ad.as_tensor(pred)
    targets = np.asarray(targets, dtype=np.float64)
    t = pred.shape[-2]
    if t < 2:
        raise ValueError("smoothness penalty needs at least two steps")
    if targets.shape != pred.shape:
        raise ShapeError(f"targets {targets.shape} vs predictions {pred.shape}")
    dpred = pred[..., 1:, :] - pred[..., :-1, :]
    dtgt = targets[..., 1:, :] - targets[..., :-1, :]
    diff = dtgt - dpred
    return (diff * diff).sum(axis=(-2, -1)) * (1.0 / (t - 1))


def geo_loss_from_targets(pred, targets, p_weight=None, lambda_s: float = 100.0) -> Tensor:
    """Mean-path loss for predictions ``[..., T, 6]`` against error twists.

    Per window: ``1/(2T) sum_i (||log(exp(pred_i) T_rel_i^-1)||_P^2 - ||log(T_rel_i^-1)||_P^2)
    + lambda_s * smoothness``, averaged over leading (batch) indices.
    """
    pred = ad.as_tensor(pred)
    targets = np.asarray(targets, dtype=np.float64)
    if targets.shape != pred.shape:
        raise ShapeError(f"targets {targets.shape} vs predictions {pred.shape}")
    p = np.eye(DIM) if p_weight is None else np.asarray(p_weight, dtype=np.float64)
    t = pred.shape[-2]
    baseline = np.einsum("...i,ij,...j->...", targets, p, targets)
    per_step = _composed_log_sq(pred, targets, p) - baseline
    per_window = per_step.sum(axis=-1) * (1.0 / (2 * t)) + smoothness_penalty(pred, targets) * lambda_s
    return per_window.mean()


def geo_loss(pred_xi, t_gt, t_hat, p_weight=None, lambda_s: float = 100.0) -> Tensor:
    """:func:`geo_loss_from_targets` with targets ``log(T_gt inv(T_hat))``."""
    targets = lie.log_se3(lie.pose_error(t_gt, t_hat))
    return geo_loss_from_targets(pred_xi, targets, p_weight, lambda_s)


def ldl_nll(mu, d, l, xi) -> Tensor:
    """Per-step Gaussian NLL from LDL parameters, with analytic gradients.

    ``0.5 * (sum_j z_j^2 exp(-d_j) + sum_j d_j + 6 ln 2pi)`` where
    ``z = L^-1 (xi - mu)``.
    """
    mu, d, l = ad.as_tensor(mu), ad.as_tensor(d), ad.as_tensor(l)
    xi = np.asarray(xi, dtype=np.float64)
    lower = unit_lower(l.data)
    r = xi - mu.data
    z = np.linalg.solve(lower, r[..., None])[..., 0]
    inv_var = np.exp(-d.data)
    q = z * z * inv_var
    out = 0.5 * (q.sum(axis=-1) + d.data.sum(axis=-1) + DIM * LOG_2PI)

    def vjp(g, needs):
        g = g[..., None]
        w = z * inv_var
        # L^-T w
        v = np.linalg.solve(np.swapaxes(lower, -1, -2), w[..., None])[..., 0]
        g_mu = -g * v if needs[0] else None
        g_d = g * 0.5 * (1.0 - q) if needs[1] else None
        g_l = None
        if needs[2]:
            g_l = -g * (v[..., :, None] * z[..., None, :])[..., TRIL_ROWS, TRIL_COLS]
        return g_mu, g_d, g_l

    return apply_op(out, (mu, d, l), vjp)


def nll_loss(mu, d, l, observed, detach_mean: bool = True) -> Tensor:
    """Sum of per-step NLL over each window, averaged over windows.

    With ``detach_mean`` the mean receives no gradient from this loss.
    """
    mu = ad.as_tensor(mu)
    if detach_mean:
        mu = mu.detach()
    per_step = ldl_nll(mu, d, l, observed)
    return per_step.sum(axis=-1).mean() if per_step.ndim > 1 else per_step.sum()


# ---------------------------------------------------------------------------
# optimiser


def adamw_update(param, grad, m, v, step: int, lr: float, beta1=0.9, beta2=0.999,
                 eps=1e-8, weight_decay=0.0):
    """One AdamW step on arrays; returns ``(param, m, v)``.

    Weight decay shrinks the parameter directly (``param *= 1 - lr * wd``)
    rather than entering the moment estimates.
    """
    m = beta1 * m + (1.0 - beta1) * grad
    v = beta2 * v + (1.0 - beta2) * grad * grad
    m_hat = m / (1.0 - beta1**step)
    v_hat = v / (1.0 - beta2**step)
    param = param * (1.0 - lr * weight_decay) - lr * m_hat / (np.sqrt(v_hat) + eps)
    return param, m, v


class AdamW:
    """AdamW over named tensors with a learning rate per parameter group."""

    def __init__(self, params: dict[str, Tensor], lr: dict[str, float] | float,
                 betas=(0.9, 0.999), eps: float = 1e-8, weight_decay: float = 1e-2,
                 group_of: Callable[[str], str] = param_group):
        self.params = params
        self.lr = lr
        self.betas = betas
        self.eps = eps
        self.weight_decay = weight_decay
        self.group_of = group_of
        self.state: dict[str, tuple[np.ndarray, np.ndarray]] = {}
        self.steps = 0

    def lr_for(self, name: str) -> float:
        return self.lr if isinstance(self.lr, (int, float)) else self.lr[self.group_of(name)]

    def step(self, frozen_groups: Iterable[str] = ()) -> None:
        self.steps += 1
        frozen = set(frozen_groups)
        for name, p in self.params.items():
            if not p.requires_grad or self.group_of(name) in frozen:
                continue
            grad = p.grad if p.grad is not None else np.zeros_like(p.data)
            m, v = self.state.get(name, (np.zeros_like(p.data), np.zeros_like(p.data)))
            p.data, m, v = adamw_update(p.data, grad, m, v, self.steps, self.lr_for(name),
                                        self.betas[0], self.betas[1], self.eps, self.weight_decay)
            self.state[name] = (m, v)


def optimizer_step(params: dict[str, Tensor], state: AdamW | None, config: TrainConfig) -> AdamW:
    """Apply one update using the gradients stored on ``params``."""
    if state is None:
        lrs = {g: config.group_lr(g) for g in ("mean", "cov", "backbone")}
        state = AdamW(params, lrs, (config.beta1, config.beta2), config.eps, config.weight_decay)
    state.step()
    return state


# ---------------------------------------------------------------------------
# fit loop


@dataclass
class EpochMetrics:
    epoch: int
    loss_geo: float
    loss_nll: float
    val_rmse: float = float("nan")
    val_ence: float = float("nan")


@dataclass
class FitResult:
    model: ErrorModel
    history: list[EpochMetrics]

    def write_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["epoch", "L_geo", "L_nll", "val_RMSE", "val_ENCE"])
            for m in self.history:
                w.writerow([m.epoch, repr(m.loss_geo), repr(m.loss_nll), repr(m.val_rmse), repr(m.val_ence)])


def _check_finite(value: float, what: str) -> None:
    if not math.isfinite(value) or abs(value) > DIVERGENCE_LIMIT:
        raise DivergenceError(f"{what} diverged (value {value!r}); lower the learning rates")


def losses(model: ErrorModel, batch: WindowBatch, targets: np.ndarray, config: TrainConfig):
    """Forward pass plus ``(L_geo, L_nll)`` tensors for one batch."""
    readout = model.features(batch)
    d, l = model.cov_head(readout)
    if config.zero_mean:
        lg = Tensor(np.zeros(()))
        mu = np.zeros(targets.shape)
    else:
        mu = model.mean_head(readout, batch)
        lg = geo_loss_from_targets(mu, targets, config.p_weight, config.lambda_s)
    # the anchor step has a zero target by construction; it carries no information
    ln = nll_loss(mu[:, 1:], d[:, 1:], l[:, 1:], targets[:, 1:], detach_mean=True)
    return lg, ln


def init_covariance_bias(model: ErrorModel, targets: np.ndarray) -> None:
    """Shift the log-variance outputs to the scale of the training errors.

    The anchor step is skipped; the result is clipped to the model's clamp.
    """
    second = np.mean(np.asarray(targets)[:, 1:] ** 2, axis=(0, 1))
    clamp = model.config.d_clamp
    bias = model.params["cov_head.l2.b"]
    bias.data = bias.data.copy()
    bias.data[:DIM] = np.clip(np.log(np.maximum(second, 1e-300)), -clamp, clamp)


def fit(dataset: Sequence[tuple[SensorWindow, np.ndarray]], model: ErrorModel, config: TrainConfig,
        validation: Sequence[tuple[SensorWindow, np.ndarray]] | None = None,
        on_epoch: Callable[[EpochMetrics], None] | None = None) -> FitResult:
    """Train ``model`` in place on ``(window, targets)`` pairs.

    ``batch_size`` windows contribute to each optimiser step, accumulated in
    chunks of ``micro_batch``. Shuffling uses ``config.seed`` only, so two
    runs with equal inputs produce identical parameters.
    """
    from .metrics import ence, rmse_translation_windows  # local: metrics imports seqmodel only

    if not dataset:
        raise ValidationError("empty training set")
    rng = np.random.default_rng(config.seed)
    windows = [w for w, _ in dataset]
    targets = np.stack([np.asarray(t, dtype=np.float64) for _, t in dataset])
    model.set_normalization(WindowBatch.from_windows(windows, model.config))
    model.set_target_scale(targets[:, 1:])
    if config.init_cov_bias:
        init_covariance_bias(model, targets)
    lrs = {g: config.group_lr(g) for g in ("mean", "cov", "backbone")}
    opt = AdamW(model.params, lrs, (config.beta1, config.beta2), config.eps, config.weight_decay)
    history = []
    n = len(dataset)
    for epoch in range(1, config.epochs + 1):
        order = rng.permutation(n)
        frozen = ("cov",) if epoch <= config.cov_warmup_epochs else ()
        sum_geo = sum_nll = 0.0
        for start in range(0, n, config.batch_size):
            idx = order[start : start + config.batch_size]
            model.zero_grad()
            for m0 in range(0, len(idx), config.micro_batch):
                sub = idx[m0 : m0 + config.micro_batch]
                batch = WindowBatch.from_windows([windows[i] for i in sub], model.config)
                weight = len(sub) / len(idx)
                with Tape() as tape:
                    lg, ln = losses(model, batch, targets[sub], config)
                    total = (lg * config.geo_weight + ln) * weight
                tape.backward(total)
                _check_finite(lg.item(), "L_geo")
                _check_finite(ln.item(), "L_nll")
                sum_geo += lg.item() * len(sub)
                sum_nll += ln.item() * len(sub)
            if config.zero_mean:
                frozen = frozen + ("mean",)
            opt.step(frozen_groups=frozen)
        metrics = EpochMetrics(epoch, sum_geo / n, sum_nll / n)
        if validation:
            vw = [w for w, _ in validation]
            vt = np.stack([t for _, t in validation])
            mu, sigma = predict_batched(model, vw, config.micro_batch)
            if config.zero_mean:
                mu = np.zeros_like(mu)
            metrics.val_rmse = rmse_translation_windows(vw, vt, mu)
            u = np.sqrt(np.trace(sigma[:, 1:], axis1=-2, axis2=-1)).reshape(-1)
            metrics.val_ence = ence(u, (vt - mu)[:, 1:].reshape(-1, DIM))[0]
        log.info("epoch %d: L_geo=%.6g L_nll=%.6g val_rmse=%.4g val_ence=%.4g", epoch,
                 metrics.loss_geo, metrics.loss_nll, metrics.val_rmse, metrics.val_ence)
        history.append(metrics)
        if on_epoch is not None:
            on_epoch(metrics)
    return FitResult(model, history)


def predict_batched(model: ErrorModel, windows: Sequence[SensorWindow], chunk: int = 32):
    """Model predictions for many windows, in input order."""
    mus, sigmas = [], []
    for i in range(0, len(windows), chunk):
        mu, sigma = model.predict(list(windows[i : i + chunk]))
        mus.append(mu)
        sigmas.append(sigma)
    return np.concatenate(mus), np.concatenate(sigmas)
