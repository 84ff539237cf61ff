"""Pose accuracy and uncertainty-calibration metrics, plus chunked evaluation.

Conventions:

* LL is the mean per-step log density *including* the ``-3 ln 2pi``
  normalisation, pooled over every (chunk, step) pair.
* The uncertainty score of a prediction is ``u = sqrt(trace(sigma))``; the
  matching error magnitude is ``||xi - mu||``.
* The anchor step of every chunk has a zero target by construction and is
  left out of LL and ENCE; pose metrics use every step.
"""

from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Sequence

import numpy as np

from . import gaussian, lie
from .errors import AlignmentError, InsufficientDataError, ShapeError, ValidationError

REPORT_SCHEMA = 1
MODES = ("zero_mean", "non_zero_mean")
ASSOC_TOLERANCE = 1e-3


def associate(t_est: np.ndarray, t_gt: np.ndarray, tol: float = ASSOC_TOLERANCE):
    """Index pairs matching each estimate to its nearest ground-truth stamp."""
    t_est = np.asarray(t_est, dtype=np.float64)
    t_gt = np.asarray(t_gt, dtype=np.float64)
    if len(t_gt) == 0 or len(t_est) == 0:
        raise AlignmentError("empty trajectory")
    pos = np.clip(np.searchsorted(t_gt, t_est), 1, max(len(t_gt) - 1, 1))
    left = np.clip(pos - 1, 0, len(t_gt) - 1)
    right = np.clip(pos, 0, len(t_gt) - 1)
    pick = np.where(np.abs(t_gt[left] - t_est) <= np.abs(t_gt[right] - t_est), left, right)
    ok = np.abs(t_gt[pick] - t_est) <= tol
    if not np.any(ok):
        raise AlignmentError(f"no timestamps within {tol} s of each other")
    return np.flatnonzero(ok), pick[ok]


def _aligned(est, gt):
    i, j = associate(est.timestamps, gt.timestamps)
    return est.poses[i], gt.poses[j]


def rmse_translation(est, gt) -> float:
    """Root mean squared translation error after timestamp association."""
    pe, pg = _aligned(est, gt)
    err = pe[:, :3, 3] - pg[:, :3, 3]
    return float(np.sqrt(np.mean(np.sum(err * err, axis=-1))))


def geo_rotation(est, gt) -> float:
    """Mean geodesic rotation distance after timestamp association."""
    pe, pg = _aligned(est, gt)
    return float(np.mean(lie.geodesic_distance(pe[:, :3, :3], pg[:, :3, :3])))


def log_likelihood(mu, sigma, observed) -> float:
    """Mean log density of ``observed`` under ``N(mu, sigma)`` over all steps."""
    mu = np.asarray(mu, dtype=np.float64)
    sigma = np.asarray(sigma, dtype=np.float64)
    observed = np.asarray(observed, dtype=np.float64)
    if mu.shape != observed.shape or sigma.shape != observed.shape + (6,):
        raise ShapeError(f"mu {mu.shape}, sigma {sigma.shape}, observed {observed.shape} are not aligned")
    nll = gaussian.nll(mu.reshape(-1, 6), sigma.reshape(-1, 6, 6), observed.reshape(-1, 6))
    return float(-np.mean(nll))


@dataclass
class BinStats:
    bin: int
    count: int
    rmv: float
    rmse: float


def ence(u, residuals, bins: int = 10) -> tuple[float, list[BinStats]]:
    """Expected normalised calibration error with equal-count bins.

    Samples are stably sorted by ``u`` and split into ``bins`` groups whose
    sizes differ by at most one (larger groups first).
    """
    u = np.asarray(u, dtype=np.float64).reshape(-1)
    r = np.asarray(residuals, dtype=np.float64)
    sq = np.sum(r.reshape(len(u), -1) ** 2, axis=-1) if r.ndim > 1 else r * r
    if len(sq) != len(u):
        raise ShapeError(f"{len(u)} uncertainty scores vs {len(sq)} residuals")
    if bins < 1 or bins > len(u):
        raise ValueError(f"need 1 <= bins <= {len(u)} samples, got bins={bins}")
    order = np.argsort(u, kind="stable")
    table = []
    total = 0.0
    for j, idx in enumerate(np.array_split(order, bins)):
        rmv = math.sqrt(float(np.mean(u[idx] ** 2)))
        rmse = math.sqrt(float(np.mean(sq[idx])))
        if rmv <= 0:
            raise ValueError("uncertainty scores must be positive")
        table.append(BinStats(j, len(idx), rmv, rmse))
        total += abs(rmse - rmv) / rmv
    return total / bins, table


@dataclass
class EmpiricalBaseline:
    """Gaussian per step offset, fitted across chunks."""

    mu: np.ndarray
    sigma: np.ndarray
    reg: float = 1e-9

    @classmethod
    def fit(cls, chunks, reg: float = 1e-9) -> "EmpiricalBaseline":
        x = np.asarray(chunks, dtype=np.float64)
        if x.ndim != 3 or x.shape[-1] != 6:
            raise ShapeError(f"chunks must be (n_chunks, T, 6), got {x.shape}")
        if len(x) < 2:
            raise InsufficientDataError("the empirical baseline needs at least two chunks")
        mu = x.mean(axis=0)
        dev = x - mu
        sigma = np.einsum("nki,nkj->kij", dev, dev) / (len(x) - 1) + reg * np.eye(6)
        return cls(mu, sigma, reg)

    def predict(self, windows):
        t = len(windows[0])
        if t != len(self.mu):
            raise ShapeError(f"baseline fitted for length {len(self.mu)}, windows have {t}")
        b = len(windows)
        return np.broadcast_to(self.mu, (b,) + self.mu.shape).copy(), np.broadcast_to(self.sigma, (b,) + self.sigma.shape).copy()


def empirical_baseline_fit(chunks, reg: float = 1e-9) -> EmpiricalBaseline:
    return EmpiricalBaseline.fit(chunks, reg)


@dataclass
class ConstantBaseline:
    """One zero-mean Gaussian for every step, fitted to pooled residuals."""

    sigma: np.ndarray

    @classmethod
    def fit(cls, residuals, reg: float = 1e-12) -> "ConstantBaseline":
        r = np.asarray(residuals, dtype=np.float64).reshape(-1, 6)
        if len(r) < 2:
            raise InsufficientDataError("need at least two residuals")
        return cls(r.T @ r / len(r) + reg * np.eye(6))

    def predict(self, windows):
        b, t = len(windows), len(windows[0])
        return np.zeros((b, t, 6)), np.broadcast_to(self.sigma, (b, t, 6, 6)).copy()


@dataclass
class CalibrationReport:
    rmse_m: float
    geo_rad: float
    ll: float
    ence: float
    bins: list[BinStats]
    mode: str
    n_chunks: int
    raw_rmse_m: float = float("nan")
    raw_geo_rad: float = float("nan")
    schema: int = REPORT_SCHEMA
    conventions: dict = field(default_factory=lambda: {
        "ll": "mean per-step log density incl. -3 ln(2 pi); anchor step excluded",
        "ence": "equal-count bins over u = sqrt(trace(sigma)); anchor step excluded",
        "pooling": "all (chunk, step) pairs pooled before averaging",
    })

    def __post_init__(self):
        if self.mode not in MODES:
            raise ValidationError(f"mode must be one of {MODES}")
        self.bins = [b if isinstance(b, BinStats) else BinStats(**b) for b in self.bins]

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)

    @classmethod
    def from_json(cls, text: str) -> "CalibrationReport":
        d = json.loads(text)
        if d.get("schema") != REPORT_SCHEMA:
            raise ValidationError(f"unsupported report schema {d.get('schema')!r}")
        return cls(**d)

    def write_bins_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["bin", "count", "rmv", "rmse"])
            for b in self.bins:
                w.writerow([b.bin, b.count, repr(b.rmv), repr(b.rmse)])


def corrected_poses(mu, poses) -> np.ndarray:
    return lie.correct_pose(mu, poses)


def _pose_errors(est, gt):
    """Squared translation errors and rotation distances, per step."""
    d = est[..., :3, 3] - gt[..., :3, 3]
    return np.sum(d * d, axis=-1), lie.geodesic_distance(est[..., :3, :3], gt[..., :3, :3])


def rmse_translation_windows(windows, targets, mu) -> float:
    """Corrected-pose translation RMSE pooled over windows (truth from targets)."""
    est = np.stack([w.odom_poses for w in windows])
    gt = lie.exp_se3(np.asarray(targets)) @ est
    sq, _ = _pose_errors(lie.correct_pose(mu, est), gt)
    return float(np.sqrt(np.mean(sq)))


def predict_windows(predictor, windows, mode: str, chunk: int = 32):
    """``(mu, sigma)`` for all windows; in zero-mean mode only covariances are read."""
    mus, sigmas = [], []
    for i in range(0, len(windows), chunk):
        part = list(windows[i : i + chunk])
        if mode == "zero_mean":
            if hasattr(predictor, "predict_covariance"):
                sigma = predictor.predict_covariance(part)
            else:
                sigma = predictor.predict(part)[1]
            mu = np.zeros(sigma.shape[:-1])
        else:
            mu, sigma = predictor.predict(part)
        mus.append(mu)
        sigmas.append(sigma)
    return np.concatenate(mus), np.concatenate(sigmas)


def evaluate_windows(predictor, pairs, gt_poses, mode: str = "non_zero_mean", bins: int = 10) -> CalibrationReport:
    """Evaluate on prepared ``(window, targets)`` pairs with matching truth poses."""
    if mode not in MODES:
        raise ValidationError(f"mode must be one of {MODES}")
    if not pairs:
        raise InsufficientDataError("no chunks to evaluate")
    windows = [w for w, _ in pairs]
    xi = np.stack([t for _, t in pairs])
    est = np.stack([w.odom_poses for w in windows])
    gt = np.asarray(gt_poses)
    mu, sigma = predict_windows(predictor, windows, mode)
    raw_sq, raw_geo = _pose_errors(est, gt)
    if mode == "non_zero_mean":
        sq, geo = _pose_errors(lie.correct_pose(mu, est), gt)
    else:
        sq, geo = raw_sq, raw_geo
    resid = (xi - mu)[:, 1:]
    sig = sigma[:, 1:]
    ll = log_likelihood(mu[:, 1:], sig, xi[:, 1:])
    u = np.sqrt(np.trace(sig, axis1=-2, axis2=-1))
    score, table = ence(u.reshape(-1), resid.reshape(-1, 6), bins)
    return CalibrationReport(
        rmse_m=float(np.sqrt(np.mean(sq))),
        geo_rad=float(np.mean(geo)),
        ll=ll,
        ence=score,
        bins=table,
        mode=mode,
        n_chunks=len(pairs),
        raw_rmse_m=float(np.sqrt(np.mean(raw_sq))),
        raw_geo_rad=float(np.mean(raw_geo)),
    )


def chunk_dataset(datasets, seq_len: int = 100, stride: int = 10):
    """Windows of several datasets plus the matching ground-truth poses."""
    from .synth import make_windows

    pairs, gts = [], []
    for ds in datasets:
        for w, t in make_windows(ds, seq_len, stride):
            pairs.append((w, t))
            gts.append(ds.ground_truth.poses[w.start_index : w.start_index + seq_len])
    return pairs, gts


def evaluate(predictor, datasets, mode: str = "non_zero_mean", seq_len: int = 100,
             stride: int = 10, bins: int = 10) -> CalibrationReport:
    """Chunk ``datasets`` into overlapping windows and score ``predictor`` on them."""
    if not isinstance(datasets, (list, tuple)):
        datasets = [datasets]
    pairs, gts = chunk_dataset(datasets, seq_len, stride)
    if not pairs:
        raise InsufficientDataError("datasets are shorter than one chunk")
    return evaluate_windows(predictor, pairs, gts, mode, bins)


def comparison_table(reports: dict[str, CalibrationReport]) -> str:
    """Plain-text table of the headline numbers of several reports."""
    w = max([24] + [len(name) + 2 for name in reports])
    head = f"{'name':<{w}}{'mode':<15}{'RMSE[m]':>10}{'GEO[rad]':>10}{'LL':>10}{'ENCE':>8}{'chunks':>8}"
    lines = [head, "-" * len(head)]
    for name, r in reports.items():
        lines.append(f"{name:<{w}}{r.mode:<15}{r.rmse_m:>10.4f}{r.geo_rad:>10.4f}{r.ll:>10.3f}{r.ence:>8.3f}{r.n_chunks:>8d}")
    return "\n".join(lines)
