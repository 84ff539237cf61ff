"""Six-dimensional Gaussian pose-error distributions.

Covariances are parameterised by 21 unconstrained numbers: ``d`` (6 log
diagonal entries) and ``l`` (15 strictly-lower-triangular entries of a unit
lower-triangular factor, packed row-major). The reconstruction

    sigma = L @ diag(exp(d)) @ L.T

is symmetric positive definite for every finite input.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DecompositionError, IllConditionedError, ShapeError, ValidationError

DIM = 6
N_OFFDIAG = DIM * (DIM - 1) // 2
LOG_2PI = float(np.log(2.0 * np.pi))
MAX_CONDITION = 1e12

# (row, col) of every strictly-lower entry in packing order: (1,0), (2,0), (2,1), ...
TRIL_ROWS, TRIL_COLS = np.tril_indices(DIM, k=-1)


def _check_last(x, n: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (n,):
        raise ShapeError(f"{name} must have trailing dimension {n}, got shape {x.shape}")
    return x


def unit_lower(l) -> np.ndarray:
    """Unpack ``[..., 15]`` into unit lower-triangular ``[..., 6, 6]`` matrices."""
    l = _check_last(l, N_OFFDIAG, "l")
    out = np.zeros(l.shape[:-1] + (DIM, DIM))
    out[..., TRIL_ROWS, TRIL_COLS] = l
    out[..., np.arange(DIM), np.arange(DIM)] = 1.0
    return out


def ldl_to_cov(d, l) -> np.ndarray:
    d = _check_last(d, DIM, "d")
    lower = unit_lower(l)
    return (lower * np.exp(d)[..., None, :]) @ np.swapaxes(lower, -1, -2)


def cov_to_ldl(sigma) -> tuple[np.ndarray, np.ndarray]:
    """Invert :func:`ldl_to_cov`. Raises ``DecompositionError`` for non-SPD input."""
    sigma = np.asarray(sigma, dtype=np.float64)
    if sigma.shape[-2:] != (DIM, DIM):
        raise ShapeError(f"covariance must be 6x6, got shape {sigma.shape}")
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise DecompositionError("covariance is not positive definite") from exc
    diag = np.diagonal(chol, axis1=-2, axis2=-1)
    lower = chol / diag[..., None, :]
    return 2.0 * np.log(diag), lower[..., TRIL_ROWS, TRIL_COLS]


def _cholesky_checked(sigma: np.ndarray) -> np.ndarray:
    cond = np.linalg.cond(sigma)
    if np.any(~np.isfinite(cond)) or np.any(cond > MAX_CONDITION):
        raise IllConditionedError(
            f"covariance condition number {np.max(cond):.3g} exceeds {MAX_CONDITION:.0e}"
        )
    try:
        return np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError as exc:
        raise IllConditionedError("covariance is not positive definite") from exc


def nll(mu, sigma, xi) -> np.ndarray | float:
    """Negative log density of ``xi`` under N(mu, sigma), including ``3 ln 2pi``.

    Vectorised over leading axes. Uses the Cholesky factor, never an explicit
    inverse.
    """
    mu = _check_last(mu, DIM, "mu")
    xi = _check_last(xi, DIM, "xi")
    sigma = np.asarray(sigma, dtype=np.float64)
    chol = _cholesky_checked(sigma)
    r = np.broadcast_to(xi - mu, chol.shape[:-1])
    z = np.linalg.solve(chol, r[..., None])[..., 0]
    logdet = 2.0 * np.sum(np.log(np.diagonal(chol, axis1=-2, axis2=-1)), axis=-1)
    out = 0.5 * (np.sum(z * z, axis=-1) + logdet + DIM * LOG_2PI)
    return float(out) if np.ndim(out) == 0 else out


def nll_ldl(mu, d, l, xi) -> np.ndarray:
    """Same density as :func:`nll`, evaluated directly from LDL parameters."""
    r = _check_last(xi, DIM, "xi") - _check_last(mu, DIM, "mu")
    lower = unit_lower(l)
    z = np.linalg.solve(lower, r[..., None])[..., 0]
    d = np.asarray(d, dtype=np.float64)
    return 0.5 * (np.sum(z * z * np.exp(-d), axis=-1) + np.sum(d, axis=-1) + DIM * LOG_2PI)


def uncertainty_score(sigma) -> np.ndarray | float:
    """Scalar spread ``sqrt(trace(sigma))``."""
    sigma = np.asarray(sigma, dtype=np.float64)
    out = np.sqrt(np.trace(sigma, axis1=-2, axis2=-1))
    return float(out) if np.ndim(out) == 0 else out


def sample(mu, sigma, seed: int, size: int | None = None) -> np.ndarray:
    """Draw ``mu + chol(sigma) @ z`` with ``z`` from a generator seeded by ``seed``."""
    mu = _check_last(mu, DIM, "mu")
    sigma = np.asarray(sigma, dtype=np.float64)
    try:
        chol = np.linalg.cholesky(sigma)
    except np.linalg.LinAlgError:
        # semidefinite input: symmetric square root instead
        w, v = np.linalg.eigh(sigma)
        chol = v * np.sqrt(np.clip(w, 0.0, None))[..., None, :]
    rng = np.random.default_rng(seed)
    shape = (DIM,) if size is None else (size, DIM)
    z = rng.standard_normal(shape)
    return mu + z @ np.swapaxes(chol, -1, -2)


@dataclass(frozen=True)
class ErrorGaussian:
    """Per-step error distribution N(mu, sigma) over twists ``[rho; phi]``."""

    mu: np.ndarray
    sigma: np.ndarray

    def __post_init__(self):
        mu = _check_last(self.mu, DIM, "mu")
        sigma = np.asarray(self.sigma, dtype=np.float64)
        if mu.shape != (DIM,) or sigma.shape != (DIM, DIM):
            raise ShapeError("ErrorGaussian holds a single 6-vector and a 6x6 matrix")
        if np.max(np.abs(sigma - sigma.T)) > 1e-9:
            raise ValidationError("sigma is not symmetric")
        if np.linalg.eigvalsh(sigma)[0] <= 0.0:
            raise ValidationError("sigma is not positive definite")
        object.__setattr__(self, "mu", mu)
        object.__setattr__(self, "sigma", sigma)

    @classmethod
    def from_ldl(cls, mu, d, l) -> "ErrorGaussian":
        return cls(np.asarray(mu, dtype=np.float64), ldl_to_cov(d, l))

    def nll(self, xi) -> float:
        return nll(self.mu, self.sigma, xi)

    def sample(self, seed: int) -> np.ndarray:
        return sample(self.mu, self.sigma, seed)

    @property
    def uncertainty(self) -> float:
        return uncertainty_score(self.sigma)
