"""SE(3) and SO(3) group operations on plain numpy arrays.

Conventions used throughout the package:

* A pose is a 4x4 homogeneous matrix ``[[R, t], [0, 1]]``; batches carry
  leading axes (``[..., 4, 4]``).
* A twist is a 6-vector ordered translation first, ``[rho; phi]``. Every
  6x6 covariance in the package uses the same block order.
* Pose errors live in the global (left-multiplied) frame:
  ``T_err = T_gt @ inv(T_hat)`` and a correction is ``exp(mu) @ T_hat``.

All functions are pure and vectorised over leading axes.
"""

from __future__ import annotations

import numpy as np

from .errors import BranchCutError, ShapeError, ValidationError

# Below this rotation angle exp/log switch to Taylor expansions.
SMALL_ANGLE = 1e-8
# Logs closer than this to pi are refused (non-unique principal branch).
BRANCH_CUT_MARGIN = 1e-6
# The SE(3) Jacobian coefficients divide by theta**5; they need a wider series band.
_JACOBIAN_SERIES_ANGLE = 1e-2


def _as_vec(x, n: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-1:] != (n,):
        raise ShapeError(f"{name} must have trailing dimension {n}, got shape {x.shape}")
    if not np.all(np.isfinite(x)):
        raise ValidationError(f"{name} contains non-finite values")
    return x


def _as_mat(x, n: int, name: str) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.shape[-2:] != (n, n):
        raise ShapeError(f"{name} must have trailing shape ({n}, {n}), got {x.shape}")
    return x


def skew(v) -> np.ndarray:
    """Map 3-vectors ``[..., 3]`` to skew-symmetric matrices ``[..., 3, 3]``."""
    v = np.asarray(v, dtype=np.float64)
    if v.shape[-1:] != (3,):
        raise ShapeError(f"skew expects trailing dimension 3, got shape {v.shape}")
    out = np.zeros(v.shape[:-1] + (3, 3))
    x, y, z = v[..., 0], v[..., 1], v[..., 2]
    out[..., 0, 1] = -z
    out[..., 0, 2] = y
    out[..., 1, 0] = z
    out[..., 1, 2] = -x
    out[..., 2, 0] = -y
    out[..., 2, 1] = x
    return out


def unskew(m) -> np.ndarray:
    m = _as_mat(m, 3, "matrix")
    return np.stack([m[..., 2, 1], m[..., 0, 2], m[..., 1, 0]], axis=-1)


def hat(xi) -> np.ndarray:
    """Twist ``[..., 6]`` to its 4x4 Lie-algebra matrix."""
    xi = _as_vec(xi, 6, "twist")
    out = np.zeros(xi.shape[:-1] + (4, 4))
    out[..., :3, :3] = skew(xi[..., 3:])
    out[..., :3, 3] = xi[..., :3]
    return out


def vee(m) -> np.ndarray:
    m = _as_mat(m, 4, "se(3) matrix")
    return np.concatenate([m[..., :3, 3], unskew(m[..., :3, :3])], axis=-1)


def make_pose(rotation=None, translation=None) -> np.ndarray:
    """Assemble homogeneous matrices from rotations and/or translations."""
    if rotation is None and translation is None:
        return np.eye(4)
    if rotation is None:
        translation = np.asarray(translation, dtype=np.float64)
        rotation = np.broadcast_to(np.eye(3), translation.shape[:-1] + (3, 3))
    rotation = np.asarray(rotation, dtype=np.float64)
    if translation is None:
        translation = np.zeros(rotation.shape[:-2] + (3,))
    translation = np.asarray(translation, dtype=np.float64)
    batch = np.broadcast_shapes(rotation.shape[:-2], translation.shape[:-1])
    out = np.zeros(batch + (4, 4))
    out[..., :3, :3] = rotation
    out[..., :3, 3] = translation
    out[..., 3, 3] = 1.0
    return out


def rot_x(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[1.0, 0.0, 0.0], [0.0, c, -s], [0.0, s, c]])


def rot_y(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, 0.0, s], [0.0, 1.0, 0.0], [-s, 0.0, c]])


def rot_z(angle: float) -> np.ndarray:
    c, s = np.cos(angle), np.sin(angle)
    return np.array([[c, -s, 0.0], [s, c, 0.0], [0.0, 0.0, 1.0]])


def check_rotation(r, tol: float = 1e-9) -> None:
    """Raise ``ValidationError`` unless every matrix in ``r`` lies on SO(3)."""
    r = _as_mat(r, 3, "rotation")
    if not np.all(np.isfinite(r)):
        raise ValidationError("rotation contains non-finite values")
    rtr = np.swapaxes(r, -1, -2) @ r
    if np.max(np.abs(rtr - np.eye(3)), initial=0.0) > tol:
        raise ValidationError("rotation is not orthonormal")
    if np.max(np.abs(np.linalg.det(r) - 1.0), initial=0.0) > tol:
        raise ValidationError("rotation determinant is not +1")


def check_pose(t, tol: float = 1e-9) -> None:
    t = _as_mat(t, 4, "pose")
    check_rotation(t[..., :3, :3], tol)
    if not np.all(np.isfinite(t[..., :3, 3])):
        raise ValidationError("translation contains non-finite values")
    bottom = t[..., 3, :]
    if np.max(np.abs(bottom - np.array([0.0, 0.0, 0.0, 1.0])), initial=0.0) > tol:
        raise ValidationError("pose bottom row must be [0, 0, 0, 1]")


def _rodrigues_coeffs(theta: np.ndarray):
    """Return A = sin/t, B = (1-cos)/t^2, C = (t-sin)/t^3 with series near zero."""
    small = theta < SMALL_ANGLE
    t = np.where(small, 1.0, theta)
    t2 = theta * theta
    a = np.where(small, 1.0 - t2 / 6.0, np.sin(t) / t)
    # 1 - cos(t) written as 2 sin^2(t/2) avoids cancellation.
    b = np.where(small, 0.5 - t2 / 24.0, 2.0 * np.sin(0.5 * t) ** 2 / (t * t))
    c = np.where(small, 1.0 / 6.0 - t2 / 120.0, (t - np.sin(t)) / (t * t * t))
    return a, b, c


def exp_so3(phi) -> np.ndarray:
    phi = _as_vec(phi, 3, "rotation vector")
    theta = np.linalg.norm(phi, axis=-1)
    a, b, _ = _rodrigues_coeffs(theta)
    k = skew(phi)
    return np.eye(3) + a[..., None, None] * k + b[..., None, None] * (k @ k)


def log_so3(r) -> np.ndarray:
    """Principal rotation vector of ``r``; raises ``BranchCutError`` near pi."""
    r = _as_mat(r, 3, "rotation")
    w = 0.5 * unskew(r - np.swapaxes(r, -1, -2))
    sin_t = np.linalg.norm(w, axis=-1)
    cos_t = 0.5 * (np.trace(r, axis1=-2, axis2=-1) - 1.0)
    theta = np.arctan2(sin_t, cos_t)
    if np.any(theta > np.pi - BRANCH_CUT_MARGIN):
        raise BranchCutError(
            "rotation angle within %.0e of pi; split the window" % BRANCH_CUT_MARGIN
        )
    small = theta < SMALL_ANGLE
    s = np.where(small, 1.0, sin_t)
    scale = np.where(small, 1.0 + theta * theta / 6.0, theta / s)
    return scale[..., None] * w


def exp_se3(xi) -> np.ndarray:
    """Closed-form SE(3) exponential of twists ``[..., 6]`` -> ``[..., 4, 4]``."""
    xi = _as_vec(xi, 6, "twist")
    rho, phi = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(phi, axis=-1)
    a, b, c = _rodrigues_coeffs(theta)
    k = skew(phi)
    k2 = k @ k
    eye = np.eye(3)
    rot = eye + a[..., None, None] * k + b[..., None, None] * k2
    v = eye + b[..., None, None] * k + c[..., None, None] * k2
    return make_pose(rot, (v @ rho[..., None])[..., 0])


def log_se3(t) -> np.ndarray:
    """Principal twist of poses ``[..., 4, 4]``; inverse of :func:`exp_se3`."""
    t = _as_mat(t, 4, "pose")
    phi = log_so3(t[..., :3, :3])
    theta = np.linalg.norm(phi, axis=-1)
    small = theta < SMALL_ANGLE
    th = np.where(small, 1.0, theta)
    half = 0.5 * th
    # (1 - (t/2) cot(t/2)) / t^2, the phi^2 coefficient of the inverse left Jacobian
    d = np.where(
        small,
        1.0 / 12.0 + theta * theta / 720.0,
        (1.0 - half * np.cos(half) / np.sin(half)) / (th * th),
    )
    k = skew(phi)
    v_inv = np.eye(3) - 0.5 * k + d[..., None, None] * (k @ k)
    rho = (v_inv @ t[..., :3, 3][..., None])[..., 0]
    return np.concatenate([rho, phi], axis=-1)


def inverse(t) -> np.ndarray:
    t = _as_mat(t, 4, "pose")
    rt = np.swapaxes(t[..., :3, :3], -1, -2)
    return make_pose(rt, -(rt @ t[..., :3, 3][..., None])[..., 0])


def compose(a, b) -> np.ndarray:
    return _as_mat(a, 4, "pose") @ _as_mat(b, 4, "pose")


def pose_error(t_gt, t_hat) -> np.ndarray:
    """Global-frame error ``T_gt @ inv(T_hat)``."""
    return compose(t_gt, inverse(t_hat))


def correct_pose(mu, t_hat) -> np.ndarray:
    """Apply a predicted error mean: ``exp(mu) @ T_hat``."""
    return compose(exp_se3(mu), t_hat)


def geodesic_distance(ra, rb) -> np.ndarray | float:
    """Rotation angle between ``ra`` and ``rb`` in radians, in ``[0, pi]``."""
    ra = _as_mat(ra, 3, "rotation")
    rb = _as_mat(rb, 3, "rotation")
    tr = np.trace(ra @ np.swapaxes(rb, -1, -2), axis1=-2, axis2=-1)
    out = np.arccos(np.clip(0.5 * (tr - 1.0), -1.0, 1.0))
    return float(out) if np.ndim(out) == 0 else out


def so3_left_jacobian(phi) -> np.ndarray:
    phi = _as_vec(phi, 3, "rotation vector")
    theta = np.linalg.norm(phi, axis=-1)
    _, b, c = _rodrigues_coeffs(theta)
    k = skew(phi)
    return np.eye(3) + b[..., None, None] * k + c[..., None, None] * (k @ k)


def se3_left_jacobian(xi) -> np.ndarray:
    """Left Jacobian of SE(3), ``[..., 6, 6]``.

    Satisfies ``exp(xi + d) ~= exp(J(xi) d) @ exp(xi)`` to first order in ``d``.
    """
    xi = _as_vec(xi, 6, "twist")
    rho, phi = xi[..., :3], xi[..., 3:]
    theta = np.linalg.norm(phi, axis=-1)
    series = theta < _JACOBIAN_SERIES_ANGLE
    t = np.where(series, 1.0, theta)
    t2 = theta * theta
    t4 = t2 * t2
    s, cs = np.sin(t), np.cos(t)
    c1 = np.where(series, 1 / 6 - t2 / 120 + t4 / 5040, (t - s) / t**3)
    c2 = np.where(series, 1 / 24 - t2 / 720 + t4 / 40320, (0.5 * t * t + cs - 1.0) / t**4)
    c3 = np.where(series, 1 / 120 - t2 / 2520 + t4 / 120960, (2.0 * t - 3.0 * s + t * cs) / (2.0 * t**5))
    p = skew(phi)
    r = skew(rho)
    pr = p @ r
    rp = r @ p
    prp = pr @ p
    pp = p @ p
    q = (
        0.5 * r
        + c1[..., None, None] * (pr + rp + prp)
        + c2[..., None, None] * (pp @ r + rp @ p - 3.0 * prp)
        + c3[..., None, None] * (prp @ p + pp @ rp)
    )
    j = so3_left_jacobian(phi)
    out = np.zeros(xi.shape[:-1] + (6, 6))
    out[..., :3, :3] = j
    out[..., :3, 3:] = q
    out[..., 3:, 3:] = j
    return out


def adjoint(t) -> np.ndarray:
    """6x6 adjoint ``[[R, t^ R], [0, R]]`` for twists ordered ``[rho; phi]``."""
    t = _as_mat(t, 4, "pose")
    rot = t[..., :3, :3]
    out = np.zeros(t.shape[:-2] + (6, 6))
    out[..., :3, :3] = rot
    out[..., :3, 3:] = skew(t[..., :3, 3]) @ rot
    out[..., 3:, 3:] = rot
    return out
