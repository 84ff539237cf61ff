"""Central finite-difference oracle for taped functions."""

import numpy as np

from posecal.autodiff import Tape, Tensor


def numeric_grad(f, x: np.ndarray, h: float = 1e-5, indices=None) -> np.ndarray:
    """d f / d x by central differences; ``f`` maps the perturbed array to a float."""
    grad = np.zeros_like(x)
    flat = x.reshape(-1)
    out = grad.reshape(-1)
    for i in (range(flat.size) if indices is None else indices):
        old = flat[i]
        flat[i] = old + h
        fp = f(x)
        flat[i] = old - h
        fm = f(x)
        flat[i] = old
        out[i] = (fp - fm) / (2 * h)
    return grad


def rel_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    return float(np.linalg.norm(analytic - numeric) / max(np.linalg.norm(analytic), 1e-8))


def check_op(fn, *arrays, h: float = 1e-5, seed: int = 0) -> list[float]:
    """Relative gradient error of each input of ``fn`` under a random projection of its output."""
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    tensors = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = fn(*tensors)
        proj = np.random.default_rng(seed).standard_normal(out.shape)
        loss = (out * proj).sum()
    tape.backward(loss)

    errors = []
    for k, a in enumerate(arrays):
        def f(x, k=k):
            args = [Tensor(x) if j == k else Tensor(arrays[j]) for j in range(len(arrays))]
            return float(np.sum(fn(*args).data * proj))
        errors.append(rel_error(tensors[k].grad, numeric_grad(f, a.copy(), h)))
    return errors
