"""A small dense-tensor engine with define-by-run reverse-mode differentiation.

Operations are recorded only while a :class:`Tape` is active on the current
thread; outside a tape every op is a plain numpy computation. Example::

    w = Tensor(np.ones((3, 2)), requires_grad=True)
    with Tape() as tape:
        loss = (x @ w).silu().sum()
    tape.backward(loss)      # w.grad now holds dloss/dw

Leaf gradients accumulate across repeated ``backward`` calls until
:meth:`Tensor.zero_grad` is called. A tape and the tensors it records belong
to one thread; separate tapes may run concurrently.

All data is float64. Elementwise ops follow numpy broadcasting and reduce
gradients back to each operand's shape; ``matmul`` broadcasts only leading
batch axes.
"""

from __future__ import annotations

import threading
import weakref
from typing import Callable, Sequence

import numpy as np

from .errors import ShapeError

_state = threading.local()

VJP = Callable[[np.ndarray, Sequence[bool]], Sequence["np.ndarray | None"]]


def _tape_stack() -> list:
    stack = getattr(_state, "stack", None)
    if stack is None:
        stack = _state.stack = []
    return stack


def active_tape() -> "Tape | None":
    stack = _tape_stack()
    return stack[-1] if stack else None


class _Record:
    __slots__ = ("out", "inputs", "vjp")

    def __init__(self, out, inputs, vjp):
        self.out = out
        self.inputs = inputs
        self.vjp = vjp


class Tape:
    """Ordered log of differentiable operations (execution order is topological)."""

    def __init__(self):
        self.records: list[_Record] = []

    def __enter__(self) -> "Tape":
        _tape_stack().append(self)
        return self

    def __exit__(self, *exc):
        stack = _tape_stack()
        if stack and stack[-1] is self:
            stack.pop()
        return False

    def __len__(self):
        return len(self.records)

    def backward(self, loss: "Tensor", grad: np.ndarray | None = None) -> None:
        """Populate ``.grad`` of every leaf that ``loss`` depends on.

        ``loss`` must be a single-element tensor unless an explicit seed
        gradient is given.
        """
        if grad is None:
            if loss.data.size != 1:
                raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")
            grad = np.ones_like(loss.data)
        grads: dict[int, np.ndarray] = {id(loss): np.asarray(grad, dtype=np.float64)}
        for rec in reversed(self.records):
            g = grads.pop(id(rec.out), None)
            if g is None:
                continue
            needs = [t.requires_grad for t in rec.inputs]
            for t, gi, need in zip(rec.inputs, rec.vjp(g, needs), needs):
                if not need or gi is None:
                    continue
                if t._recorded:
                    key = id(t)
                    prev = grads.get(key)
                    grads[key] = gi if prev is None else prev + gi
                else:
                    t.grad = np.array(gi, dtype=np.float64) if t.grad is None else t.grad + gi


def backward(loss: "Tensor") -> None:
    """Backpropagate through the tape that produced ``loss``."""
    if loss._tape is not None:
        tape = loss._tape()
        if tape is None:
            raise RuntimeError("the tape that recorded this loss no longer exists; keep a reference to it")
        tape.backward(loss)
        return
    if loss.data.size != 1:
        raise ShapeError(f"backward needs a scalar loss, got shape {loss.shape}")


def _unbroadcast(g: np.ndarray, shape: tuple) -> np.ndarray:
    if g.shape == shape:
        return g
    extra = g.ndim - len(shape)
    if extra > 0:
        g = g.sum(axis=tuple(range(extra)))
    axes = tuple(i for i, n in enumerate(shape) if n == 1 and g.shape[i] != 1)
    if axes:
        g = g.sum(axis=axes, keepdims=True)
    return g.reshape(shape)


def as_tensor(x) -> "Tensor":
    return x if isinstance(x, Tensor) else Tensor(x)


def apply_op(data: np.ndarray, inputs: Sequence["Tensor"], vjp: VJP) -> "Tensor":
    """Wrap ``data`` as the output of a custom differentiable op.

    ``vjp(g, needs)`` receives the output gradient and a flag per input and
    returns one gradient (or None) per input.
    """
    out = Tensor(data)
    tape = active_tape()
    if tape is not None and any(t.requires_grad for t in inputs):
        out.requires_grad = True
        out._recorded = True
        # weak, so tensors and records do not form a cycle with the tape
        out._tape = weakref.ref(tape)
        tape.records.append(_Record(out, tuple(inputs), vjp))
    return out


def _check_broadcast(a: np.ndarray, b: np.ndarray, op: str) -> None:
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise ShapeError(f"{op}: incompatible shapes {a.shape} and {b.shape}") from None


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "name", "_recorded", "_tape", "__weakref__")

    __array_priority__ = 100.0

    def __init__(self, data, requires_grad: bool = False, name: str | None = None):
        self.data = np.asarray(data, dtype=np.float64)
        self.requires_grad = requires_grad
        self.grad: np.ndarray | None = None
        self.name = name
        self._recorded = False
        self._tape = None

    def __repr__(self):
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}{tag}, requires_grad={self.requires_grad})"

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def ndim(self) -> int:
        return self.data.ndim

    @property
    def size(self) -> int:
        return self.data.size

    def numpy(self) -> np.ndarray:
        return self.data

    def item(self) -> float:
        return float(self.data.reshape(-1)[0]) if self.data.size == 1 else float(self.data)

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def zero_grad(self) -> None:
        self.grad = None

    # arithmetic -----------------------------------------------------------

    def __add__(self, other):
        return add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return sub(self, other)

    def __rsub__(self, other):
        return sub(as_tensor(other), self)

    def __mul__(self, other):
        return mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return div(self, other)

    def __rtruediv__(self, other):
        return div(as_tensor(other), self)

    def __neg__(self):
        return apply_op(-self.data, (self,), lambda g, n: (-g,))

    def __pow__(self, p: float):
        return power(self, p)

    def __matmul__(self, other):
        return matmul(self, other)

    def __getitem__(self, idx):
        return getitem(self, idx)

    # method forms ---------------------------------------------------------

    def sum(self, axis=None, keepdims: bool = False):
        return tsum(self, axis, keepdims)

    def mean(self, axis=None, keepdims: bool = False):
        return mean(self, axis, keepdims)

    def reshape(self, *shape):
        if len(shape) == 1 and isinstance(shape[0], (tuple, list)):
            shape = tuple(shape[0])
        return reshape(self, shape)

    def transpose(self, *axes):
        if len(axes) == 1 and isinstance(axes[0], (tuple, list)):
            axes = tuple(axes[0])
        return transpose(self, axes or None)

    def exp(self):
        return exp(self)

    def log(self):
        return log(self)

    def silu(self):
        return silu(self)

    def sigmoid(self):
        return sigmoid(self)

    def softplus(self):
        return softplus(self)


def add(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "add")
    sa, sb = a.shape, b.shape
    return apply_op(
        a.data + b.data,
        (a, b),
        lambda g, n: (_unbroadcast(g, sa) if n[0] else None, _unbroadcast(g, sb) if n[1] else None),
    )


def sub(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "sub")
    sa, sb = a.shape, b.shape
    return apply_op(
        a.data - b.data,
        (a, b),
        lambda g, n: (_unbroadcast(g, sa) if n[0] else None, _unbroadcast(-g, sb) if n[1] else None),
    )


def mul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "mul")
    ad, bd = a.data, b.data

    def vjp(g, n):
        return (
            _unbroadcast(g * bd, ad.shape) if n[0] else None,
            _unbroadcast(g * ad, bd.shape) if n[1] else None,
        )

    return apply_op(ad * bd, (a, b), vjp)


def div(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    _check_broadcast(a.data, b.data, "div")
    ad, bd = a.data, b.data
    out = ad / bd

    def vjp(g, n):
        return (
            _unbroadcast(g / bd, ad.shape) if n[0] else None,
            _unbroadcast(-g * out / bd, bd.shape) if n[1] else None,
        )

    return apply_op(out, (a, b), vjp)


def power(a, p: float) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return apply_op(x**p, (a,), lambda g, n: (g * p * x ** (p - 1),))


def matmul(a, b) -> Tensor:
    a, b = as_tensor(a), as_tensor(b)
    ad, bd = a.data, b.data
    if ad.ndim < 2 or bd.ndim < 2 or ad.shape[-1] != bd.shape[-2]:
        raise ShapeError(f"matmul: incompatible shapes {ad.shape} and {bd.shape}")
    try:
        np.broadcast_shapes(ad.shape[:-2], bd.shape[:-2])
    except ValueError:
        raise ShapeError(f"matmul: batch dims of {ad.shape} and {bd.shape} do not broadcast") from None

    def vjp(g, n):
        ga = _unbroadcast(g @ np.swapaxes(bd, -1, -2), ad.shape) if n[0] else None
        gb = _unbroadcast(np.swapaxes(ad, -1, -2) @ g, bd.shape) if n[1] else None
        return ga, gb

    return apply_op(ad @ bd, (a, b), vjp)


def exp(a) -> Tensor:
    a = as_tensor(a)
    out = np.exp(a.data)
    return apply_op(out, (a,), lambda g, n: (g * out,))


def log(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    return apply_op(np.log(x), (a,), lambda g, n: (g / x,))


def _expit(x: np.ndarray) -> np.ndarray:
    # clipping keeps exp finite; the result saturates long before +-700 anyway
    return 1.0 / (1.0 + np.exp(-np.clip(x, -700.0, 700.0)))


def sigmoid(a) -> Tensor:
    a = as_tensor(a)
    s = _expit(a.data)
    return apply_op(s, (a,), lambda g, n: (g * s * (1.0 - s),))


def softplus(a) -> Tensor:
    a = as_tensor(a)
    x = a.data
    out = np.maximum(x, 0.0) + np.log1p(np.exp(-np.abs(x)))
    return apply_op(out, (a,), lambda g, n: (g * _expit(x),))


def silu(a) -> Tensor:
    """``x * sigmoid(x)``."""
    a = as_tensor(a)
    x = a.data
    s = _expit(x)
    return apply_op(x * s, (a,), lambda g, n: (g * s * (1.0 + x * (1.0 - s)),))


def tanh(a) -> Tensor:
    a = as_tensor(a)
    t = np.tanh(a.data)
    return apply_op(t, (a,), lambda g, n: (g * (1.0 - t * t),))


def tsum(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    shape = a.shape

    def vjp(g, n):
        if axis is not None and not keepdims:
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, shape),)

    return apply_op(a.data.sum(axis=axis, keepdims=keepdims), (a,), vjp)


def mean(a, axis=None, keepdims: bool = False) -> Tensor:
    a = as_tensor(a)
    count = a.data.size if axis is None else int(np.prod([a.shape[i] for i in np.atleast_1d(axis)]))
    return tsum(a, axis, keepdims) * (1.0 / count)


def reshape(a, shape) -> Tensor:
    a = as_tensor(a)
    old = a.shape
    try:
        out = a.data.reshape(shape)
    except ValueError:
        raise ShapeError(f"reshape: cannot reshape {old} into {tuple(shape)}") from None
    return apply_op(out, (a,), lambda g, n: (g.reshape(old),))


def transpose(a, axes=None) -> Tensor:
    a = as_tensor(a)
    inv = None if axes is None else np.argsort(axes)
    return apply_op(np.transpose(a.data, axes), (a,), lambda g, n: (np.transpose(g, inv),))


def swapaxes(a, i: int, j: int) -> Tensor:
    a = as_tensor(a)
    return apply_op(np.swapaxes(a.data, i, j), (a,), lambda g, n: (np.swapaxes(g, i, j),))


def _is_basic_index(idx) -> bool:
    items = idx if isinstance(idx, tuple) else (idx,)
    return all(isinstance(i, (slice, int, np.integer, type(Ellipsis), type(None))) for i in items)


def getitem(a, idx) -> Tensor:
    a = as_tensor(a)
    shape = a.shape
    basic = _is_basic_index(idx)

    def vjp(g, n):
        full = np.zeros(shape)
        if basic:
            full[idx] = g
        else:
            np.add.at(full, idx, g)
        return (full,)

    return apply_op(a.data[idx], (a,), vjp)


def concat(tensors: Sequence, axis: int = 0) -> Tensor:
    """Join tensors along ``axis``; all other dimensions must agree."""
    tensors = [as_tensor(t) for t in tensors]
    if not tensors:
        raise ShapeError("concat needs at least one tensor")
    ref = tensors[0].shape
    ax = axis % len(ref)
    for t in tensors[1:]:
        if t.ndim != len(ref) or any(t.shape[i] != ref[i] for i in range(len(ref)) if i != ax):
            raise ShapeError(f"concat: shapes {ref} and {t.shape} differ off axis {axis}")
    sizes = [t.shape[ax] for t in tensors]
    bounds = np.cumsum(sizes)[:-1]

    def vjp(g, n):
        return np.split(g, bounds, axis=ax)

    return apply_op(np.concatenate([t.data for t in tensors], axis=ax), tensors, vjp)


def conv1d_causal_depthwise(x, kernel) -> Tensor:
    """Per-channel causal convolution of ``x [B, C, T]`` with ``kernel [C, W]``.

    ``y[b, c, t] = sum_w kernel[c, w] * x[b, c, t - (W - 1) + w]`` with
    out-of-range inputs read as zero, so the output never sees the future.
    """
    x, kernel = as_tensor(x), as_tensor(kernel)
    if x.ndim != 3 or kernel.ndim != 2 or x.shape[1] != kernel.shape[0] or kernel.shape[1] < 1:
        raise ShapeError(f"conv1d: incompatible shapes x={x.shape} kernel={kernel.shape}")
    b, c, t = x.shape
    w = kernel.shape[1]
    k = kernel.data
    xp = np.concatenate([np.zeros((b, c, w - 1)), x.data], axis=-1)
    out = np.zeros((b, c, t))
    for j in range(w):
        out += k[None, :, j, None] * xp[:, :, j : j + t]

    def vjp(g, n):
        gx = gk = None
        if n[0]:
            gp = np.zeros_like(xp)
            for j in range(w):
                gp[:, :, j : j + t] += k[None, :, j, None] * g
            gx = gp[:, :, w - 1 :]
        if n[1]:
            gk = np.stack([np.einsum("bct,bct->c", g, xp[:, :, j : j + t]) for j in range(w)], axis=1)
        return gx, gk

    return apply_op(out, (x, kernel), vjp)


def clip(a, lo: float, hi: float) -> Tensor:
    """Clamp to ``[lo, hi]``; the gradient is zero wherever the clamp is active."""
    a = as_tensor(a)
    x = a.data
    inside = (x >= lo) & (x <= hi)
    return apply_op(np.clip(x, lo, hi), (a,), lambda g, n: (g * inside,))


def rms_norm(x, weight, eps: float = 1e-6) -> Tensor:
    """``x / sqrt(mean(x**2, -1) + eps) * weight`` over the last axis."""
    x, weight = as_tensor(x), as_tensor(weight)
    xd, wd = x.data, weight.data
    if wd.shape != xd.shape[-1:]:
        raise ShapeError(f"rms_norm: weight {wd.shape} vs input {xd.shape}")
    r = 1.0 / np.sqrt(np.mean(xd * xd, axis=-1, keepdims=True) + eps)
    xn = xd * r

    def vjp(g, n):
        gx = gw = None
        if n[0]:
            gh = g * wd
            gx = r * (gh - xn * np.mean(gh * xn, axis=-1, keepdims=True))
        if n[1]:
            gw = (g * xn).reshape(-1, wd.shape[0]).sum(axis=0)
        return gx, gw

    return apply_op(xn * wd, (x, weight), vjp)
