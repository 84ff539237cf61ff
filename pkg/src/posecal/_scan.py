"""Fused selective-scan kernels (forward and vector-Jacobian product).

Layouts: ``delta, x: [N, T, d]``, ``b, c: [N, T, s]``, ``a: [d, s]`` holding
the (negative) continuous-time decay rates and ``decay = exp(delta * a)`` as
``[N, T, d, s]``. The decay factors are computed by the caller, where numpy's
vectorised ``exp`` is several times faster than a scalar one in the loop.
"""

import numba
import numpy as np


@numba.njit(cache=True)
def scan_forward(decay, delta, b, c, x):
    n_batch, t_len, d = x.shape
    s = decay.shape[3]
    y = np.zeros((n_batch, t_len, d))
    h = np.empty((n_batch, t_len, d, s))
    for n in range(n_batch):
        state = np.zeros((d, s))
        for t in range(t_len):
            for ch in range(d):
                u = delta[n, t, ch] * x[n, t, ch]
                acc = 0.0
                for k in range(s):
                    v = decay[n, t, ch, k] * state[ch, k] + u * b[n, t, k]
                    state[ch, k] = v
                    h[n, t, ch, k] = v
                    acc += c[n, t, k] * v
                y[n, t, ch] = acc
    return y, h


@numba.njit(cache=True)
def scan_backward(gy, delta, a, b, c, x, h, decay):
    n_batch, t_len, d = x.shape
    s = a.shape[1]
    g_delta = np.zeros((n_batch, t_len, d))
    g_x = np.zeros((n_batch, t_len, d))
    g_b = np.zeros((n_batch, t_len, s))
    g_c = np.zeros((n_batch, t_len, s))
    g_a = np.zeros((d, s))
    for n in range(n_batch):
        carry = np.zeros((d, s))
        for t in range(t_len - 1, -1, -1):
            for ch in range(d):
                dt = delta[n, t, ch]
                xt = x[n, t, ch]
                gyt = gy[n, t, ch]
                gd = 0.0
                gx = 0.0
                for k in range(s):
                    bt = b[n, t, k]
                    g_c[n, t, k] += gyt * h[n, t, ch, k]
                    gh = gyt * c[n, t, k] + carry[ch, k]
                    dec = decay[n, t, ch, k]
                    h_prev = h[n, t - 1, ch, k] if t > 0 else 0.0
                    g_dec = gh * h_prev * dec
                    gd += g_dec * a[ch, k] + gh * bt * xt
                    g_a[ch, k] += g_dec * dt
                    gx += gh * bt * dt
                    g_b[n, t, k] += gh * dt * xt
                    carry[ch, k] = dec * gh
                g_delta[n, t, ch] = gd
                g_x[n, t, ch] = gx
    return g_delta, g_a, g_b, g_c, g_x


@numba.njit(cache=True)
def scan_inference(decay, delta, b, c, x):
    """Forward pass without saving intermediates."""
    n_batch, t_len, d = x.shape
    s = decay.shape[3]
    y = np.zeros((n_batch, t_len, d))
    state = np.zeros((d, s))
    for n in range(n_batch):
        state[:] = 0.0
        for t in range(t_len):
            for ch in range(d):
                u = delta[n, t, ch] * x[n, t, ch]
                acc = 0.0
                for k in range(s):
                    v = decay[n, t, ch, k] * state[ch, k] + u * b[n, t, k]
                    state[ch, k] = v
                    acc += c[n, t, k] * v
                y[n, t, ch] = acc
    return y
