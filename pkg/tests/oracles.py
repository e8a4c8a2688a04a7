"""Slow reference implementations used only as test oracles."""

import numpy as np

from adaptfec.lstm import PARAM_ORDER, bce_loss


def slow_mul(a, b):
    """Shift-and-add multiply with reduction by 0x11D; shares nothing with the tables."""
    r = 0
    while b:
        if b & 1:
            r ^= a
        b >>= 1
        a <<= 1
        if a & 0x100:
            a ^= 0x11D
    return r


def slow_inv(a):
    return next(x for x in range(1, 256) if slow_mul(a, x) == 1)


def finite_diff_grads(model, x, y, h=1e-4):
    out = {}
    for name in PARAM_ORDER:
        p = model.params[name]
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = bce_loss(model, x, y)
            p[idx] = old - h
            dn = bce_loss(model, x, y)
            p[idx] = old
            g[idx] = (up - dn) / (2 * h)
        out[name] = g
    return out


def rel_err(a, n):
    # floor keeps entries that are zero up to FD noise from dominating
    return np.abs(a - n) / np.maximum(np.abs(a) + np.abs(n), 1e-7)
