"""Fused CPU kernels for bandwidth-bound reductions in the training step.

Softmax/gelu forwards stay vectorized numpy (libm loops lose to SIMD there);
what lives here are the multi-pass reductions that numpy cannot fuse: softmax
backward, layernorm forward/backward, and the per-batch modulation ops.
Each kernel has a straightforward numpy counterpart in the test suite that
serves as its correctness oracle.
"""

from __future__ import annotations

import numpy as np
from numba import njit


@njit(cache=True, fastmath=True, nogil=True)
def softmax_bwd(y, g):
    """Backward of row softmax: dx = y * (g - sum(y * g))."""
    rows, cols = y.shape
    dx = np.empty_like(y)
    for r in range(rows):
        dot = 0.0
        for c in range(cols):
            dot += y[r, c] * g[r, c]
        for c in range(cols):
            dx[r, c] = y[r, c] * (g[r, c] - dot)
    return dx


@njit(cache=True, fastmath=True, nogil=True)
def layernorm_fwd(x, eps):
    """Normalize rows of a 2-D array to zero mean / unit variance (no affine).

    Returns (xhat, inv_std); both are needed by the backward pass.
    """
    rows, cols = x.shape
    y = np.empty_like(x)
    inv_std = np.empty(rows, dtype=x.dtype)
    for r in range(rows):
        mu = 0.0
        for c in range(cols):
            mu += x[r, c]
        mu /= cols
        var = 0.0
        for c in range(cols):
            d = x[r, c] - mu
            var += d * d
        var /= cols
        inv = 1.0 / np.sqrt(var + eps)
        inv_std[r] = inv
        for c in range(cols):
            y[r, c] = (x[r, c] - mu) * inv
    return y, inv_std


@njit(cache=True, fastmath=True, nogil=True)
def layernorm_bwd(xhat, inv_std, g):
    """dx = inv_std * (g - mean(g) - xhat * mean(g * xhat)) per row."""
    rows, cols = xhat.shape
    dx = np.empty_like(xhat)
    for r in range(rows):
        mg = 0.0
        mgx = 0.0
        for c in range(cols):
            mg += g[r, c]
            mgx += g[r, c] * xhat[r, c]
        mg /= cols
        mgx /= cols
        for c in range(cols):
            dx[r, c] = inv_std[r] * (g[r, c] - mg - xhat[r, c] * mgx)
    return dx


@njit(cache=True, fastmath=True, nogil=True)
def modulate_fwd(x, scale, shift):
    """y[b, n, :] = x[b, n, :] * (1 + scale[b, :]) + shift[b, :]."""
    b, n, c = x.shape
    y = np.empty_like(x)
    for i in range(b):
        for j in range(n):
            for k in range(c):
                y[i, j, k] = x[i, j, k] * (1.0 + scale[i, k]) + shift[i, k]
    return y


@njit(cache=True, fastmath=True, nogil=True)
def modulate_bwd(x, scale, g):
    b, n, c = x.shape
    dx = np.empty_like(x)
    dscale = np.zeros_like(scale)
    dshift = np.zeros_like(scale)
    for i in range(b):
        for j in range(n):
            for k in range(c):
                dx[i, j, k] = g[i, j, k] * (1.0 + scale[i, k])
                dscale[i, k] += g[i, j, k] * x[i, j, k]
                dshift[i, k] += g[i, j, k]
    return dx, dscale, dshift


@njit(cache=True, fastmath=True, nogil=True)
def gated_add_fwd(x, u, gate):
    """y[b, n, :] = x[b, n, :] + u[b, n, :] * (1 + gate[b, :])."""
    b, n, c = x.shape
    y = np.empty_like(x)
    for i in range(b):
        for j in range(n):
            for k in range(c):
                y[i, j, k] = x[i, j, k] + u[i, j, k] * (1.0 + gate[i, k])
    return y


@njit(cache=True, fastmath=True, nogil=True)
def gated_add_bwd(u, gate, g):
    b, n, c = u.shape
    du = np.empty_like(u)
    dgate = np.zeros_like(gate)
    for i in range(b):
        for j in range(n):
            for k in range(c):
                du[i, j, k] = g[i, j, k] * (1.0 + gate[i, k])
                dgate[i, k] += g[i, j, k] * u[i, j, k]
    return du, dgate
