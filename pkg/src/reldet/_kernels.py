"""Numba-compiled inner loops for convolution.

IEEE-strict (no fastmath) and thread-deterministic: parallel ranges always
partition writes, so results are identical regardless of thread count or
scheduling. All arrays are float64, batch-major, channels-last.
"""

from __future__ import annotations

import numpy as np
from numba import njit, prange


@njit(parallel=True, cache=True)
def conv_forward(xp: np.ndarray, w: np.ndarray, bias: np.ndarray,
                 stride: int, ho: int, wo: int) -> np.ndarray:
    """Cross-correlate padded input (B,Hp,Wp,Cin) with (k,k,Cin,Cout) kernels."""
    B = xp.shape[0]
    cin = xp.shape[3]
    k = w.shape[0]
    cout = w.shape[3]
    y = np.empty((B, ho, wo, cout))
    for b in prange(B):
        for i in range(ho):
            for j in range(wo):
                for co in range(cout):
                    y[b, i, j, co] = bias[co]
                for di in range(k):
                    for dj in range(k):
                        for c in range(cin):
                            v = xp[b, i * stride + di, j * stride + dj, c]
                            for co in range(cout):
                                y[b, i, j, co] += v * w[di, dj, c, co]
    return y


@njit(parallel=True, cache=True)
def conv_kernel_grad(xp: np.ndarray, g: np.ndarray, k: int,
                     stride: int) -> np.ndarray:
    """d(loss)/d(kernels): each (di, dj) tap is owned by exactly one thread,
    so accumulation order is fixed regardless of thread count."""
    B, ho, wo, cout = g.shape
    cin = xp.shape[3]
    dw = np.zeros((k, k, cin, cout))
    for idx in prange(k * k):
        di = idx // k
        dj = idx % k
        for b in range(B):
            for i in range(ho):
                for j in range(wo):
                    for c in range(cin):
                        v = xp[b, i * stride + di, j * stride + dj, c]
                        for co in range(cout):
                            dw[di, dj, c, co] += v * g[b, i, j, co]
    return dw


@njit(parallel=True, cache=True)
def col2im_add(gcol: np.ndarray, stride: int, hp: int, wp: int) -> np.ndarray:
    """Fold a (B,Ho,Wo,k,k,Cin) column gradient back onto the padded input."""
    B, ho, wo, k, _, cin = gcol.shape
    gxp = np.zeros((B, hp, wp, cin))
    for b in prange(B):
        for i in range(ho):
            for j in range(wo):
                for di in range(k):
                    for dj in range(k):
                        for c in range(cin):
                            gxp[b, i * stride + di, j * stride + dj, c] += \
                                gcol[b, i, j, di, dj, c]
    return gxp
