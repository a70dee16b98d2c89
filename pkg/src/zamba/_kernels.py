"""Fused selective-scan kernels (numba).

Same recurrence as :mod:`zamba.ssm`, but discretisation, state update and
readout happen in one pass without materialising (T, D, N) temporaries.
Leading batch dimensions are flattened to ``M`` by the caller.
"""

import numpy as np
from numba import njit


@njit(cache=True, fastmath=False)
def scan_fwd(a, B, C, u, h0):
    # a: (M, T, D, N) decay factors; u: (M, T, D); B, C: (M, T, N); h0: (M, D, N)
    M, T, D, N = a.shape
    y = np.zeros((M, T, D), dtype=a.dtype)
    h_all = np.empty((M, T, D, N), dtype=a.dtype)
    for m in range(M):
        h = h0[m].copy()
        for t in range(T):
            for d in range(D):
                uu = u[m, t, d]
                acc = 0.0
                for n in range(N):
                    hv = a[m, t, d, n] * h[d, n] + uu * B[m, t, n]
                    h[d, n] = hv
                    h_all[m, t, d, n] = hv
                    acc += C[m, t, n] * hv
                y[m, t, d] = acc
    return y, h_all


@njit(cache=True, fastmath=False)
def scan_bwd(gy, a_all, delta, A, B, C, u, h0, h_all):
    """Adjoint pass; returns grads w.r.t. delta (through the decay only), A, B, C and u."""
    M, T, D = delta.shape
    N = A.shape[1]
    gdelta = np.zeros((M, T, D), dtype=delta.dtype)
    gu = np.zeros((M, T, D), dtype=delta.dtype)
    gA = np.zeros((D, N), dtype=delta.dtype)
    gB = np.zeros((M, T, N), dtype=delta.dtype)
    gC = np.zeros((M, T, N), dtype=delta.dtype)
    for m in range(M):
        carry = np.zeros((D, N), dtype=delta.dtype)
        for t in range(T - 1, -1, -1):
            for d in range(D):
                dl = delta[m, t, d]
                uu = u[m, t, d]
                gyv = gy[m, t, d]
                gdl = 0.0
                guu = 0.0
                for n in range(N):
                    g = carry[d, n] + gyv * C[m, t, n]
                    hv = h_all[m, t, d, n]
                    hp = h_all[m, t - 1, d, n] if t > 0 else h0[m, d, n]
                    a = a_all[m, t, d, n]
                    ga = g * hp * a
                    gdl += ga * A[d, n]
                    gA[d, n] += ga * dl
                    guu += g * B[m, t, n]
                    gB[m, t, n] += g * uu
                    gC[m, t, n] += gyv * hv
                    carry[d, n] = a * g
                gdelta[m, t, d] = gdl
                gu[m, t, d] = guu
    return gdelta, gA, gB, gC, gu
