"""Compiled kernels: coordinatewise Gibbs sampling of positive-orthant Gaussians.

All one-dimensional truncated draws use the inverse CDF, so for a fixed seed the
output is a continuous function of the Gaussian parameters.
"""

import ctypes
import math

import numba
import numpy as np
from numba.extending import get_cython_function_address

_ndtri_addr = get_cython_function_address("scipy.special.cython_special", "ndtri")
_ndtri = ctypes.CFUNCTYPE(ctypes.c_double, ctypes.c_double)(_ndtri_addr)

_SQRT1_2 = 1.0 / math.sqrt(2.0)


@numba.njit
def _seed(seed):
    if seed >= 0:
        np.random.seed(seed)


@numba.njit
def std_normal_above(a, u):
    """Inverse-CDF draw of ``Z ~ N(0, 1)`` conditioned on ``Z >= a`` from uniform ``u``."""
    if a <= 0.0:
        lo = 0.5 * math.erfc(-a * _SQRT1_2)
        p = lo + u * (1.0 - lo)
        if p >= 1.0:
            p = 1.0 - 1e-16
        z = _ndtri(p)
    elif a < 37.0:
        tail = 0.5 * math.erfc(a * _SQRT1_2)
        z = -_ndtri(tail * (1.0 - u))
    else:
        z = math.sqrt(a * a - 2.0 * math.log1p(-u))
    if z < a:
        z = a
    return z


@numba.njit
def truncnorm_pos(m, s, u):
    """Draw from ``N(m, s^2)`` restricted to ``[0, inf)``."""
    x = m + s * std_normal_above(-m / s, u)
    return x if x > 0.0 else 0.0


@numba.njit
def _sweep(Q, b, x, g):
    n = x.shape[0]
    for i in range(n):
        qii = Q[i, i]
        m = (b[i] - (g[i] - qii * x[i])) / qii
        new = truncnorm_pos(m, 1.0 / math.sqrt(qii), np.random.random())
        d = new - x[i]
        if d != 0.0:
            row = Q[i]
            for k in range(n):
                g[k] += row[k] * d
            x[i] = new


@numba.njit
def gibbs_tmvn(Q, b, x0, n_samples, burn_in, thin, seed):
    """Samples of the density proportional to ``exp(-x'Qx/2 + b'x)`` on ``x >= 0``."""
    _seed(seed)
    n = x0.shape[0]
    x = x0.copy()
    g = Q @ x
    out = np.empty((n_samples, n))
    for _ in range(burn_in):
        _sweep(Q, b, x, g)
    for s in range(n_samples):
        for _ in range(thin):
            _sweep(Q, b, x, g)
        out[s] = x
    return out


@numba.njit
def gibbs_posterior_chain(G, h, rr, LtL, a_j, b_j, a_c, b_c, n_times,
                          c, sig2, sig2c, n_steps, thin, seed, out_c, out_s, out_sc, start):
    """Advance the full-posterior Gibbs chain by ``n_steps`` sweeps.

    ``G[j] = K_j'K_j``, ``h[j] = K_j'R_j``, ``rr[j] = R_j'R_j``.  Every ``thin``-th state is
    written to the output arrays starting at row ``start``; returns the next free row.
    ``c``, ``sig2`` and ``sig2c`` are updated in place.
    """
    _seed(seed)
    nc = G.shape[0]
    n = c.shape[0]
    Q = np.empty((n, n))
    b = np.empty(n)
    row = start
    for step in range(n_steps):
        w = 1.0 / sig2
        s = 1.0 / sig2c[0]
        for p in range(n):
            b[p] = 0.0
            for q in range(n):
                Q[p, q] = s * LtL[p, q]
        for j in range(nc):
            wj = w[j]
            for p in range(n):
                b[p] += wj * h[j, p]
                for q in range(n):
                    Q[p, q] += wj * G[j, p, q]
        g = Q @ c
        _sweep(Q, b, c, g)
        for j in range(nc):
            quad = 0.0
            Gc = G[j] @ c
            for p in range(n):
                quad += c[p] * Gc[p] - 2.0 * h[j, p] * c[p]
            resid = quad + rr[j]
            if resid < 0.0:
                resid = 0.0
            scale = b_j[j] + 0.5 * resid
            sig2[j] = scale / np.random.gamma(a_j[j] + 0.5 * n_times, 1.0)
        Lc = LtL @ c
        pen = 0.0
        for p in range(n):
            pen += c[p] * Lc[p]
        sig2c[0] = (b_c + 0.5 * pen) / np.random.gamma(a_c + 0.5 * n, 1.0)
        if (step + 1) % thin == 0 and row < out_c.shape[0]:
            out_c[row] = c
            out_s[row] = sig2
            out_sc[row] = sig2c[0]
            row += 1
    return row
