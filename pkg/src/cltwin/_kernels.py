"""Compiled fixed-step RK4 kernels for the coupled power equations.

Each channel obeys dP_i/dz = P_i * (-a_i + sum_j g_ij P_j). The per-channel
rate depends only on the total power comb, so signal and ASE of a channel
scale by the same factor and only their sum needs integrating.
"""

import numpy as np
from numba import njit


@njit(cache=True)
def _rates_matrix(p, a, g, out):
    n = p.size
    for i in range(n):
        s = 0.0
        for j in range(n):
            s += g[i, j] * p[j]
        out[i] = -a[i] + s * 1e-3


@njit(cache=True)
def _rates_moment(p, a, f, cr, out):
    # unclipped triangular gain: sum_j cr*(f_j - f_i) P_j = cr*(M1 - f_i*M0)
    m0 = 0.0
    m1 = 0.0
    for j in range(p.size):
        m0 += p[j]
        m1 += f[j] * p[j]
    m0 *= 1e-3
    m1 *= 1e-3
    for i in range(p.size):
        out[i] = -a[i] + cr * (m1 - f[i] * m0)


@njit(cache=True)
def rk4_span(p0, a, f, cr, g, use_moment, h, nsteps):
    """Integrate the comb over ``nsteps`` steps of ``h`` km.

    ``p0`` in mW, ``a`` in 1/km, ``g`` in 1/(W km). Returns the output comb and
    a flag set when a negative intermediate power had to be clamped.
    """
    n = p0.size
    p = p0.copy()
    k1 = np.empty(n)
    k2 = np.empty(n)
    k3 = np.empty(n)
    k4 = np.empty(n)
    tmp = np.empty(n)
    r = np.empty(n)
    clamped = False
    for _ in range(nsteps):
        if use_moment:
            _rates_moment(p, a, f, cr, r)
        else:
            _rates_matrix(p, a, g, r)
        for i in range(n):
            k1[i] = p[i] * r[i]
            tmp[i] = p[i] + 0.5 * h * k1[i]
        if use_moment:
            _rates_moment(tmp, a, f, cr, r)
        else:
            _rates_matrix(tmp, a, g, r)
        for i in range(n):
            k2[i] = tmp[i] * r[i]
        for i in range(n):
            tmp[i] = p[i] + 0.5 * h * k2[i]
        if use_moment:
            _rates_moment(tmp, a, f, cr, r)
        else:
            _rates_matrix(tmp, a, g, r)
        for i in range(n):
            k3[i] = tmp[i] * r[i]
        for i in range(n):
            tmp[i] = p[i] + h * k3[i]
        if use_moment:
            _rates_moment(tmp, a, f, cr, r)
        else:
            _rates_matrix(tmp, a, g, r)
        for i in range(n):
            k4[i] = tmp[i] * r[i]
        for i in range(n):
            p[i] = p[i] + h / 6.0 * (k1[i] + 2.0 * k2[i] + 2.0 * k3[i] + k4[i])
            if p[i] < 0.0:
                p[i] = 0.0
                clamped = True
    return p, clamped
