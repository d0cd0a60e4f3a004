# cython: language_level=3, boundscheck=False, wraparound=False, cdivision=True, initializedcheck=False
"""Compiled batched kernel routines.

Same contract as ``_kernels_py``; the NLL scans fuse the per-residual loss
evaluation and the reduction so no temporaries are allocated.
"""

import numpy as np

from libc.math cimport exp, expm1, fabs, log, log1p, INFINITY

cdef double _TOL = 1e-5
BRANCH_TOL = _TOL

cdef enum:
    GENERAL = 0
    QUADRATIC = 1
    CAUCHY = 2
    WELSCH = 3


cdef inline int _branch(double alpha) noexcept nogil:
    if alpha == -INFINITY:
        return WELSCH
    if fabs(alpha - 2.0) < _TOL:
        return QUADRATIC
    if fabs(alpha) < _TOL:
        return CAUCHY
    return GENERAL


cdef inline double _rho_z2(double z2, double alpha, int br, double beta) noexcept nogil:
    cdef double u
    if br == QUADRATIC:
        return 0.5 * z2
    if br == CAUCHY:
        return log1p(0.5 * z2)
    if br == WELSCH:
        return -expm1(-0.5 * z2)
    u = z2 / beta
    # exp/log are cheaper than expm1/log1p; only safe away from cancellation
    if u >= 0.25 and fabs(alpha) >= 0.5:
        return (beta / alpha) * (exp(0.5 * alpha * log(1.0 + u)) - 1.0)
    return (beta / alpha) * expm1(0.5 * alpha * log1p(u))


cdef inline double _unit_weight_z2(double z2, double alpha, int br, double beta) noexcept nogil:
    if br == QUADRATIC:
        return 1.0
    if br == CAUCHY:
        return 1.0 / (0.5 * z2 + 1.0)
    if br == WELSCH:
        return exp(-0.5 * z2)
    return exp((0.5 * alpha - 1.0) * log1p(z2 / beta))


def branch(double alpha):
    return _branch(alpha)


def rho(const double[::1] x, double alpha, double c):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef int br = _branch(alpha)
    cdef double beta = fabs(alpha - 2.0)
    cdef double z
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            z = x[i] / c
            o[i] = _rho_z2(z * z, alpha, br, beta)
    return out


def weight(const double[::1] x, double alpha, double c):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef int br = _branch(alpha)
    cdef double beta = fabs(alpha - 2.0)
    cdef double z, inv_c2 = 1.0 / (c * c)
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            z = x[i] / c
            o[i] = _unit_weight_z2(z * z, alpha, br, beta) * inv_c2
    return out


def drho(const double[::1] x, double alpha, double c):
    cdef Py_ssize_t i, n = x.shape[0]
    cdef int br = _branch(alpha)
    cdef double beta = fabs(alpha - 2.0)
    cdef double z, inv_c2 = 1.0 / (c * c)
    out = np.empty(n)
    cdef double[::1] o = out
    with nogil:
        for i in range(n):
            z = x[i] / c
            o[i] = _unit_weight_z2(z * z, alpha, br, beta) * inv_c2 * x[i]
    return out


def nll_alpha_scan(const double[::1] x, const double[::1] alphas, double c, const double[::1] log_z):
    cdef Py_ssize_t i, k, n = x.shape[0], m = alphas.shape[0]
    cdef double a, beta, acc, z
    cdef int br
    out = np.empty(m)
    cdef double[::1] o = out
    z2 = np.empty(n)
    cdef double[::1] zz = z2
    with nogil:
        for i in range(n):
            z = x[i] / c
            zz[i] = z * z
        for k in range(m):
            a = alphas[k]
            br = _branch(a)
            beta = fabs(a - 2.0)
            acc = 0.0
            for i in range(n):
                acc += _rho_z2(zz[i], a, br, beta)
            o[k] = acc + n * log_z[k]
    return out


def nll_c_scan(const double[::1] x, double alpha, const double[::1] cs, const double[::1] log_z):
    cdef Py_ssize_t i, k, n = x.shape[0], m = cs.shape[0]
    cdef int br = _branch(alpha)
    cdef double beta = fabs(alpha - 2.0)
    cdef double c, acc, z
    out = np.empty(m)
    cdef double[::1] o = out
    with nogil:
        for k in range(m):
            c = cs[k]
            acc = 0.0
            for i in range(n):
                z = x[i] / c
                acc += _rho_z2(z * z, alpha, br, beta)
            o[k] = acc + n * log_z[k]
    return out


def simpson_exp_neg_rho(double alpha, double c, double tau, Py_ssize_t nodes):
    """Composite Simpson rule for the integral of exp(-rho) over [-tau, tau]."""
    cdef int br = _branch(alpha)
    cdef double beta = fabs(alpha - 2.0)
    cdef double h = 2.0 * tau / (nodes - 1)
    cdef double ends, odd = 0.0, even = 0.0, xi, z
    cdef Py_ssize_t i
    with nogil:
        z = -tau / c
        ends = exp(-_rho_z2(z * z, alpha, br, beta))
        z = tau / c
        ends += exp(-_rho_z2(z * z, alpha, br, beta))
        for i in range(1, nodes - 1):
            xi = -tau + i * h
            z = xi / c
            if i % 2 == 1:
                odd += exp(-_rho_z2(z * z, alpha, br, beta))
            else:
                even += exp(-_rho_z2(z * z, alpha, br, beta))
    return h / 3.0 * (ends + 4.0 * odd + 2.0 * even)
