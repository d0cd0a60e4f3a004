"""Pure numpy implementation of the batched kernel routines.

Mirrors ``_ckernels.pyx`` function for function. Inputs are assumed to be
validated by the caller: ``x`` is a contiguous float64 vector, ``c > 0`` and
``alpha <= 2`` or ``-inf``.
"""

import numpy as np

BRANCH_TOL = 1e-5

GENERAL, QUADRATIC, CAUCHY, WELSCH = 0, 1, 2, 3


def branch(alpha):
    if alpha == -np.inf:
        return WELSCH
    if abs(alpha - 2.0) < BRANCH_TOL:
        return QUADRATIC
    if abs(alpha) < BRANCH_TOL:
        return CAUCHY
    return GENERAL


def _rho_z2(z2, alpha):
    # z2 = (x / c)**2
    b = branch(alpha)
    if b == QUADRATIC:
        return 0.5 * z2
    if b == CAUCHY:
        return np.log1p(0.5 * z2)
    if b == WELSCH:
        return -np.expm1(-0.5 * z2)
    beta = abs(alpha - 2.0)
    return (beta / alpha) * np.expm1(0.5 * alpha * np.log1p(z2 / beta))


def _unit_weight_z2(z2, alpha):
    # c**2 * weight; equals 1 at z2 == 0 for every branch
    b = branch(alpha)
    if b == QUADRATIC:
        return np.ones_like(z2)
    if b == CAUCHY:
        return 1.0 / (0.5 * z2 + 1.0)
    if b == WELSCH:
        return np.exp(-0.5 * z2)
    beta = abs(alpha - 2.0)
    return np.exp((0.5 * alpha - 1.0) * np.log1p(z2 / beta))


def rho(x, alpha, c):
    z = x / c
    return _rho_z2(z * z, alpha)


def weight(x, alpha, c):
    z = x / c
    return _unit_weight_z2(z * z, alpha) / (c * c)


def drho(x, alpha, c):
    return weight(x, alpha, c) * x


def nll_alpha_scan(x, alphas, c, log_z):
    n = x.shape[0]
    out = np.empty(len(alphas))
    z = x / c
    z2 = z * z
    for i, a in enumerate(alphas):
        out[i] = np.sum(_rho_z2(z2, a)) + n * log_z[i]
    return out


def nll_c_scan(x, alpha, cs, log_z):
    n = x.shape[0]
    out = np.empty(len(cs))
    for j, c in enumerate(cs):
        z = x / c
        out[j] = np.sum(_rho_z2(z * z, alpha)) + n * log_z[j]
    return out


def simpson_exp_neg_rho(alpha, c, tau, nodes):
    """Composite Simpson rule for the integral of exp(-rho) over [-tau, tau]."""
    xs = np.linspace(-tau, tau, nodes)
    h = 2.0 * tau / (nodes - 1)
    f = np.exp(-rho(xs, alpha, c))
    return h / 3.0 * (f[0] + f[-1] + 4.0 * np.sum(f[1:-1:2]) + 2.0 * np.sum(f[2:-1:2]))
