"""The general adaptive robust loss, its derivative and IRLS weight.

A single family rho(x, alpha, c) covers the quadratic (alpha=2), Cauchy
(alpha=0), Geman-McClure (alpha=-2) and Welsch (alpha=-inf) losses. Two
fixed baseline weight functions (Huber and the Geman-McClure form used by
graduated non-convexity) live alongside it.

All functions accept a scalar or an array of residuals and return the same
kind.
"""

from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Union

import numpy as np

from srko import _backend
from srko.errors import DomainError

#: Shape value selecting the Welsch branch. Never use a large negative float.
NEG_INF = -math.inf

#: Shape values closer than this to 0 or 2 use the exact special-case branch.
BRANCH_TOL = 1e-5


def check_alpha(alpha):
    alpha = float(alpha)
    if math.isnan(alpha) or alpha == math.inf:
        raise DomainError(f"alpha must be finite or NEG_INF, got {alpha}")
    if alpha > 2.0:
        raise DomainError(f"alpha must be <= 2, got {alpha}")
    return alpha


def check_positive(name, value):
    value = float(value)
    if not (math.isfinite(value) and value > 0.0):
        raise DomainError(f"{name} must be finite and > 0, got {value}")
    return value


@dataclass(frozen=True)
class KernelParams:
    """One member of the robust loss family.

    ``alpha`` is the shape (``NEG_INF`` for the Welsch limit), ``c`` the scale
    in residual units and ``tau`` the truncation bound used when the kernel is
    normalized into a density.
    """

    alpha: float
    c: float = 1.0
    tau: float = 10.0

    def __post_init__(self):
        object.__setattr__(self, "alpha", check_alpha(self.alpha))
        object.__setattr__(self, "c", check_positive("c", self.c))
        object.__setattr__(self, "tau", check_positive("tau", self.tau))


@dataclass(frozen=True)
class Huber:
    threshold: float = 1.3

    def __post_init__(self):
        object.__setattr__(self, "threshold", check_positive("Huber threshold", self.threshold))


@dataclass(frozen=True)
class GemanMcClure:
    """Geman-McClure weight with scale ``mu`` in squared residual units."""

    mu: float

    def __post_init__(self):
        object.__setattr__(self, "mu", check_positive("Geman-McClure mu", self.mu))


BaselineKernel = Union[Huber, GemanMcClure]


def _prepare(x):
    arr = np.asarray(x, dtype=np.float64)
    scalar = arr.ndim == 0
    flat = np.ascontiguousarray(arr.reshape(-1))
    if not np.all(np.isfinite(flat)):
        raise DomainError("residuals must be finite")
    return flat, arr.shape, scalar


def _finish(values, shape, scalar):
    if scalar:
        return float(values[0])
    return values.reshape(shape)


def _check_params(p):
    if not isinstance(p, KernelParams):
        raise DomainError(f"expected KernelParams, got {type(p).__name__}")


def rho(x, p: KernelParams):
    """Loss value; even in ``x``, zero at ``x = 0`` and non-negative."""
    _check_params(p)
    flat, shape, scalar = _prepare(x)
    return _finish(_backend.impl.rho(flat, p.alpha, p.c), shape, scalar)


def drho_dx(x, p: KernelParams):
    _check_params(p)
    flat, shape, scalar = _prepare(x)
    return _finish(_backend.impl.drho(flat, p.alpha, p.c), shape, scalar)


def weight(x, p: KernelParams):
    """IRLS weight ``drho_dx(x) / x``, continued to ``1 / c**2`` at zero."""
    _check_params(p)
    flat, shape, scalar = _prepare(x)
    return _finish(_backend.impl.weight(flat, p.alpha, p.c), shape, scalar)


def baseline_weight(x, k: BaselineKernel):
    flat, shape, scalar = _prepare(x)
    if isinstance(k, Huber):
        a = np.abs(flat)
        w = np.ones_like(flat)
        out = a > k.threshold
        w[out] = k.threshold / a[out]
    elif isinstance(k, GemanMcClure):
        w = k.mu**2 / (k.mu + flat * flat) ** 2
    else:
        raise DomainError(f"unknown baseline kernel {k!r}")
    return _finish(w, shape, scalar)


def baseline_cost(x, k: BaselineKernel):
    """Loss whose IRLS weight is :func:`baseline_weight`."""
    flat, shape, scalar = _prepare(x)
    if isinstance(k, Huber):
        a = np.abs(flat)
        t = k.threshold
        cost = np.where(a <= t, 0.5 * flat * flat, t * a - 0.5 * t * t)
    elif isinstance(k, GemanMcClure):
        x2 = flat * flat
        cost = 0.5 * k.mu * x2 / (k.mu + x2)
    else:
        raise DomainError(f"unknown baseline kernel {k!r}")
    return _finish(cost, shape, scalar)


def kernel_weight(x, kernel):
    """Dispatch to :func:`weight` or :func:`baseline_weight`."""
    if isinstance(kernel, KernelParams):
        return weight(x, kernel)
    return baseline_weight(x, kernel)


def kernel_cost(x, kernel):
    if isinstance(kernel, KernelParams):
        return rho(x, kernel)
    return baseline_cost(x, kernel)
