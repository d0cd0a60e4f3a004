"""Select the batched kernel implementation at import time.

``SRKO_BACKEND`` chooses among:

* ``auto`` (default): the compiled extension for short residual vectors and
  the numpy fallback for long ones and for quadrature, where numpy's
  vectorized transcendentals are faster; numpy only if the extension is
  missing.
* ``compiled``: the extension everywhere (import error if it was not built).
* ``python``: the numpy fallback everywhere.

Both implementations agree to within a few ulps, so the choice only affects
speed. ``benchmarks/bench_kernels.py`` measures the crossover.
"""

import os

from srko import _kernels_py

#: Residual count below which ``auto`` uses the compiled kernels.
CROSSOVER = 400


class _Auto:
    """Size-based dispatch between the compiled and numpy kernels."""

    __name__ = "srko._backend.auto"

    def __init__(self, small, large, crossover=CROSSOVER):
        self.small = small
        self.large = large
        self.crossover = crossover
        self.BRANCH_TOL = large.BRANCH_TOL
        self.branch = large.branch
        self.simpson_exp_neg_rho = large.simpson_exp_neg_rho

    def _pick(self, x):
        return self.small if x.shape[0] < self.crossover else self.large

    def rho(self, x, alpha, c):
        return self._pick(x).rho(x, alpha, c)

    def drho(self, x, alpha, c):
        return self._pick(x).drho(x, alpha, c)

    def weight(self, x, alpha, c):
        return self._pick(x).weight(x, alpha, c)

    def nll_alpha_scan(self, x, alphas, c, log_z):
        return self._pick(x).nll_alpha_scan(x, alphas, c, log_z)

    def nll_c_scan(self, x, alpha, cs, log_z):
        return self._pick(x).nll_c_scan(x, alpha, cs, log_z)


def load(name):
    """Return a backend by name: 'python', 'compiled' or 'auto'."""
    if name == "python":
        return _kernels_py
    if name == "compiled":
        from srko import _ckernels

        return _ckernels
    if name == "auto":
        try:
            return _Auto(load("compiled"), _kernels_py)
        except ImportError:
            return _kernels_py
    raise ValueError(f"unknown backend {name!r}")


def available():
    names = ["python"]
    try:
        load("compiled")
    except ImportError:
        pass
    else:
        names.append("compiled")
    return names


_requested = os.environ.get("SRKO_BACKEND", "auto").lower() or "auto"
if _requested not in ("auto", "python", "compiled"):
    raise ImportError(f"unknown SRKO_BACKEND {_requested!r}")
impl = load(_requested)

if isinstance(impl, _Auto):
    NAME = "auto"
elif impl is _kernels_py:
    NAME = "python"
else:
    NAME = "compiled"
