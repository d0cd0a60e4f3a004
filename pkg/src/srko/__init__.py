"""Adaptive robust kernels for nonlinear least squares.

The general robust loss rho(x, alpha, c) with its shape and scale fitted to
the residual distribution by negative log-likelihood over a truncated
normalization (RKO fits the shape, S-RKO both), baseline Huber and
graduated non-convexity estimators, and a point-to-point registration
problem to exercise them.
"""

from srko import _backend
from srko.errors import (
    ConfigError,
    DomainError,
    GridLookupError,
    QuadratureError,
    SolverError,
    UnderConstrainedError,
)
from srko.kernel import NEG_INF, GemanMcClure, Huber, KernelParams, baseline_weight, drho_dx, rho, weight
from srko.partition import GridSpec, PartitionTable, build_table, fit_alpha, fit_c, get_table, nll, z_hat
from srko.solver import (
    FunctionProblem,
    GNCSchedule,
    LinearProblem,
    ResidualProblem,
    Solution,
    SolverConfig,
    gnc_geman_solve,
    irls_solve,
    irls_step,
    least_squares_solve,
    rko_solve,
    srko_solve,
)

BACKEND = _backend.NAME

__version__ = "0.1.0"
