"""Weighted Gauss-Newton / IRLS over an abstract residual problem.

Outer loops:

* :func:`irls_solve` -- fixed kernel (general family, Huber, Geman-McClure or
  plain squared loss).
* :func:`rko_solve` -- refit the shape on the current residuals, then take
  Gauss-Newton steps; scale held fixed.
* :func:`srko_solve` -- as RKO but the scale is refitted after the shape.
* :func:`gnc_geman_solve` -- Geman-McClure IRLS with a shrinking scale
  schedule (graduated non-convexity).

Residuals are divided by ``config.residual_scale`` before any kernel sees
them, for both weighting and kernel fitting.
"""

from __future__ import annotations

import math
from abc import ABC, abstractmethod
from dataclasses import dataclass, field, replace

import numpy as np

from srko import partition
from srko.errors import DomainError, SolverError
from srko.kernel import GemanMcClure, Huber, KernelParams, check_positive, kernel_cost, kernel_weight

LAMBDA_START = 1e-4
LAMBDA_UP = 10.0
LAMBDA_DOWN = 0.5
LAMBDA_MAX = 1e8
# decayed damping below this is dropped to an exact Gauss-Newton step
LAMBDA_FLOOR = 1e-8
COST_RTOL = 1e-12


@dataclass
class Linearization:
    """Residuals at a point.

    ``x`` holds the scalar residuals the kernel sees (N,), ``blocks`` the
    residual vectors they summarize (N, k) and ``jacobian`` the block
    derivatives with respect to a local perturbation (N, k, dim). One weight
    per scalar residual multiplies its whole block.
    """

    x: np.ndarray
    blocks: np.ndarray
    jacobian: np.ndarray


class ResidualProblem(ABC):
    dimension: int

    @abstractmethod
    def evaluate(self, theta) -> Linearization:
        ...

    def retract(self, theta, delta):
        return np.asarray(theta, dtype=np.float64) + delta

    def residuals(self, theta):
        return self.evaluate(theta).x


class FunctionProblem(ResidualProblem):
    """Scalar residuals given as callables ``r(theta) -> (N,)`` and ``J(theta) -> (N, d)``."""

    def __init__(self, residual_fn, jacobian_fn, dimension):
        self.residual_fn = residual_fn
        self.jacobian_fn = jacobian_fn
        self.dimension = int(dimension)

    def evaluate(self, theta):
        r = np.asarray(self.residual_fn(theta), dtype=np.float64).reshape(-1)
        J = np.asarray(self.jacobian_fn(theta), dtype=np.float64).reshape(r.shape[0], self.dimension)
        return Linearization(r, r[:, None], J[:, None, :])


class LinearProblem(FunctionProblem):
    """``r(theta) = A theta - b``."""

    def __init__(self, A, b):
        self.A = np.asarray(A, dtype=np.float64)
        self.b = np.asarray(b, dtype=np.float64)
        super().__init__(lambda th: self.A @ th - self.b, lambda th: self.A, self.A.shape[1])


@dataclass(frozen=True)
class GNCSchedule:
    """Geman-McClure scale ``mu`` starts at ``mu0`` and is divided by ``factor``
    every ``iters_per_stage`` iterations until it reaches ``mu_min``."""

    mu0: float = 1.0
    factor: float = 1.4
    iters_per_stage: int = 4
    mu_min: float = 0.025**2

    def __post_init__(self):
        if not (self.mu0 > 0 and self.mu_min > 0 and self.mu_min <= self.mu0):
            raise DomainError("GNC schedule needs 0 < mu_min <= mu0")
        if not self.factor > 1.0:
            raise DomainError("GNC division factor must exceed 1")
        if self.iters_per_stage < 1:
            raise DomainError("GNC iters_per_stage must be >= 1")

    def n_stages(self):
        if self.mu0 <= self.mu_min:
            return 0
        return int(math.ceil(math.log(self.mu0 / self.mu_min) / math.log(self.factor) - 1e-12))


@dataclass(frozen=True)
class SolverConfig:
    grid: partition.GridSpec = field(
        default_factory=lambda: partition.GridSpec(partition.DEFAULT_ALPHA_GRID, partition.SRKO_STAR_C_GRID)
    )
    tau: float = partition.DEFAULT_TAU
    residual_scale: float = 1.0
    init_alpha: float = 2.0
    init_c: float = 1.0
    max_outer: int = 50
    gn_steps_per_outer: int = 1
    step_tol: float = 1e-9
    damping: float = 0.0
    adaptive_damping: bool = True
    gnc_schedule: GNCSchedule = field(default_factory=GNCSchedule)
    nodes: int = partition.DEFAULT_NODES
    table: partition.PartitionTable | None = field(default=None, compare=False)

    def __post_init__(self):
        if not (self.residual_scale > 0 and math.isfinite(self.residual_scale)):
            raise DomainError("residual_scale must be positive")
        if self.max_outer < 1 or self.gn_steps_per_outer < 1:
            raise DomainError("iteration caps must be >= 1")
        if not self.step_tol > 0:
            raise DomainError("step_tol must be positive")
        if self.damping < 0:
            raise DomainError("damping must be non-negative")
        check_positive("tau", self.tau)
        # raises GridLookupError when the start point is off the grid
        self.grid.alpha_index(self.init_alpha)
        self.grid.c_index(self.init_c)

    def partition_table(self):
        if self.table is not None:
            if not self.table.same_settings(self.grid, self.tau, self.table.nodes):
                raise DomainError("supplied partition table does not match the configured grid/tau")
            return self.table
        return partition.get_table(self.grid, self.tau, self.nodes)

    def as_dict(self):
        g = self.gnc_schedule
        return {
            "alpha_grid": list(self.grid.alpha_values),
            "c_grid": list(self.grid.c_values),
            "tau": self.tau,
            "residual_scale": self.residual_scale,
            "init_alpha": self.init_alpha,
            "init_c": self.init_c,
            "max_outer": self.max_outer,
            "gn_steps_per_outer": self.gn_steps_per_outer,
            "step_tol": self.step_tol,
            "damping": self.damping,
            "adaptive_damping": self.adaptive_damping,
            "gnc_schedule": {"mu0": g.mu0, "factor": g.factor, "iters_per_stage": g.iters_per_stage, "mu_min": g.mu_min},
            "quadrature_nodes": self.nodes,
        }


@dataclass
class TraceEntry:
    alpha: float | None
    c: float | None
    nll: float | None
    step_norm: float
    residual_rms: float
    mu: float | None = None
    damping: float = 0.0


@dataclass
class Solution:
    theta: np.ndarray
    trace: list = field(default_factory=list)
    converged: bool = False
    iterations: int = 0
    method: str = ""

    @property
    def alpha_trace(self):
        return [e.alpha for e in self.trace]

    @property
    def c_trace(self):
        return [e.c for e in self.trace]


# -- one step ------------------------------------------------------------------------


def _check_weights(weights, n):
    w = np.asarray(weights, dtype=np.float64).reshape(-1)
    if w.shape[0] != n:
        raise DomainError(f"expected {n} weights, got {w.shape[0]}")
    # underflow to exactly zero is allowed for far outliers
    if not np.all(np.isfinite(w)) or np.any(w < 0):
        raise DomainError("weights must be finite and non-negative")
    return w


def normal_equations(lin: Linearization, weights):
    """``(J^T W J, J^T W r)`` with one weight per residual block."""
    H = np.einsum("n,nki,nkj->ij", weights, lin.jacobian, lin.jacobian)
    g = np.einsum("n,nki,nk->i", weights, lin.jacobian, lin.blocks)
    return H, g


def _solve_damped(H, g, lam):
    A = H
    if lam > 0:
        d = np.diag(H).copy()
        d = np.maximum(d, 1e-12 * max(float(d.max()), 1e-300))
        A = H + lam * np.diag(d)
    try:
        delta = -np.linalg.solve(A, g)
    except np.linalg.LinAlgError:
        return None
    if not np.all(np.isfinite(delta)):
        return None
    # reject numerically singular solves that LAPACK does not flag
    if np.linalg.cond(A) > 1e14:
        return None
    return delta


def irls_step(problem: ResidualProblem, theta, weights, damping=0.0, lin=None):
    """One weighted Gauss-Newton step ``theta - (J^T W J + lam D)^-1 J^T W r``."""
    if lin is None:
        lin = problem.evaluate(theta)
    w = _check_weights(weights, lin.x.shape[0])
    H, g = normal_equations(lin, w)
    delta = _solve_damped(H, g, float(damping))
    if delta is None:
        raise SolverError(f"singular normal equations (damping {damping})")
    return problem.retract(theta, delta)


class _Stepper:
    """Damped weighted step with cost-based escalation."""

    def __init__(self, problem, config: SolverConfig):
        self.problem = problem
        self.lam = float(config.damping)
        self.adaptive = config.adaptive_damping

    def step(self, theta, lin, weight_fn, cost_fn):
        cost0 = cost_fn(lin.x)
        w = _check_weights(weight_fn(lin.x), lin.x.shape[0])
        H, g = normal_equations(lin, w)
        lam = self.lam
        while True:
            delta = _solve_damped(H, g, lam)
            if delta is not None:
                cand = self.problem.retract(theta, delta)
                cand_lin = self.problem.evaluate(cand)
                ok = np.all(np.isfinite(cand_lin.x))
                if ok and (not self.adaptive or cost_fn(cand_lin.x) <= cost0 + COST_RTOL * max(1.0, abs(cost0))):
                    self.lam = lam * LAMBDA_DOWN if lam * LAMBDA_DOWN >= LAMBDA_FLOOR else 0.0
                    return cand, cand_lin, float(np.linalg.norm(delta)), lam
                if not self.adaptive:
                    raise SolverError("non-finite residuals after an undamped step")
            elif not self.adaptive:
                raise SolverError("singular normal equations and damping escalation is disabled")
            lam = max(lam * LAMBDA_UP, LAMBDA_START)
            if lam > LAMBDA_MAX:
                if delta is None:
                    raise SolverError(f"singular normal equations even at damping {LAMBDA_MAX:g}")
                # no descent direction left at this kernel: stationary point
                self.lam = LAMBDA_MAX
                return theta, lin, 0.0, lam


def _rms(x):
    return float(np.sqrt(np.mean(x * x)))


def _evaluate(problem, theta, iteration):
    lin = problem.evaluate(theta)
    if not np.all(np.isfinite(lin.x)):
        raise SolverError(f"non-finite residuals at iteration {iteration}")
    return lin


def _kernel_fns(kernel, s):
    if kernel is None:
        return (lambda x: np.ones_like(x)), (lambda x: 0.5 * float(np.dot(x, x)))
    return (lambda x: kernel_weight(x / s, kernel)), (lambda x: float(np.sum(kernel_cost(x / s, kernel))))


def _kernel_labels(kernel):
    if isinstance(kernel, KernelParams):
        return kernel.alpha, kernel.c, None
    if isinstance(kernel, GemanMcClure):
        return None, None, kernel.mu
    if isinstance(kernel, Huber):
        return None, kernel.threshold, None
    return None, None, None


# -- outer loops ---------------------------------------------------------------------


def irls_solve(problem: ResidualProblem, theta0, kernel, config: SolverConfig = SolverConfig()):
    """Fixed-kernel IRLS until ``|step| < step_tol`` or ``max_outer`` steps.

    ``kernel`` is a :class:`KernelParams`, a baseline kernel, or ``None`` for
    plain nonlinear least squares.
    """
    s = config.residual_scale
    weight_fn, cost_fn = _kernel_fns(kernel, s)
    alpha, c, mu = _kernel_labels(kernel)
    stepper = _Stepper(problem, config)
    theta = np.array(theta0, dtype=np.float64)
    lin = _evaluate(problem, theta, 0)
    sol = Solution(theta, method="irls" if kernel is not None else "lsq")
    for it in range(1, config.max_outer + 1):
        theta, lin, norm, lam = stepper.step(theta, lin, weight_fn, cost_fn)
        if not np.all(np.isfinite(lin.x)):
            raise SolverError(f"non-finite residuals at iteration {it}")
        sol.trace.append(TraceEntry(alpha, c, None, norm, _rms(lin.x), mu, lam))
        sol.iterations = it
        if norm < config.step_tol:
            sol.converged = True
            break
    sol.theta = theta
    return sol


def least_squares_solve(problem, theta0, config: SolverConfig = SolverConfig()):
    return irls_solve(problem, theta0, None, config)


def _adaptive_solve(problem, theta0, config: SolverConfig, fit_scale, method):
    table = config.partition_table()
    grid = table.grid
    alpha = grid.alpha_values[grid.alpha_index(config.init_alpha)]
    c = grid.c_values[grid.c_index(config.init_c)]
    s = config.residual_scale
    stepper = _Stepper(problem, config)
    theta = np.array(theta0, dtype=np.float64)
    lin = _evaluate(problem, theta, 0)
    sol = Solution(theta, method=method)
    for it in range(1, config.max_outer + 1):
        scaled = lin.x / s
        new_alpha = partition.fit_alpha(scaled, c, table, current=alpha)
        new_c = partition.fit_c(scaled, new_alpha, table, current=c) if fit_scale else c
        value = partition.nll(scaled, new_alpha, new_c, table)
        kernel = KernelParams(new_alpha, new_c, config.tau)
        weight_fn, cost_fn = _kernel_fns(kernel, s)
        largest = 0.0
        for _ in range(config.gn_steps_per_outer):
            theta, lin, norm, lam = stepper.step(theta, lin, weight_fn, cost_fn)
            if not np.all(np.isfinite(lin.x)):
                raise SolverError(f"non-finite residuals at iteration {it}")
            largest = max(largest, norm)
        sol.trace.append(TraceEntry(new_alpha, new_c, value, largest, _rms(lin.x), None, lam))
        sol.iterations = it
        unchanged = new_alpha == alpha and new_c == c
        alpha, c = new_alpha, new_c
        if largest < config.step_tol and unchanged:
            sol.converged = True
            break
    sol.theta = theta
    return sol


def rko_solve(problem: ResidualProblem, theta0, config: SolverConfig = SolverConfig()):
    """Alternate a shape fit at fixed scale ``init_c`` with IRLS steps."""
    grid = config.grid
    grid.c_index(config.init_c)
    return _adaptive_solve(problem, theta0, config, fit_scale=False, method="rko")


def srko_solve(problem: ResidualProblem, theta0, config: SolverConfig = SolverConfig()):
    """Alternate shape fit, scale fit and IRLS steps."""
    return _adaptive_solve(problem, theta0, config, fit_scale=True, method="srko")


def gnc_geman_solve(problem: ResidualProblem, theta0, config: SolverConfig = SolverConfig()):
    """Geman-McClure IRLS with the scale annealed from ``mu0`` down to ``mu_min``.

    The step budget is ``max_outer`` plus the iterations the annealing phase
    needs; convergence is only declared once ``mu`` has reached ``mu_min``.
    """
    sched = config.gnc_schedule
    s = config.residual_scale
    budget = config.max_outer + sched.n_stages() * sched.iters_per_stage
    stepper = _Stepper(problem, config)
    theta = np.array(theta0, dtype=np.float64)
    lin = _evaluate(problem, theta, 0)
    sol = Solution(theta, method="gnc")
    mu = sched.mu0
    for it in range(1, budget + 1):
        weight_fn, cost_fn = _kernel_fns(GemanMcClure(mu), s)
        theta, lin, norm, lam = stepper.step(theta, lin, weight_fn, cost_fn)
        if not np.all(np.isfinite(lin.x)):
            raise SolverError(f"non-finite residuals at iteration {it}")
        sol.trace.append(TraceEntry(None, None, None, norm, _rms(lin.x), mu, lam))
        sol.iterations = it
        at_floor = mu <= sched.mu_min
        if at_floor and norm < config.step_tol:
            sol.converged = True
            break
        if not at_floor and it % sched.iters_per_stage == 0:
            mu = max(mu / sched.factor, sched.mu_min)
    sol.theta = theta
    return sol


def with_grid(config: SolverConfig, alpha_values=None, c_values=None, **changes):
    """Copy of ``config`` with a replaced grid (and any other field changes)."""
    grid = partition.GridSpec(
        tuple(alpha_values) if alpha_values is not None else config.grid.alpha_values,
        tuple(c_values) if c_values is not None else config.grid.c_values,
    )
    return replace(config, grid=grid, table=None, **changes)
