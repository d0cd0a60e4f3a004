"""Truncated normalization of the robust kernel and NLL grid search.

The kernel becomes a density on [-tau, tau] once divided by

    Z(alpha, c) = integral_{-tau}^{tau} exp(-rho(x, alpha, c)) dx

and the negative log-likelihood of a residual set is
``sum(rho(x_i)) + N * log Z``. Shape and scale are chosen by scanning a
discrete grid with ``log Z`` taken from a precomputed table.
"""

from __future__ import annotations

import hashlib
import io
import json
import math
import os
from dataclasses import dataclass, field
from functools import lru_cache
from pathlib import Path

import numpy as np

from srko import _backend
from srko.errors import DomainError, GridLookupError, QuadratureError
from srko.kernel import NEG_INF, check_alpha, check_positive

DEFAULT_NODES = 4001
DEFAULT_RTOL = 1e-6
DEFAULT_TAU = 10.0

#: Relative NLL difference below which two grid points count as tied.
TIE_TOL = 1e-12

TABLE_FORMAT = "srko-partition-v1"
CACHE_ENV = "SRKO_TABLE_CACHE"


def frange(start, step, stop):
    """Inclusive MATLAB-style range ``start:step:stop``, snapped to 12 decimals."""
    if step <= 0:
        raise DomainError("range step must be positive")
    count = int(math.floor((stop - start) / step + 1e-9)) + 1
    if count < 1:
        raise DomainError(f"empty range {start}:{step}:{stop}")
    return tuple(round(start + k * step, 12) for k in range(count))


@dataclass(frozen=True)
class GridSpec:
    alpha_values: tuple
    c_values: tuple

    def __post_init__(self):
        alphas = tuple(check_alpha(a) for a in self.alpha_values)
        cs = tuple(check_positive("c", c) for c in self.c_values)
        if not alphas or not cs:
            raise DomainError("grid must have at least one alpha and one c value")
        for name, vals in (("alpha", alphas), ("c", cs)):
            if any(b <= a for a, b in zip(vals, vals[1:])):
                raise DomainError(f"{name} grid must be strictly increasing")
        object.__setattr__(self, "alpha_values", alphas)
        object.__setattr__(self, "c_values", cs)

    @property
    def shape(self):
        return len(self.alpha_values), len(self.c_values)

    def alpha_index(self, alpha):
        return _lookup(self.alpha_values, alpha, "alpha")

    def c_index(self, c):
        return _lookup(self.c_values, c, "c")


def _lookup(values, v, name):
    v = float(v)
    for i, g in enumerate(values):
        if g == v or (math.isfinite(g) and abs(g - v) <= 1e-12 * max(1.0, abs(g))):
            return i
    raise GridLookupError(f"{name}={v} is not on the grid {list(values)}")


#: Grids used for the synthetic registration experiments.
DEFAULT_ALPHA_GRID = frange(-4.0, 0.25, 2.0)
SRKO_C_GRID = frange(1.0, 0.25, 3.0)
SRKO_STAR_C_GRID = frange(0.05, 0.05, 2.0)


def z_hat(alpha, c, tau=DEFAULT_TAU, nodes=DEFAULT_NODES, rtol=DEFAULT_RTOL):
    """Integral of ``exp(-rho)`` over ``[-tau, tau]`` by composite Simpson.

    The error is estimated by Richardson comparison with the rule on every
    other node; a :class:`QuadratureError` is raised if it exceeds ``rtol``.
    """
    alpha = check_alpha(alpha)
    c = check_positive("c", c)
    tau = check_positive("tau", tau)
    nodes = int(nodes)
    if nodes < 5 or (nodes - 1) % 4:
        raise DomainError(f"nodes must be 1 mod 4 and >= 5, got {nodes}")
    fine = _backend.impl.simpson_exp_neg_rho(alpha, c, tau, nodes)
    coarse = _backend.impl.simpson_exp_neg_rho(alpha, c, tau, (nodes + 1) // 2)
    err = abs(fine - coarse) / 15.0
    if not (math.isfinite(fine) and fine > 0.0 and err <= rtol * fine):
        raise QuadratureError(
            f"quadrature for alpha={alpha}, c={c}, tau={tau} did not converge: "
            f"estimate {fine!r}, error estimate {err!r}, nodes {nodes}",
            alpha=alpha, c=c, tau=tau, estimate=fine, error=err,
        )
    return fine


@dataclass(frozen=True, eq=False)
class PartitionTable:
    """``log_z[i, j] = log z_hat(alpha_i, c_j, tau)``; read-only."""

    grid: GridSpec
    tau: float
    log_z: np.ndarray
    nodes: int = DEFAULT_NODES
    _alphas: np.ndarray = field(init=False, repr=False)
    _cs: np.ndarray = field(init=False, repr=False)

    def __post_init__(self):
        log_z = np.array(self.log_z, dtype=np.float64)
        if log_z.shape != self.grid.shape:
            raise DomainError(f"table shape {log_z.shape} does not match grid {self.grid.shape}")
        if not np.all(np.isfinite(log_z)):
            raise DomainError("partition table has non-finite entries")
        check_positive("tau", self.tau)
        log_z.setflags(write=False)
        object.__setattr__(self, "log_z", log_z)
        object.__setattr__(self, "_alphas", np.array(self.grid.alpha_values))
        object.__setattr__(self, "_cs", np.array(self.grid.c_values))

    def lookup(self, alpha, c):
        return float(self.log_z[self.grid.alpha_index(alpha), self.grid.c_index(c)])

    def same_settings(self, grid, tau, nodes):
        return self.grid == grid and self.tau == float(tau) and self.nodes == int(nodes)


def build_table(grid: GridSpec, tau=DEFAULT_TAU, nodes=DEFAULT_NODES, rtol=DEFAULT_RTOL):
    log_z = np.empty(grid.shape)
    for i, a in enumerate(grid.alpha_values):
        for j, c in enumerate(grid.c_values):
            try:
                log_z[i, j] = math.log(z_hat(a, c, tau, nodes, rtol))
            except QuadratureError as exc:
                raise QuadratureError(
                    f"grid point (alpha[{i}]={a}, c[{j}]={c}): {exc}",
                    alpha=a, c=c, tau=tau, estimate=exc.estimate, error=exc.error,
                ) from exc
    return PartitionTable(grid, float(tau), log_z, int(nodes))


# -- persistence ---------------------------------------------------------------


def _settings_key(grid, tau, nodes):
    payload = json.dumps(
        {
            "format": TABLE_FORMAT,
            "alpha": [repr(a) for a in grid.alpha_values],
            "c": [repr(c) for c in grid.c_values],
            "tau": repr(float(tau)),
            "nodes": int(nodes),
        },
        sort_keys=True,
    )
    return hashlib.sha1(payload.encode()).hexdigest()[:16]


def save_table(table: PartitionTable, path):
    path = Path(path)
    with open(path, "wb") as fh:
        np.savez(
            fh,
            format=np.array(TABLE_FORMAT),
            alpha=np.array(table.grid.alpha_values),
            c=np.array(table.grid.c_values),
            tau=np.array(table.tau),
            nodes=np.array(table.nodes),
            log_z=table.log_z,
        )


def load_table(path):
    """Load a table written by :func:`save_table` or :func:`write_table_csv`."""
    path = Path(path)
    if path.suffix == ".csv":
        return read_table_csv(path)
    with np.load(path, allow_pickle=False) as data:
        if str(data["format"]) != TABLE_FORMAT:
            raise DomainError(f"{path}: unsupported table format {data['format']}")
        grid = GridSpec(tuple(data["alpha"].tolist()), tuple(data["c"].tolist()))
        return PartitionTable(grid, float(data["tau"]), data["log_z"], int(data["nodes"]))


def write_table_csv(table: PartitionTable, path=None):
    """Write ``alpha,c,log_z`` rows (alpha-major); returns the text."""
    buf = io.StringIO()
    buf.write(f"# format={TABLE_FORMAT}\n# tau={table.tau!r}\n# nodes={table.nodes}\n")
    buf.write("alpha,c,log_z\n")
    for i, a in enumerate(table.grid.alpha_values):
        for j, c in enumerate(table.grid.c_values):
            buf.write(f"{a!r},{c!r},{float(table.log_z[i, j])!r}\n")
    text = buf.getvalue()
    if path is not None:
        Path(path).write_text(text)
    return text


def read_table_csv(path):
    meta = {}
    rows = []
    with open(path) as fh:
        for lineno, line in enumerate(fh, 1):
            line = line.strip()
            if not line:
                continue
            if line.startswith("#"):
                key, _, value = line[1:].strip().partition("=")
                meta[key.strip()] = value.strip()
                continue
            if line.startswith("alpha"):
                continue
            parts = line.split(",")
            if len(parts) != 3:
                raise DomainError(f"{path}:{lineno}: expected 3 columns, got {len(parts)}")
            try:
                rows.append(tuple(float(p) for p in parts))
            except ValueError as exc:
                raise DomainError(f"{path}:{lineno}: {exc}") from exc
    if meta.get("format") != TABLE_FORMAT or "tau" not in meta:
        raise DomainError(f"{path}: missing or unsupported table header")
    alphas = sorted({r[0] for r in rows})
    cs = sorted({r[1] for r in rows})
    grid = GridSpec(tuple(alphas), tuple(cs))
    log_z = np.full(grid.shape, np.nan)
    for a, c, v in rows:
        log_z[grid.alpha_index(a), grid.c_index(c)] = v
    return PartitionTable(grid, float(meta["tau"]), log_z, int(meta.get("nodes", DEFAULT_NODES)))


@lru_cache(maxsize=32)
def _memo_table(grid, tau, nodes):
    cache_dir = os.environ.get(CACHE_ENV)
    if cache_dir:
        path = Path(cache_dir) / f"ztable-{_settings_key(grid, tau, nodes)}.npz"
        if path.exists():
            try:
                table = load_table(path)
            except (OSError, ValueError, KeyError):
                table = None
            if table is not None and table.same_settings(grid, tau, nodes):
                return table
        table = build_table(grid, tau, nodes)
        path.parent.mkdir(parents=True, exist_ok=True)
        tmp = path.with_suffix(".tmp")
        save_table(table, tmp)
        os.replace(tmp, path)
        return table
    return build_table(grid, tau, nodes)


def get_table(grid: GridSpec, tau=DEFAULT_TAU, nodes=DEFAULT_NODES):
    """Memoized :func:`build_table`, persisted under ``$SRKO_TABLE_CACHE`` if set."""
    return _memo_table(grid, float(tau), int(nodes))


# -- likelihood and grid search ------------------------------------------------


def _residual_array(residuals):
    x = np.ascontiguousarray(np.asarray(residuals, dtype=np.float64).reshape(-1))
    if x.size == 0:
        raise DomainError("residuals must be non-empty")
    if not np.all(np.isfinite(x)):
        raise DomainError("residuals must be finite")
    return x


def nll(residuals, alpha, c, table: PartitionTable):
    """``sum(rho(x_i, alpha, c)) + N * log z_hat(alpha, c)``."""
    x = _residual_array(residuals)
    i = table.grid.alpha_index(alpha)
    j = table.grid.c_index(c)
    return float(_backend.impl.nll_alpha_scan(x, table._alphas[i:i + 1], table._cs[j], table.log_z[i:i + 1, j].copy())[0])


def select_index(values, scores, current=None):
    """Argmin of ``scores`` with ties broken toward ``current``, then the larger value."""
    scores = np.asarray(scores)
    best = float(np.min(scores))
    tol = TIE_TOL * max(1.0, abs(best))
    tied = [k for k in range(len(scores)) if scores[k] - best <= tol]
    if len(tied) == 1:
        return tied[0]
    if current is None:
        return max(tied, key=lambda k: values[k])

    def key(k):
        v = values[k]
        dist = 0.0 if v == current else abs(v - current)
        return (dist, -v if math.isfinite(v) else math.inf)

    return min(tied, key=key)


def alpha_scores(residuals, c, table):
    x = _residual_array(residuals)
    j = table.grid.c_index(c)
    return _backend.impl.nll_alpha_scan(x, table._alphas, table._cs[j], np.ascontiguousarray(table.log_z[:, j]))


def c_scores(residuals, alpha, table):
    x = _residual_array(residuals)
    i = table.grid.alpha_index(alpha)
    return _backend.impl.nll_c_scan(x, table._alphas[i], table._cs, np.ascontiguousarray(table.log_z[i, :]))


def fit_alpha(residuals, c, table: PartitionTable, current=None):
    """Grid shape minimizing the NLL at fixed scale ``c``."""
    scores = alpha_scores(residuals, c, table)
    return table.grid.alpha_values[select_index(table.grid.alpha_values, scores, current)]


def fit_c(residuals, alpha, table: PartitionTable, current=None):
    """Grid scale minimizing the NLL at fixed shape ``alpha``."""
    scores = c_scores(residuals, alpha, table)
    return table.grid.c_values[select_index(table.grid.c_values, scores, current)]


def fit_kernel(residuals, table: PartitionTable, alpha=2.0, c=1.0, fit_scale=True, max_iter=100):
    """Alternate :func:`fit_alpha` and :func:`fit_c` until neither changes.

    Returns ``(alpha, c, nll)``. With ``fit_scale=False`` only the shape is
    fitted.
    """
    x = _residual_array(residuals)
    for _ in range(max_iter):
        new_alpha = fit_alpha(x, c, table, current=alpha)
        new_c = fit_c(x, new_alpha, table, current=c) if fit_scale else c
        if new_alpha == alpha and new_c == c:
            break
        alpha, c = new_alpha, new_c
    return alpha, c, nll(x, alpha, c, table)


__all__ = [
    "NEG_INF",
    "GridSpec",
    "PartitionTable",
    "z_hat",
    "build_table",
    "get_table",
    "nll",
    "fit_alpha",
    "fit_c",
    "fit_kernel",
    "frange",
    "DEFAULT_ALPHA_GRID",
    "SRKO_C_GRID",
    "SRKO_STAR_C_GRID",
]
