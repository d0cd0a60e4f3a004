"""Command-line harness: generate, register, benchmark, table.

Every JSON report carries the full solver configuration, defaults included.
Benchmarks write plot-ready CSV files only; nothing is rendered.
"""

from __future__ import annotations

import argparse
import csv
import io
import json
import math
import sys
import time
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from pathlib import Path

import numpy as np

from srko import partition
from srko.errors import ConfigError, DomainError, GridLookupError, QuadratureError, SolverError
from srko.kernel import Huber
from srko.registration import (
    SyntheticConfig,
    generate_synthetic,
    load_instance,
    pose_to_dict,
    rmse,
    save_instance,
)
from srko.solver import (
    GNCSchedule,
    SolverConfig,
    gnc_geman_solve,
    irls_solve,
    least_squares_solve,
    rko_solve,
    srko_solve,
)

CONFIG_VERSION = 1
METHODS = ("huber", "rko", "srko", "srko-star", "gnc", "lsq")
HUBER_K = 1.3

ROW_COLUMNS = (
    "trial",
    "seed",
    "method",
    "scale",
    "alpha_final",
    "alpha_min",
    "alpha_max",
    "c_final",
    "c_min",
    "c_max",
    "rmse",
    "iterations",
    "converged",
    "error",
    "wall_time_s",
)
AGGREGATE_COLUMNS = ("method", "scale", "n_ok", "mean_rmse")
TIMING_COLUMNS = ("wall_time_s",)


# -- parsing helpers -----------------------------------------------------------------


def parse_grid(text):
    """``start:step:stop`` or a comma list; ``-inf`` is accepted for alpha."""
    text = text.strip()
    try:
        if ":" in text:
            start, step, stop = (float(t) for t in text.split(":"))
            return partition.frange(start, step, stop)
        return tuple(float(t) for t in text.split(",") if t.strip())
    except ValueError as exc:
        raise ConfigError(f"bad grid {text!r}: {exc}") from exc


def load_json(path):
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ConfigError(f"{path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ConfigError(f"{path}:{exc.lineno}:{exc.colno}: {exc.msg}") from exc
    if not isinstance(data, dict):
        raise ConfigError(f"{path}: top level must be an object")
    version = data.get("version", CONFIG_VERSION)
    if version != CONFIG_VERSION:
        raise ConfigError(f"{path}: field 'version': unsupported version {version!r}")
    return data



def _fmt(v):
    if v is None:
        return ""
    if isinstance(v, bool):
        return "1" if v else "0"
    if isinstance(v, float):
        return repr(v)
    return str(v)


# -- method dispatch -----------------------------------------------------------------


@dataclass(frozen=True)
class MethodOptions:
    alpha_grid: tuple | None = None
    c_grid: tuple | None = None
    tau: float = partition.DEFAULT_TAU
    max_outer: int = 50
    gn_steps: int = 1
    huber_k: float = HUBER_K
    step_tol: float = 1e-9
    gnc_schedule: GNCSchedule = field(default_factory=GNCSchedule)


def method_config(method, scale, opts: MethodOptions):
    """Solver configuration for a named method with the experiment defaults."""
    if method not in METHODS:
        raise ConfigError(f"unknown method {method!r}; choose from {', '.join(METHODS)}")
    alpha_grid = opts.alpha_grid or partition.DEFAULT_ALPHA_GRID
    default_c = {
        "rko": (1.0,),
        "srko": partition.SRKO_C_GRID,
        "srko-star": partition.SRKO_STAR_C_GRID,
    }.get(method, partition.SRKO_STAR_C_GRID)
    c_grid = opts.c_grid or default_c
    return SolverConfig(
        grid=partition.GridSpec(tuple(alpha_grid), tuple(c_grid)),
        tau=opts.tau,
        residual_scale=scale,
        init_alpha=2.0,
        init_c=1.0,
        max_outer=opts.max_outer,
        gn_steps_per_outer=opts.gn_steps,
        step_tol=opts.step_tol,
        gnc_schedule=opts.gnc_schedule,
    )


def run_method(method, problem, theta0, scale, opts: MethodOptions):
    config = method_config(method, scale, opts)
    if method == "lsq":
        sol = least_squares_solve(problem, theta0, config)
    elif method == "huber":
        sol = irls_solve(problem, theta0, Huber(opts.huber_k), config)
    elif method == "rko":
        sol = rko_solve(problem, theta0, config)
    elif method in ("srko", "srko-star"):
        sol = srko_solve(problem, theta0, config)
    else:
        sol = gnc_geman_solve(problem, theta0, config)
    sol.method = method
    return sol, config


def trace_rows(sol):
    return [
        {
            "iteration": k,
            "alpha": e.alpha,
            "c": e.c,
            "nll": e.nll,
            "mu": e.mu,
            "step_norm": e.step_norm,
            "residual_rms": e.residual_rms,
            "damping": e.damping,
        }
        for k, e in enumerate(sol.trace, 1)
    ]


# -- generate ------------------------------------------------------------------------


def cmd_generate(config_path, outdir, seed=None):
    data = load_json(config_path)
    if seed is not None:
        data["seed"] = seed
    cfg = SyntheticConfig.from_dict(data)
    inst = generate_synthetic(cfg)
    inst.metadata["config_version"] = CONFIG_VERSION
    return save_instance(inst, outdir), inst


# -- register ------------------------------------------------------------------------


def cmd_register(dataset, method, scale=1.0, opts: MethodOptions = MethodOptions()):
    inst = load_instance(dataset)
    problem = inst.problem()
    theta0 = np.zeros(6)
    sol, config = run_method(method, problem, theta0, scale, opts)
    pose = problem.pose(sol.theta)
    report = {
        "version": CONFIG_VERSION,
        "dataset": str(dataset),
        "method": method,
        "residual_scale": scale,
        "huber_k": opts.huber_k if method == "huber" else None,
        "config": config.as_dict(),
        "converged": sol.converged,
        "iterations": sol.iterations,
        "theta": sol.theta.tolist(),
        "pose": pose_to_dict(pose),
        "rmse": rmse(pose, inst) if inst.truth is not None else None,
        "trace": trace_rows(sol),
    }
    return report


# -- benchmark -----------------------------------------------------------------------


@dataclass
class BenchmarkReport:
    rows: list
    aggregates: list
    meta: dict
    alpha_traces: list = field(default_factory=list)
    c_traces: list = field(default_factory=list)

    def rows_csv(self, exclude=()):
        cols = [c for c in ROW_COLUMNS if c not in exclude]
        return _to_csv(cols, self.rows)

    def aggregates_csv(self):
        return _to_csv(AGGREGATE_COLUMNS, self.aggregates)


def _to_csv(cols, rows):
    buf = io.StringIO()
    w = csv.writer(buf, lineterminator="\n")
    w.writerow(cols)
    for r in rows:
        w.writerow([_fmt(r.get(c)) for c in cols])
    return buf.getvalue()


def aggregate(rows):
    groups = {}
    for r in rows:
        groups.setdefault((r["method"], r["scale"]), []).append(r)
    out = []
    for (method, scale), rs in groups.items():
        ok = [r["rmse"] for r in rs if r["rmse"] is not None and not r["error"]]
        out.append(
            {
                "method": method,
                "scale": scale,
                "n_ok": len(ok),
                "mean_rmse": math.fsum(ok) / len(ok) if ok else None,
            }
        )
    return out


def _summary(values):
    vals = [v for v in values if v is not None]
    if not vals:
        return None, None, None
    return vals[-1], min(vals), max(vals)


def _run_cell(args):
    trial, seed, synthetic, method, scale, opts = args
    row = {"trial": trial, "seed": seed, "method": method, "scale": scale, "error": ""}
    start = time.perf_counter()
    try:
        inst = generate_synthetic(replace(synthetic, seed=seed))
        problem = inst.problem()
        sol, _ = run_method(method, problem, np.zeros(6), scale, opts)
        row["alpha_final"], row["alpha_min"], row["alpha_max"] = _summary(sol.alpha_trace)
        row["c_final"], row["c_min"], row["c_max"] = _summary(sol.c_trace)
        row["rmse"] = rmse(problem.pose(sol.theta), inst)
        row["iterations"] = sol.iterations
        row["converged"] = sol.converged
        alpha_trace = sol.alpha_trace
        c_trace = sol.c_trace
    except Exception as exc:  # noqa: BLE001 -- recorded in-row, the suite continues
        row["rmse"] = None
        row["error"] = f"{type(exc).__name__}: {exc}".replace("\n", " ")
        alpha_trace, c_trace = [], []
    row["wall_time_s"] = time.perf_counter() - start
    return row, alpha_trace, c_trace


def _suite(data, seed=None, max_outer=None, gn_steps=None):
    known = {"version", "trials", "base_seed", "synthetic", "methods", "scales", "solver", "plot_data"}
    unknown = set(data) - known
    if unknown:
        raise ConfigError(f"unknown suite field(s): {', '.join(sorted(unknown))}")
    trials = data.get("trials", 25)
    base = data.get("base_seed", 0) if seed is None else seed
    if isinstance(trials, int):
        if trials < 1:
            raise ConfigError("field 'trials': must be >= 1")
        seeds = [base + k for k in range(trials)]
    elif isinstance(trials, list) and all(isinstance(s, int) for s in trials):
        seeds = list(trials)
    else:
        raise ConfigError("field 'trials': must be a count or a list of integer seeds")
    methods = data.get("methods", ["huber", "rko", "srko-star", "gnc"])
    for m in methods:
        if m not in METHODS:
            raise ConfigError(f"field 'methods': unknown method {m!r}")
    scales = [float(s) for s in data.get("scales", [1.0])]
    if any(not s > 0 for s in scales):
        raise ConfigError("field 'scales': must be positive")
    synthetic = SyntheticConfig.from_dict({"n_points": 1000, "noise_sigma": 0.005, "outlier_fraction": 0.4, **data.get("synthetic", {})})
    solver = dict(data.get("solver", {}))
    if max_outer is not None:
        solver["max_outer"] = max_outer
    if gn_steps is not None:
        solver["gn_steps"] = gn_steps
    opts = options_from_dict(solver)
    return seeds, methods, scales, synthetic, opts


def options_from_dict(d):
    d = dict(d)
    allowed = {"alpha_grid", "c_grid", "tau", "max_outer", "gn_steps", "huber_k", "step_tol", "gnc_schedule"}
    unknown = set(d) - allowed
    if unknown:
        raise ConfigError(f"unknown solver field(s): {', '.join(sorted(unknown))}")
    for key in ("alpha_grid", "c_grid"):
        if key in d and d[key] is not None:
            d[key] = parse_grid(d[key]) if isinstance(d[key], str) else tuple(float(v) for v in d[key])
    if "gnc_schedule" in d:
        try:
            d["gnc_schedule"] = GNCSchedule(**d["gnc_schedule"])
        except (TypeError, DomainError) as exc:
            raise ConfigError(f"field 'gnc_schedule': {exc}") from exc
    return MethodOptions(**d)


def run_benchmark(data, seed=None, max_outer=None, gn_steps=None, jobs=1):
    seeds, methods, scales, synthetic, opts = _suite(data, seed, max_outer, gn_steps)
    cells = [
        (trial, s, synthetic, method, scale, opts)
        for trial, s in enumerate(seeds)
        for method in methods
        for scale in scales
    ]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_run_cell, cells))
    else:
        results = [_run_cell(c) for c in cells]
    rows = [r for r, _, _ in results]
    meta = {
        "version": CONFIG_VERSION,
        "seeds": seeds,
        "methods": methods,
        "scales": scales,
        "synthetic": {k: v for k, v in vars(synthetic).items() if k != "seed"},
        "solver": {m: method_config(m, 1.0, opts).as_dict() for m in methods},
        "huber_k": opts.huber_k,
    }
    return BenchmarkReport(
        rows,
        aggregate(rows),
        meta,
        [(r["trial"], r["method"], r["scale"], a) for r, a, _ in results],
        [(r["trial"], r["method"], r["scale"], c) for r, _, c in results],
    )


def write_benchmark(report: BenchmarkReport, out, plot_data=True):
    out = Path(out)
    out.parent.mkdir(parents=True, exist_ok=True)
    stem = out.with_suffix("")
    paths = [out, Path(f"{stem}_aggregate.csv"), Path(f"{stem}_meta.json")]
    out.write_text(report.rows_csv())
    paths[1].write_text(report.aggregates_csv())
    paths[2].write_text(json.dumps(report.meta, indent=2) + "\n")
    if plot_data:
        lines = ["trial,method,scale,iteration,alpha,c"]
        for (trial, method, scale, alphas), (_, _, _, cs) in zip(report.alpha_traces, report.c_traces):
            for k, (a, c) in enumerate(zip(alphas, cs), 1):
                lines.append(f"{trial},{method},{scale!r},{k},{_fmt(a)},{_fmt(c)}")
        p = Path(f"{stem}_learned_params.csv")
        p.write_text("\n".join(lines) + "\n")
        paths.append(p)
        lines = ["trial,method,scale,rmse"] + [
            f"{r['trial']},{r['method']},{r['scale']!r},{_fmt(r['rmse'])}" for r in report.rows
        ]
        p = Path(f"{stem}_rmse.csv")
        p.write_text("\n".join(lines) + "\n")
        paths.append(p)
    return paths


def cmd_benchmark(suite_path, out, seed=None, max_outer=None, gn_steps=None, jobs=1):
    data = load_json(suite_path)
    report = run_benchmark(data, seed, max_outer, gn_steps, jobs)
    write_benchmark(report, out, plot_data=data.get("plot_data", True))
    return report


# -- table ---------------------------------------------------------------------------


def cmd_table(alpha_grid, c_grid, tau, out, nodes=partition.DEFAULT_NODES):
    grid = partition.GridSpec(tuple(alpha_grid), tuple(c_grid))
    table = partition.build_table(grid, tau, nodes)
    partition.write_table_csv(table, out)
    return table


# -- entry point ---------------------------------------------------------------------


def build_parser():
    p = argparse.ArgumentParser(prog="srko", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    g = sub.add_parser("generate", help="write a synthetic registration dataset")
    g.add_argument("config", help="JSON file with SyntheticConfig fields")
    g.add_argument("outdir")
    g.add_argument("--seed", type=int)

    def solver_flags(sp):
        sp.add_argument("--alpha-grid", type=parse_grid)
        sp.add_argument("--c-grid", type=parse_grid)
        sp.add_argument("--tau", type=float, default=partition.DEFAULT_TAU)
        sp.add_argument("--max-outer", type=int, default=None)
        sp.add_argument("--gn-steps", type=int, default=None)

    r = sub.add_parser("register", help="register one dataset directory")
    r.add_argument("dataset")
    r.add_argument("--method", required=True, choices=METHODS)
    r.add_argument("--scale", type=float, default=1.0)
    r.add_argument("--huber-k", type=float, default=HUBER_K)
    solver_flags(r)
    r.add_argument("--out", help="write the JSON report here")

    b = sub.add_parser("benchmark", help="run a trial x method x scale suite")
    b.add_argument("suite")
    b.add_argument("--out", required=True, help="per-trial CSV path")
    b.add_argument("--seed", type=int, help="override the suite base seed")
    b.add_argument("--max-outer", type=int)
    b.add_argument("--gn-steps", type=int)
    b.add_argument("--jobs", type=int, default=1)

    t = sub.add_parser("table", help="export a partition-function table as CSV")
    t.add_argument("--alpha-grid", type=parse_grid, default=partition.DEFAULT_ALPHA_GRID)
    t.add_argument("--c-grid", type=parse_grid, default=partition.SRKO_STAR_C_GRID)
    t.add_argument("--tau", type=float, default=partition.DEFAULT_TAU)
    t.add_argument("--nodes", type=int, default=partition.DEFAULT_NODES)
    t.add_argument("--out", required=True)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    try:
        if args.command == "generate":
            paths, inst = cmd_generate(args.config, args.outdir, args.seed)
            print(f"wrote {len(paths)} files to {args.outdir} (n={len(inst.source)}, outliers={inst.metadata['n_outliers']})")
        elif args.command == "register":
            opts = MethodOptions(
                alpha_grid=args.alpha_grid,
                c_grid=args.c_grid,
                tau=args.tau,
                huber_k=args.huber_k,
                **({"max_outer": args.max_outer} if args.max_outer else {}),
                **({"gn_steps": args.gn_steps} if args.gn_steps else {}),
            )
            report = cmd_register(args.dataset, args.method, args.scale, opts)
            text = json.dumps(report, indent=2) + "\n"
            if args.out:
                Path(args.out).write_text(text)
            last = report["trace"][-1] if report["trace"] else {}
            rmse_txt = "n/a" if report["rmse"] is None else f"{report['rmse']:.6g}"
            print(
                f"{args.method} s={args.scale:g}: iterations={report['iterations']} converged={report['converged']} "
                f"alpha={last.get('alpha')} c={last.get('c')} rmse={rmse_txt}"
            )
        elif args.command == "benchmark":
            report = cmd_benchmark(args.suite, args.out, args.seed, args.max_outer, args.gn_steps, args.jobs)
            for a in report.aggregates:
                mean = "n/a" if a["mean_rmse"] is None else f"{a['mean_rmse']:.6g}"
                print(f"{a['method']:>10} s={a['scale']:<6g} n={a['n_ok']:<3d} mean_rmse={mean}")
        elif args.command == "table":
            table = cmd_table(args.alpha_grid, args.c_grid, args.tau, args.out, args.nodes)
            print(f"wrote {table.log_z.size} rows to {args.out}")
    except (ConfigError, DomainError, GridLookupError, QuadratureError, SolverError, FileNotFoundError) as exc:
        print(f"srko {args.command}: error: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
