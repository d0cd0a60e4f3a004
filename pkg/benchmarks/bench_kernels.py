"""Compare the compiled and numpy kernel backends.

    python benchmarks/bench_kernels.py [--sizes 100 1000 10000] [--repeat 5]

Times elementwise rho/weight, the NLL scans used by the grid search, and a
full partition-table build, then prints a speedup column
(numpy time / compiled time; above 1 means the compiled backend is faster).
The ``auto`` column is the default size-based dispatch.
"""

import argparse
import timeit

import numpy as np

from srko import _backend
from srko.partition import DEFAULT_ALPHA_GRID, SRKO_STAR_C_GRID, DEFAULT_NODES, DEFAULT_TAU


def best_of(fn, repeat, number):
    return min(timeit.repeat(fn, repeat=repeat, number=number)) / number


def cases(impl, n, rng):
    x = np.abs(rng.standard_t(2.0, n)) * 0.1
    alphas = np.array(DEFAULT_ALPHA_GRID)
    cs = np.array(SRKO_STAR_C_GRID)
    lz_a = np.zeros(len(alphas))
    lz_c = np.zeros(len(cs))
    return {
        "rho (alpha=-1.5)": lambda: impl.rho(x, -1.5, 0.3),
        "weight (alpha=0.5)": lambda: impl.weight(x, 0.5, 0.3),
        "nll alpha scan (25)": lambda: impl.nll_alpha_scan(x, alphas, 0.3, lz_a),
        "nll c scan (40)": lambda: impl.nll_c_scan(x, -1.0, cs, lz_c),
    }


def table_build(impl):
    def run():
        for a in DEFAULT_ALPHA_GRID:
            for c in SRKO_STAR_C_GRID:
                impl.simpson_exp_neg_rho(a, c, DEFAULT_TAU, DEFAULT_NODES)
    return run


def main(argv=None):
    ap = argparse.ArgumentParser(description=__doc__.splitlines()[0])
    ap.add_argument("--sizes", type=int, nargs="+", default=[100, 1000, 10_000, 100_000])
    ap.add_argument("--repeat", type=int, default=5)
    args = ap.parse_args(argv)

    names = _backend.available()
    if "compiled" not in names:
        print("compiled backend not built; only numpy timings are shown")
    impls = {name: _backend.load(name) for name in names}
    if "compiled" in names:
        impls["auto"] = _backend.load("auto")
    cols = list(impls)

    print(f"{'case':<22}{'n':>8}" + "".join(f"{n + ' [us]':>16}" for n in cols) + ("  speedup" if len(names) > 1 else ""))
    for n in args.sizes:
        number = max(1, 200_000 // n)
        per = {name: cases(impl, n, np.random.default_rng(0)) for name, impl in impls.items()}
        for case in per[names[0]]:
            t = {name: best_of(per[name][case], args.repeat, number) for name in cols}
            line = f"{case:<22}{n:>8}" + "".join(f"{t[name] * 1e6:>16.1f}" for name in cols)
            if len(names) > 1:
                line += f"{t['python'] / t['compiled']:>9.2f}"
            print(line)
    t = {name: best_of(table_build(impl), max(1, args.repeat // 2), 1) for name, impl in impls.items()}
    line = f"{'table build 25x40':<22}{DEFAULT_NODES:>8}" + "".join(f"{t[name] * 1e6:>16.0f}" for name in cols)
    if len(names) > 1:
        line += f"{t['python'] / t['compiled']:>9.2f}"
    print(line)


if __name__ == "__main__":
    main()
