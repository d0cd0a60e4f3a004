import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy import integrate
from scipy.special import erf

from srko import partition
from srko.errors import DomainError, GridLookupError, QuadratureError
from srko.kernel import NEG_INF, KernelParams, rho
from srko.partition import (
    DEFAULT_ALPHA_GRID,
    SRKO_C_GRID,
    SRKO_STAR_C_GRID,
    GridSpec,
    PartitionTable,
    build_table,
    fit_alpha,
    fit_c,
    fit_kernel,
    frange,
    get_table,
    load_table,
    nll,
    read_table_csv,
    save_table,
    select_index,
    write_table_csv,
    z_hat,
)

# frozen oracles (closed forms and a 10^6-node trapezoid rule)
GAUSS_Z = 2.5066282746310002
GAUSS_LOG_Z = 0.9189385332046727
CAUCHY_Z = 4.0455180549712075
WELSCH_TRAPEZOID_Z = 8.717731999523313


@pytest.fixture(scope="module")
def full_table():
    return get_table(GridSpec(DEFAULT_ALPHA_GRID, SRKO_STAR_C_GRID))


def brute_force_nll(x, table):
    """Full 2-D NLL matrix computed directly from the kernel."""
    out = np.empty(table.grid.shape)
    for i, a in enumerate(table.grid.alpha_values):
        for j, c in enumerate(table.grid.c_values):
            out[i, j] = math.fsum(rho(x, KernelParams(a, c))) + len(x) * table.log_z[i, j]
    return out


class TestGrids:
    def test_frange(self):
        assert len(DEFAULT_ALPHA_GRID) == 25
        assert DEFAULT_ALPHA_GRID[0] == -4.0 and DEFAULT_ALPHA_GRID[-1] == 2.0
        assert len(SRKO_STAR_C_GRID) == 40
        assert SRKO_STAR_C_GRID[0] == 0.05 and SRKO_STAR_C_GRID[-1] == 2.0
        assert 0.3 in SRKO_STAR_C_GRID
        assert SRKO_C_GRID == (1.0, 1.25, 1.5, 1.75, 2.0, 2.25, 2.5, 2.75, 3.0)
        assert frange(1, 1, 1) == (1,)

    @pytest.mark.parametrize(
        "alphas,cs",
        [((), (1.0,)), ((2.0,), ()), ((1.0, 0.0), (1.0,)), ((2.0,), (0.0,)), ((3.0,), (1.0,))],
    )
    def test_invalid_grid(self, alphas, cs):
        with pytest.raises(DomainError):
            GridSpec(alphas, cs)

    def test_neg_inf_allowed(self):
        g = GridSpec((NEG_INF, 0.0, 2.0), (1.0,))
        assert g.alpha_index(NEG_INF) == 0

    def test_lookup_error(self):
        with pytest.raises(GridLookupError):
            GridSpec((2.0,), (1.0,)).c_index(0.5)


class TestZHat:
    def test_gaussian_oracle(self, backend):
        assert z_hat(2, 1, 10) == pytest.approx(math.sqrt(2 * math.pi) * erf(10 / math.sqrt(2)), rel=1e-12)
        assert z_hat(2, 1, 10) == pytest.approx(GAUSS_Z, rel=1e-6)

    def test_cauchy_oracle(self, backend):
        assert z_hat(0, 1, 10) == pytest.approx(CAUCHY_Z, rel=1e-6)

    def test_welsch_trapezoid_oracle(self, backend):
        assert z_hat(NEG_INF, 1, 10) == pytest.approx(WELSCH_TRAPEZOID_Z, rel=1e-8)

    @pytest.mark.parametrize("c", [0.05, 0.1, 0.5, 1, 2])
    def test_closed_forms_over_scales(self, backend, c):
        gauss = c * math.sqrt(2 * math.pi) * erf(10 / (c * math.sqrt(2)))
        cauchy = 2 * math.sqrt(2) * c * math.atan(10 / (math.sqrt(2) * c))
        assert z_hat(2, c, 10) == pytest.approx(gauss, rel=1e-6)
        assert z_hat(0, c, 10) == pytest.approx(cauchy, rel=1e-6)

    @pytest.mark.parametrize("alpha", [-4.0, -1.5, 0.75, 1.5])
    def test_against_adaptive_quadrature(self, alpha):
        for c in (0.05, 0.6, 2.0):
            p = KernelParams(alpha, c)
            ref, _ = integrate.quad(lambda x: math.exp(-rho(x, p)), -10, 10, points=[0.0], limit=500, epsabs=0, epsrel=1e-13)
            assert z_hat(alpha, c, 10) == pytest.approx(ref, rel=1e-9)

    def test_scale_transport(self, backend):
        for a in (NEG_INF, -4.0, -1.0, 0.0, 1.0, 2.0):
            for c in (0.05, 0.3, 1.0, 2.0):
                assert z_hat(a, c, 10) == pytest.approx(c * z_hat(a, 1.0, 10 / c), rel=1e-6)

    def test_quadrature_failure_reports(self):
        # a very narrow kernel on a coarse rule cannot meet the tolerance
        with pytest.raises(QuadratureError) as info:
            z_hat(2, 0.01, 10, nodes=41)
        assert info.value.alpha == 2 and info.value.c == 0.01

    def test_bad_nodes(self):
        with pytest.raises(DomainError):
            z_hat(2, 1, 10, nodes=100)


class TestTable:
    def test_single_entry(self, backend):
        t = build_table(GridSpec((2.0,), (1.0,)), 10)
        assert t.log_z.shape == (1, 1)
        assert t.lookup(2, 1) == pytest.approx(GAUSS_LOG_Z, rel=1e-9)

    def test_full_grid(self, full_table):
        assert full_table.log_z.shape == (25, 40)
        assert np.all(np.isfinite(full_table.log_z))
        assert not full_table.log_z.flags.writeable

    def test_deterministic(self):
        g = GridSpec((-1.0, 2.0), (0.5, 1.0))
        np.testing.assert_array_equal(build_table(g).log_z, build_table(g).log_z)

    def test_failure_names_grid_point(self):
        with pytest.raises(QuadratureError, match=r"alpha\[0\]=2.0, c\[0\]=0.01"):
            build_table(GridSpec((2.0,), (0.01, 1.0)), nodes=41)

    def test_shape_mismatch(self):
        with pytest.raises(DomainError):
            PartitionTable(GridSpec((2.0,), (1.0,)), 10.0, np.zeros((2, 1)))

    def test_roundtrip_csv_and_npz(self, tmp_path):
        t = build_table(GridSpec((NEG_INF, -0.25, 2.0), (0.05, 0.15, 1.0)), 10)
        write_table_csv(t, tmp_path / "t.csv")
        save_table(t, tmp_path / "t.npz")
        for loaded in (read_table_csv(tmp_path / "t.csv"), load_table(tmp_path / "t.csv"), load_table(tmp_path / "t.npz")):
            assert loaded.grid == t.grid and loaded.tau == t.tau and loaded.nodes == t.nodes
            np.testing.assert_array_equal(loaded.log_z, t.log_z)

    def test_bad_csv(self, tmp_path):
        p = tmp_path / "bad.csv"
        p.write_text("alpha,c,log_z\n2.0,1.0,0.9\n")
        with pytest.raises(DomainError):
            read_table_csv(p)

    def test_disk_cache(self, tmp_path, monkeypatch):
        monkeypatch.setenv(partition.CACHE_ENV, str(tmp_path))
        partition._memo_table.cache_clear()
        g = GridSpec((0.0, 2.0), (0.5,))
        t1 = get_table(g)
        files = list(tmp_path.glob("ztable-*.npz"))
        assert len(files) == 1
        partition._memo_table.cache_clear()
        t2 = get_table(g)
        np.testing.assert_array_equal(t1.log_z, t2.log_z)
        # different settings use a different file
        partition._memo_table.cache_clear()
        get_table(g, tau=5.0)
        assert len(list(tmp_path.glob("ztable-*.npz"))) == 2
        partition._memo_table.cache_clear()


class TestNLL:
    def test_examples(self, full_table, backend):
        t1 = build_table(GridSpec((2.0,), (1.0,)))
        assert nll([0.0], 2, 1, t1) == pytest.approx(0.91894, abs=1e-5)
        assert nll([0.0, 0.0], -1.5, 0.35, full_table) == pytest.approx(2 * full_table.lookup(-1.5, 0.35), rel=1e-15)

    def test_gaussian_scale_preference(self, full_table, backend):
        x = np.random.default_rng(1).normal(0, 0.1, 10_000)
        assert nll(x, 2, 0.1, full_table) < nll(x, 2, 1.0, full_table)

    def test_errors(self, full_table):
        with pytest.raises(GridLookupError):
            nll([1.0], 2, 0.33, full_table)
        with pytest.raises(GridLookupError):
            nll([1.0], 1.9, 1.0, full_table)
        with pytest.raises(DomainError):
            nll([], 2, 1.0, full_table)
        with pytest.raises(DomainError):
            nll([np.nan], 2, 1.0, full_table)

    def test_matches_direct_sum(self, full_table, backend):
        x = np.random.default_rng(2).normal(0, 0.4, 300)
        for a, c in ((-4.0, 0.05), (0.0, 1.0), (1.25, 0.6), (2.0, 2.0)):
            ref = math.fsum(rho(x, KernelParams(a, c))) + 300 * full_table.lookup(a, c)
            assert nll(x, a, c, full_table) == pytest.approx(ref, rel=1e-12)


class TestFit:
    def test_gaussian_alpha(self, full_table, backend):
        x = np.random.default_rng(3).normal(0, 1.0, 10_000)
        assert fit_alpha(x, 1.0, full_table) == 2.0

    def test_outliers_lower_alpha(self, full_table, backend):
        rng = np.random.default_rng(4)
        c = 0.2
        x = np.concatenate([rng.normal(0, c, 600), rng.choice([-1, 1], 400) * rng.normal(5 * c, 0.01, 400)])
        assert fit_alpha(x, c, full_table) < 2.0
        bf = brute_force_nll(x, full_table)[:, full_table.grid.c_index(c)]
        assert full_table.grid.alpha_values[int(np.argmin(bf))] < 2.0

    def test_single_zero_residual(self, full_table, backend):
        j = full_table.grid.c_index(1.0)
        assert fit_alpha([0.0], 1.0, full_table) == 2.0
        assert full_table.grid.alpha_values[int(np.argmin(full_table.log_z[:, j]))] == 2.0

    def test_gaussian_scale(self, full_table, backend):
        x = np.random.default_rng(5).normal(0, 0.1, 10_000)
        assert fit_c(x, 2.0, full_table) in (0.05, 0.1, 0.15)

    def test_zero_residuals_smallest_c(self, full_table, backend):
        assert fit_c(np.zeros(10), 0.0, full_table) == 0.05
        assert int(np.argmin(full_table.log_z[full_table.grid.alpha_index(0.0)])) == 0

    def test_deterministic(self, full_table):
        x = np.random.default_rng(6).normal(0, 0.3, 500)
        assert fit_c(x, 1.0, full_table) == fit_c(x, 1.0, full_table)

    def test_brute_force_equivalence(self, full_table, backend):
        rng = np.random.default_rng(7)
        for _ in range(20):
            n = int(rng.integers(1, 200))
            x = rng.standard_t(float(rng.uniform(1, 10)), n) * rng.uniform(0.02, 1.0)
            bf = brute_force_nll(x, full_table)
            c = float(rng.choice(full_table.grid.c_values))
            a = float(rng.choice(full_table.grid.alpha_values))
            j = full_table.grid.c_index(c)
            i = full_table.grid.alpha_index(a)
            assert full_table.grid.alpha_index(fit_alpha(x, c, full_table)) == int(np.argmin(bf[:, j]))
            assert full_table.grid.c_index(fit_c(x, a, full_table)) == int(np.argmin(bf[i, :]))

    def test_fit_steps_do_not_increase_nll(self, full_table):
        rng = np.random.default_rng(8)
        x = np.abs(np.concatenate([rng.normal(0, 0.05, 300), rng.uniform(-1, 1, 200)]))
        a, c = 2.0, 1.0
        prev = nll(x, a, c, full_table)
        for _ in range(5):
            a = fit_alpha(x, c, full_table, current=a)
            cur = nll(x, a, c, full_table)
            assert cur <= prev
            c = fit_c(x, a, full_table, current=c)
            prev, cur = cur, nll(x, a, c, full_table)
            assert cur <= prev
            prev = cur

    def test_fit_kernel_fixed_point(self, full_table):
        x = np.random.default_rng(9).normal(0, 0.5, 2000)
        a, c, value = fit_kernel(x, full_table)
        assert fit_alpha(x, c, full_table, current=a) == a
        assert fit_c(x, a, full_table, current=c) == c
        assert value == nll(x, a, c, full_table)
        a2, c2, _ = fit_kernel(x, full_table, fit_scale=False)
        assert c2 == 1.0


class TestTieBreaking:
    def test_toward_current(self):
        vals = (-1.0, 0.0, 1.0, 2.0)
        scores = [1.0, 0.5, 0.5, 0.5]
        assert select_index(vals, scores, current=0.1) == 1
        assert select_index(vals, scores, current=1.9) == 3

    def test_equidistant_prefers_larger(self):
        assert select_index((0.0, 1.0, 2.0), [0.0, 5.0, 0.0], current=1.0) == 2
        assert select_index((0.0, 1.0, 2.0), [0.0, 5.0, 0.0]) == 2

    def test_relative_tolerance(self):
        assert select_index((0.0, 1.0), [1e6, 1e6 + 1e-7], current=1.0) == 1
        assert select_index((0.0, 1.0), [1.0, 1.0 + 1e-9], current=1.0) == 0

    def test_neg_inf_value(self):
        assert select_index((NEG_INF, 0.0), [0.0, 0.0], current=NEG_INF) == 0
        assert select_index((NEG_INF, 0.0), [0.0, 0.0], current=-5.0) == 1

    @settings(max_examples=100, deadline=None)
    @given(st.lists(st.floats(-100, 100), min_size=1, max_size=12))
    def test_returns_a_minimum(self, scores):
        k = select_index(tuple(range(len(scores))), scores)
        assert scores[k] <= min(scores) + 1e-12 * max(1.0, abs(min(scores)))
