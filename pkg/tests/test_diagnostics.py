import math
import warnings

import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st

from stexceed.diagnostics import (
    BootstrapScheme,
    bootstrap_indices,
    chi_curve,
    chi_from_series,
    chi_star,
    empirical_chi,
    nearest_neighbors,
    rmse_comparison,
    site_thresholds,
    stationary_bootstrap,
)
from stexceed.geometry import SpaceTimePoint
from stexceed.model import chi_sub, chibar_sub
from stexceed.panel import ExceedancePanel
from stexceed.simulate import SimulationDesign, scenario_a, simulate_panel, uniform_sites


def test_thresholds_are_type7_quantiles(rng):
    v = rng.exponential(size=(3, 101))
    v[1, 5] = np.nan
    u = site_thresholds(v, 0.9)
    assert u[0] == np.quantile(v[0], 0.9)
    assert u[1] == np.quantile(v[1][np.isfinite(v[1])], 0.9)
    with pytest.raises(ValueError):
        site_thresholds(v, 1.0)


def test_independent_series(rng):
    n = 100_000
    a, b = rng.normal(size=n), rng.normal(size=n)
    chi, chibar = chi_from_series(a, b, 0.95)
    assert abs(chi - 0.05) < 3 * math.sqrt(0.05 * 0.95 / (0.05 * n))
    assert abs(chibar) < 0.03


def test_identical_series():
    a = np.arange(1000.0)
    assert chi_from_series(a, a, 0.9) == (1.0, 1.0)


def test_missing_values_are_skipped(rng):
    a, b = rng.normal(size=500), rng.normal(size=500)
    a2 = a.copy()
    a2[::7] = np.nan
    ok = np.isfinite(a2)
    ua = np.quantile(a[ok], 0.8)
    ub = np.quantile(b, 0.8)
    expected = np.sum((a[ok] > ua) & (b[ok] > ub)) / np.sum(b[ok] > ub)
    assert chi_from_series(a2, b, 0.8)[0] == pytest.approx(expected)


@pytest.fixture(scope="module")
def isolated_pairs():
    """Sixteen sites far apart so that each one only depends on its own past."""
    g = np.arange(4) * 1.0
    sites = np.array([(x, y) for x in g for y in g])
    design = SimulationDesign(sites, np.arange(1, 20_001, dtype=float), 31)
    return simulate_panel(design, scenario_a())


def test_chi_matches_model_at_lag(isolated_pairs):
    p = scenario_a()
    q = 0.99
    v = 1.0 / (1.0 - q) - p.censoring_rate - 1.0
    pairs = [(i, i) for i in range(16)]
    target = float(chi_sub(v, SpaceTimePoint((0, 0), 0), SpaceTimePoint((0, 0), 2.0), p))
    est = empirical_chi(isolated_pairs, pairs, q, time_lag=2)
    band = stationary_bootstrap(
        isolated_pairs, BootstrapScheme(n_boot=100, mean_block=50, seed=1),
        lambda pn: [empirical_chi(pn, pairs, q, 2).chi, empirical_chi(pn, pairs, q, 2).chibar],
    )
    assert band.lo[0] <= target <= band.hi[0]
    assert est.chi == band.estimate[0]
    # the sub-asymptotic chibar at the same level, not its limit, is the model target
    target_bar = float(chibar_sub(v, SpaceTimePoint((0, 0), 0), SpaceTimePoint((0, 0), 2.0), p))
    assert band.lo[1] <= target_bar <= band.hi[1]


def test_chi_curve_table(isolated_pairs):
    panel = isolated_pairs.subset_times(np.arange(3000))
    tab = chi_curve(panel, 0.95, time_lag=1, n_bins=4)
    assert list(tab.columns[:4]) == ["time_lag", "distance", "q", "n_pairs"]
    assert len(tab) == 4
    assert tab["n_pairs"].sum() == 16 * 16
    assert np.all(np.diff(tab["distance"]) > 0)
    # the nearest bin holds the self pairs at lag one, which are strongly dependent
    assert tab["chi"].iloc[0] > tab["chi"].iloc[-1]


def test_bootstrap_indices_rotation_when_block_exceeds_series():
    idx = bootstrap_indices(50, 80, np.random.default_rng(0))
    assert np.all(np.diff(idx) % 50 == 1)


@given(st.integers(2, 400), st.floats(1.0, 50.0), st.integers(0, 2**32 - 1))
def test_bootstrap_indices_are_circular_blocks(n, mean_block, seed):
    idx = bootstrap_indices(n, mean_block, np.random.default_rng(seed))
    assert idx.shape == (n,)
    assert idx.min() >= 0 and idx.max() < n


def test_bootstrap_block_length_mean():
    rng = np.random.default_rng(3)
    breaks = 0
    total = 0
    for _ in range(200):
        idx = bootstrap_indices(2000, 40, rng)
        breaks += np.sum(np.diff(idx) % 2000 != 1)
        total += 1999
    # probability of a new block at each step is 1/40 (a restart may continue the same block)
    assert breaks / total == pytest.approx(1 / 40, rel=0.1)


def test_bootstrap_band_coverage():
    covered = 0
    for r in range(100):
        rng = np.random.default_rng(1000 + r)
        panel = ExceedancePanel([[0.0, 0.0]], rng.uniform(0, 2, size=(1, 200)))
        band = stationary_bootstrap(panel, BootstrapScheme(n_boot=200, mean_block=5, seed=r), lambda p: p.values[0].mean())
        covered += band.lo <= 1.0 <= band.hi
    assert 0.88 <= covered / 100 <= 0.99


def test_bootstrap_flags_degenerate_statistic():
    panel = ExceedancePanel([[0.0, 0.0]], np.ones((1, 30)))
    band = stationary_bootstrap(panel, BootstrapScheme(n_boot=10, mean_block=5), lambda p: p.values.sum())
    assert band.degenerate


def test_bootstrap_reproducible_and_thread_invariant(rng):
    panel = ExceedancePanel([[0.0, 0.0]], rng.exponential(size=(1, 300)))

    def stat(p):
        return np.median(p.values)

    a = stationary_bootstrap(panel, BootstrapScheme(n_boot=50, mean_block=10, seed=4), stat)
    b = stationary_bootstrap(panel, BootstrapScheme(n_boot=50, mean_block=10, seed=4, n_threads=4), stat)
    assert a.replicates.tobytes() == b.replicates.tobytes()


def test_invalid_bootstrap_scheme():
    with pytest.raises(ValueError):
        BootstrapScheme(n_boot=0)
    with pytest.raises(ValueError):
        BootstrapScheme(mean_block=0.5)


def test_nearest_neighbors_on_grid():
    g = np.arange(3.0)
    sites = np.array([(x, y) for x in g for y in g])
    nb = nearest_neighbors(sites)
    assert sorted(nb[4]) == [1, 3, 5, 7]
    assert all(i not in row for i, row in enumerate(nb))
    with pytest.raises(ValueError):
        nearest_neighbors(sites[:4])


def test_chi_star_under_independence(rng):
    n = 100_000
    panel = ExceedancePanel(uniform_sites(5, 0), rng.exponential(size=(5, n)))
    est, counts = chi_star(panel, 0, 0.5)
    se = math.sqrt(0.0625 * 0.9375 / counts[0])
    assert abs(est[0] - 0.0625) < 3 * se


def test_chi_star_perfect_dependence(rng):
    row = rng.exponential(size=400)
    panel = ExceedancePanel(uniform_sites(5, 0), np.tile(row, (5, 1)))
    est, _ = chi_star(panel, 0, 0.9)
    np.testing.assert_allclose(est, 1.0)


def test_rmse_zero_for_identical_simulator():
    panel = simulate_panel(SimulationDesign(uniform_sites(6, 2), np.arange(1, 2001, dtype=float), 2), scenario_a())
    res = rmse_comparison(panel, {"copy": lambda s: panel}, n_sim=3, time_lag=1, q=0.95)
    finite = np.isfinite(res.observed)
    np.testing.assert_allclose(res.per_site["copy"][finite], 0.0)
    assert res.total["copy"] == 0.0
    tab = res.table()
    assert set(tab["model"]) == {"copy"}


def test_rmse_all_undefined_sites_do_not_warn():
    zeros = ExceedancePanel(uniform_sites(6, 2), np.zeros((6, 50)))
    data = simulate_panel(SimulationDesign(uniform_sites(6, 2), np.arange(1, 501, dtype=float), 5), scenario_a())
    with warnings.catch_warnings():
        warnings.simplefilter("error")
        res = rmse_comparison(data, {"flat": lambda s: zeros}, n_sim=2, time_lag=1, q=0.95)
    assert np.all(np.isnan(res.per_site["flat"]))
    assert res.total["flat"] == 0.0


def test_rmse_deterministic_in_seed():
    data = simulate_panel(SimulationDesign(uniform_sites(6, 2), np.arange(1, 801, dtype=float), 5), scenario_a())

    def sim(s):
        return simulate_panel(SimulationDesign(data.sites, data.times, s), scenario_a())

    a = rmse_comparison(data, {"m": sim}, n_sim=3, time_lag=1, q=0.95, seed=9)
    b = rmse_comparison(data, {"m": sim}, n_sim=3, time_lag=1, q=0.95, seed=9)
    assert a.per_site["m"].tobytes() == b.per_site["m"].tobytes()
