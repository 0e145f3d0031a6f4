import json
import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from _oracles import censored_mass, fd_lp2_partials, mp_lp2
from stexceed.geometry import CylinderKernel, SpaceTimePoint
from stexceed.likelihood import (
    HIERARCHICAL,
    PairScheme,
    ParameterRegionError,
    SingularHessianError,
    clic,
    clic_from_matrices,
    fit,
    godambe,
    independence_loglik,
    log_pair_density,
    pair_contributions,
    pair_density,
    pair_index,
    pairwise_loglik,
    per_time_loglik,
    temporal_blocks,
)
from stexceed.model import ModelParams, lp1, pair_exponents
from stexceed.panel import ExceedancePanel
from stexceed.simulate import SimulationDesign, scenario_a, simulate_panel, uniform_sites

P_A = scenario_a()
ORIGIN = SpaceTimePoint((0.0, 0.0), 0.0)
FAR = SpaceTimePoint((50.0, 0.0), 0.0)
SCHEME = PairScheme(0.5, 4)


@pytest.fixture(scope="module")
def small_panel():
    design = SimulationDesign(uniform_sites(6, 11), np.arange(1, 81, dtype=float), 11)
    return simulate_panel(design, P_A)


def brute_force_loglik(panel, scheme, p):
    """Direct quadruple loop with the scalar density."""
    y = panel.values
    obs = panel.observed
    S, T = y.shape
    total = 0.0
    for k in range(scheme.max_lag + 1):
        for i in range(S):
            for j in range(S):
                if k == 0 and i >= j:
                    continue
                if np.hypot(*(panel.sites[i] - panel.sites[j])) > scheme.max_distance:
                    continue
                for t in range(T - k):
                    if not (obs[i, t] and obs[j, t + k]):
                        continue
                    x1 = SpaceTimePoint(panel.sites[i], panel.times[t])
                    x2 = SpaceTimePoint(panel.sites[j], panel.times[t + k])
                    total += math.log(pair_density(y[i, t], y[j, t + k], x1, x2, p))
    return total


# ---------------------------------------------------------------------------
# bivariate density
# ---------------------------------------------------------------------------


def test_censored_corner_values():
    assert pair_density(0.0, 0.0, ORIGIN, FAR, P_A) == pytest.approx(0.81, abs=1e-14)
    assert pair_density(0.0, 0.0, ORIGIN, ORIGIN, P_A) == pytest.approx(1 - 0.2 + 1 / 19, abs=1e-14)
    assert pair_density(0.0, 0.0, ORIGIN, ORIGIN, P_A) == pytest.approx(0.85263, abs=1e-5)


def test_mixed_term_against_laplace_derivatives():
    # Pr(Y1 in dy, Y2 = 0) = d/dv [LP2(v, k) - LP1(v)] with v = k + y on the identity margins
    x2 = SpaceTimePoint((0.15, 0.05), 3.0)
    e = pair_exponents(ORIGIN, x2, P_A)
    for y in (0.01, 1.0, 30.0, 4000.0):
        v = 9.0 + y
        h = 1e-6 * (1 + v)
        d_lp2 = (mp_lp2(v + h, 9.0, e.c0, e.c2, 1.0) - mp_lp2(v - h, 9.0, e.c0, e.c2, 1.0)) / (2 * h)
        d_lp1 = -1.0 / (v + 1.0) ** 2
        ref = float(d_lp2) - d_lp1
        assert pair_density(y, 0.0, ORIGIN, x2, P_A) == pytest.approx(ref, rel=1e-8)


def test_joint_term_against_mixed_partial():
    x2 = SpaceTimePoint((0.1, 0.0), 1.0)
    e = pair_exponents(ORIGIN, x2, P_A)
    for y1, y2 in ((0.5, 0.5), (3.0, 70.0), (500.0, 1.0)):
        ref = fd_lp2_partials(9.0 + y1, 9.0 + y2, e.c0, e.c2, 1.0)[2]
        assert pair_density(y1, y2, ORIGIN, x2, P_A) == pytest.approx(ref, rel=1e-8)


def test_density_factorizes_without_overlap():
    def marginal(y):
        return 0.9 if y == 0 else 1.0 / (1 + 9 + y) ** 2

    for y1, y2 in ((0.0, 2.0), (5.0, 0.0), (1.5, 40.0)):
        got = pair_density(y1, y2, ORIGIN, FAR, P_A)
        assert got == pytest.approx(marginal(y1) * marginal(y2), rel=1e-10)


@given(st.floats(0, 1e3), st.floats(0, 1e3), st.floats(-0.3, 0.3), st.floats(-0.3, 0.3), st.floats(-12, 12))
def test_density_symmetry(y1, y2, dx, dy, dt):
    x2 = SpaceTimePoint((dx, dy), dt)
    p = ModelParams(CylinderKernel(0.2, 0.3, 0.8, 5.0, (0.05, 0.1)), gp_scale=4.0, gp_shape=0.3)
    a = pair_density(y1, y2, ORIGIN, x2, p)
    b = pair_density(y2, y1, x2, ORIGIN, p)
    assert a > 0
    assert a == pytest.approx(b, rel=1e-12)


@pytest.mark.parametrize("c2", [0.0, 0.2, 0.6, 0.95])
def test_density_total_mass(c2):
    p = ModelParams(P_A.kernel, censoring_rate=4.0, gp_scale=2.0, gp_shape=0.2)

    def dens(y1, y2):
        return float(np.exp(log_pair_density(y1, y2, c2, p)))

    total = sum(censored_mass(dens))
    assert total == pytest.approx(1.0, abs=1e-4)


def test_non_finite_density_signals_region_error():
    with pytest.raises(ParameterRegionError):
        log_pair_density(1.0, 0.0, float("nan"), P_A)


def test_negative_excess_rejected():
    with pytest.raises(ValueError):
        log_pair_density(-1.0, 0.0, 0.2, P_A)


# ---------------------------------------------------------------------------
# pair set and likelihood
# ---------------------------------------------------------------------------


def test_single_site_keeps_one_lag_one_pair():
    panel = ExceedancePanel([[0.0, 0.0]], [[0.0, 2.5]])
    scheme = PairScheme(1.0, 1)
    assert pair_index(panel, scheme).n_pairs == 1
    x1, x2 = SpaceTimePoint((0, 0), 1.0), SpaceTimePoint((0, 0), 2.0)
    expected = math.log(pair_density(0.0, 2.5, x1, x2, P_A))
    assert pairwise_loglik(panel, scheme, P_A) == pytest.approx(expected, rel=1e-14)


def test_all_censored_disjoint_closed_form():
    sites = np.array([[0, 0], [0.3, 0], [0, 0.3], [0.3, 0.3]])
    panel = ExceedancePanel(sites, np.zeros((4, 30)))
    p = ModelParams(CylinderKernel(1e-3, 1e-3, 0.0, 1.0))
    scheme = PairScheme(0.5, 3)
    n_pairs = pair_index(panel, scheme).n_pairs
    # 6 contemporaneous pairs per time plus 16 ordered pairs per positive lag
    assert n_pairs == 6 * 30 + 16 * (29 + 28 + 27)
    p1 = float(lp1(9.0, p))
    expected = n_pairs * math.log(1 - 2 * p1 + p1 * p1)
    assert pairwise_loglik(panel, scheme, p) == pytest.approx(expected, rel=1e-13)


def test_matches_brute_force(small_panel):
    p = ModelParams(CylinderKernel(0.25, 0.15, 0.4, 3.0, (0.02, -0.03)), gp_scale=8.0, gp_shape=0.8)
    fast = pairwise_loglik(small_panel, SCHEME, p)
    slow = brute_force_loglik(small_panel, SCHEME, p)
    assert fast == pytest.approx(slow, rel=1e-11)


def test_pair_contributions_sum(small_panel):
    c = pair_contributions(small_panel, SCHEME, P_A)
    assert c["logf"].size == pair_index(small_panel, SCHEME).n_pairs
    assert np.sum(c["logf"]) == pytest.approx(pairwise_loglik(small_panel, SCHEME, P_A), rel=1e-12)
    per_t = per_time_loglik(small_panel, SCHEME, P_A)
    assert per_t.sum() == pytest.approx(pairwise_loglik(small_panel, SCHEME, P_A), rel=1e-12)
    np.testing.assert_allclose(per_t, np.bincount(c["t"], c["logf"], minlength=small_panel.n_times), rtol=1e-10, atol=1e-10)


def test_missing_values_drop_only_their_pairs(small_panel, rng):
    full = pair_contributions(small_panel, SCHEME, P_A)
    missing = rng.uniform(size=small_panel.values.shape) < 0.1
    holed = small_panel.with_values(small_panel.values, missing)
    kept = ~(missing[full["i"], full["t"]] | missing[full["j"], full["t"] + full["k"]])
    sub = pair_contributions(holed, SCHEME, P_A)
    np.testing.assert_array_equal(np.sort(sub["logf"]), np.sort(full["logf"][kept]))
    assert pairwise_loglik(holed, SCHEME, P_A) == pytest.approx(full["logf"][kept].sum(), rel=1e-12)


def test_site_relabelling_invariance(small_panel, rng):
    perm = rng.permutation(small_panel.n_sites)
    shuffled = ExceedancePanel(small_panel.sites[perm], small_panel.values[perm])
    a = pairwise_loglik(small_panel, SCHEME, P_A)
    b = pairwise_loglik(shuffled, SCHEME, P_A)
    assert abs(a - b) <= 1e-12 * abs(a)


def test_thread_count_is_bit_invariant():
    design = SimulationDesign(uniform_sites(8, 3), np.arange(1, 1201, dtype=float), 3)
    panel = simulate_panel(design, P_A)
    values = [pairwise_loglik(panel, PairScheme(0.6, 6), P_A, n_threads=n) for n in (1, 2, 3, 8)]
    assert len({v.hex() for v in values}) == 1


def test_no_pairs_is_an_error():
    panel = ExceedancePanel([[0.0, 0.0], [5.0, 5.0]], np.zeros((2, 1)))
    with pytest.raises(ValueError):
        pairwise_loglik(panel, PairScheme(1.0, 3), P_A)


@pytest.mark.parametrize("args", [(-1.0, 2), (1.0, -1), (float("nan"), 1)])
def test_invalid_scheme(args):
    with pytest.raises(ValueError):
        PairScheme(*args)


def test_independence_loglik_identity_margins(small_panel):
    y = small_panel.values
    expected = np.sum(np.where(y > 0, -2 * np.log1p(9 + y), math.log(0.9)))
    assert independence_loglik(small_panel, P_A) == pytest.approx(expected, rel=1e-12)


# ---------------------------------------------------------------------------
# fitting, Godambe information and CLIC
# ---------------------------------------------------------------------------


@pytest.fixture(scope="module")
def scenario_panel():
    design = SimulationDesign(uniform_sites(12, 5), np.arange(1, 601, dtype=float), 5)
    return simulate_panel(design, P_A)


@pytest.fixture(scope="module")
def scenario_fit(scenario_panel):
    return fit(scenario_panel, PairScheme(0.6, 8), P_A, free=("semi_axis1", "semi_axis2", "duration"),
               compute_se=True, maxfev=600)


def test_fit_from_truth_stays_close(scenario_fit):
    est = scenario_fit.estimates
    assert est["semi_axis1"] == pytest.approx(0.2, rel=0.3)
    assert est["semi_axis2"] == pytest.approx(0.2, rel=0.3)
    assert est["duration"] == pytest.approx(10.0, rel=0.3)
    assert scenario_fit.trace[-1, 0] <= scenario_fit.pl_value + 1e-9


def test_refit_is_stationary(scenario_panel, scenario_fit):
    again = fit(scenario_panel, PairScheme(0.6, 8), scenario_fit.params, free=scenario_fit.free, maxfev=300)
    rel = abs(again.pl_value - scenario_fit.pl_value) / abs(scenario_fit.pl_value)
    assert rel < 1e-6
    assert again.pl_value >= scenario_fit.pl_value - 1e-9


def test_nested_fit_dominates(scenario_panel, scenario_fit):
    restricted = fit(scenario_panel, PairScheme(0.6, 8), P_A, free=("duration",), maxfev=200)
    assert scenario_fit.pl_value >= restricted.pl_value - 1e-6


def test_godambe_matrices(scenario_fit):
    H, J = scenario_fit.hessian, scenario_fit.variability
    np.testing.assert_array_equal(H, H.T)
    assert np.all(np.linalg.eigvalsh(H) > 0)
    assert np.all(np.linalg.eigvalsh(J) > -1e-9 * np.abs(J).max())
    assert set(scenario_fit.std_errors) == set(scenario_fit.free)
    assert all(s > 0 for s in scenario_fit.std_errors.values())
    c, c_star = clic(scenario_fit)
    assert c == scenario_fit.clic
    assert c_star == pytest.approx(scenario_fit.clic_constant * c, rel=1e-15)
    assert 0 < scenario_fit.clic_constant < 1


def test_single_block_is_full_score_outer_product(scenario_panel, scenario_fit):
    T = scenario_panel.n_times
    g = godambe(scenario_panel, PairScheme(0.6, 8), scenario_fit, n_blocks=1, block_length=T)
    np.testing.assert_allclose(g.variability, np.outer(g.score, g.score) , rtol=1e-10, atol=1e-12)


def test_clic_penalty_is_dimension_when_j_equals_h(rng):
    for dim in (1, 3, 6):
        A = rng.normal(size=(dim, dim))
        H = A @ A.T + dim * np.eye(dim)
        value, _ = clic_from_matrices(-100.0, H, H)
        assert value == pytest.approx(100.0 + dim, rel=1e-12)


def test_hessian_stable_on_duration_kink():
    # the duration equals a pair time lag: the log-likelihood has a kink there
    panel = simulate_panel(SimulationDesign(uniform_sites(10, 4), np.arange(1, 401, dtype=float), 4), P_A)
    scheme = PairScheme(0.6, 12)
    free = ("semi_axis1", "duration")
    on = [godambe(panel, scheme, P_A, free=free, rel_step=s) for s in (1e-4, 1e-5)]
    assert on[0].kink_adjusted == ("duration",)
    assert on[1].hessian[1, 1] == pytest.approx(on[0].hessian[1, 1], rel=0.02)
    off = godambe(panel, scheme, P_A.with_kernel(duration=10.5), free=free)
    assert off.kink_adjusted == ()
    # past the largest lag there is no kink
    assert godambe(panel, PairScheme(0.6, 5), P_A, free=free).kink_adjusted == ()


def test_singular_hessian_raises():
    with pytest.raises(SingularHessianError):
        clic_from_matrices(0.0, np.zeros((2, 2)), np.eye(2))


@given(st.integers(20, 3000), st.integers(1, 600), st.integers(1, 20))
def test_blocks_cover_series(T, B, d):
    if d > T:
        return
    starts = temporal_blocks(T, B, d)
    assert starts.size == B
    assert starts[0] == 0
    assert np.all(starts >= 0) and np.all(starts + d <= T)
    assert np.all(np.diff(starts) >= 0)
    if B > 1 and (T - d) >= B - 1:
        assert starts[-1] + d >= T - math.ceil((T - d) / (B - 1))


def test_fit_result_json(scenario_fit):
    doc = json.loads(scenario_fit.to_json())
    assert doc["schema"] == "stexceed.fit/1"
    assert doc["estimates"] == pytest.approx(scenario_fit.estimates)
    assert np.allclose(doc["hessian"], scenario_fit.hessian)


def test_unknown_free_parameter(scenario_panel):
    with pytest.raises(ValueError):
        fit(scenario_panel, SCHEME, P_A, free=("bogus",))


@settings(max_examples=10)
@given(st.integers(0, 2**31 - 1))
def test_pair_count_matches_definition(seed):
    rng = np.random.default_rng(seed)
    S, T = int(rng.integers(1, 6)), int(rng.integers(2, 15))
    sites = rng.uniform(size=(S, 2))
    missing = rng.uniform(size=(S, T)) < 0.2
    panel = ExceedancePanel(sites, np.zeros((S, T)), missing)
    scheme = PairScheme(float(rng.uniform(0.1, 1.5)), int(rng.integers(0, 5)))
    expected = 0
    for k in range(min(scheme.max_lag, T - 1) + 1):
        for i in range(S):
            for j in range(S):
                if (k == 0 and i >= j) or np.hypot(*(sites[i] - sites[j])) > scheme.max_distance:
                    continue
                expected += int(np.sum(~missing[i, : T - k] & ~missing[j, k:]))
    assert pair_index(panel, scheme).n_pairs == expected
