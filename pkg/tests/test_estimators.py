import math
import statistics as pystats

import numpy as np
import pytest
from hypothesis import assume, given, settings, strategies as st

from auxchart.errors import DegenerateSubgroupError, EstimatorDomainError
from auxchart.estimators import (
    ALL_KINDS,
    EstimatorKind,
    EstimatorWeights,
    SubgroupStats,
    WeightSource,
    alpha_opt,
    evaluate,
    exact_mse,
    first_order_normal_equations,
    moments_from_pairs,
    mse_gains,
    statistic,
    subgroup_stats,
    t0,
    t1,
    t2,
    t3,
    theoretical_mse,
    weights_for,
    weights_report,
)
from auxchart.process import IN_CONTROL, ProcessParameters, RngStream, Subgroup, draw_pairs

FIXTURE = Subgroup(((4.2, 4.0), (5.1, 4.9), (5.9, 5.6), (4.8, 4.4), (5.5, 5.3)))

valid_params = st.builds(
    ProcessParameters,
    mu_y=st.floats(1.0, 50.0),
    mu_x=st.floats(1.0, 50.0),
    sigma_y=st.floats(0.05, 5.0),
    sigma_x=st.floats(0.05, 5.0),
    rho_xy=st.floats(-0.99, 0.99),
)


def weights(alpha=0.5, w1=0.0, w2=0.0, alpha_t3=None):
    return EstimatorWeights(alpha, w1, w2, WeightSource.QUADRATIC, alpha if alpha_t3 is None else alpha_t3)


# ---------------------------------------------------------------- sample moments


def test_constant_subgroup():
    s = subgroup_stats(Subgroup(((1.0, 1.0), (1.0, 1.0))))
    assert (s.y_bar, s.x_bar, s.s_y, s.s_x) == (1.0, 1.0, 0.0, 0.0)
    assert not s.r_defined
    with pytest.raises(DegenerateSubgroupError):
        s.slope


def test_two_collinear_points():
    s = subgroup_stats(Subgroup(((1.0, 2.0), (3.0, 4.0))))
    assert s.y_bar == 2.0 and s.x_bar == 3.0
    assert s.s_y == pytest.approx(math.sqrt(2)) and s.s_x == pytest.approx(math.sqrt(2))
    assert s.r_xy == pytest.approx(1.0)


def test_fixture_matches_stdlib():
    y = [p[0] for p in FIXTURE]
    x = [p[1] for p in FIXTURE]
    s = subgroup_stats(FIXTURE)
    assert s.y_bar == pytest.approx(pystats.fmean(y), abs=1e-15)
    assert s.x_bar == pytest.approx(pystats.fmean(x), abs=1e-15)
    assert s.s_y == pytest.approx(pystats.stdev(y), rel=1e-14)
    assert s.s_x == pytest.approx(pystats.stdev(x), rel=1e-14)
    assert s.r_xy == pytest.approx(pystats.correlation(x, y), rel=1e-14)
    assert s.slope == pytest.approx(pystats.linear_regression(x, y).slope, rel=1e-12)


def test_constant_y_gives_zero_slope():
    s = subgroup_stats(Subgroup(((2.0, 1.0), (2.0, 3.0), (2.0, 4.0))))
    assert s.slope == 0.0


def test_vectorised_moments_match_scalar():
    y, x = draw_pairs(ProcessParameters(5, 5, 1, 1, 0.5), 6, IN_CONTROL, RngStream(0).generator, 50)
    yb, xb, b, bad = moments_from_pairs(y, x)
    assert not bad.any()
    for i in range(50):
        s = subgroup_stats(Subgroup.from_arrays(y[i], x[i]))
        assert yb[i] == pytest.approx(s.y_bar)
        assert b[i] == pytest.approx(s.slope)


def test_vectorised_moments_flag_degenerate_rows():
    y = np.array([[1.0, 2.0, 3.0], [1.0, 2.0, 4.0]])
    x = np.array([[2.0, 2.0, 2.0], [1.0, 2.0, 3.0]])
    _, _, b, bad = moments_from_pairs(y, x)
    assert bad.tolist() == [True, False]
    assert math.isnan(b[0]) and b[1] == pytest.approx(1.5)


# ---------------------------------------------------------------- statistics


def test_t0_is_the_mean():
    s = SubgroupStats(4.623, 4.1, 1.0, 1.0, 0.5)
    assert t0(s) == 4.623
    assert t0(SubgroupStats(0.0, 9.0, 1.0, 1.0, 0.5)) == 0.0


def test_t1_arithmetic(params):
    s = SubgroupStats(y_bar=5.0, x_bar=4.5, s_y=1.0, s_x=0.8, r_xy=0.9)
    assert t1(s, params) == pytest.approx(5.5625, abs=1e-12)


def test_t1_reduces_to_mean(params):
    assert t1(SubgroupStats(5.3, 4.0, 1.0, 1.0, 0.0), params) == 5.3
    assert t1(SubgroupStats(5.3, 5.0, 1.0, 1.0, 0.7), params) == 5.3


def test_t1_degenerate(params):
    with pytest.raises(DegenerateSubgroupError):
        t1(SubgroupStats(5.0, 5.0, 1.0, 0.0, math.nan), params)


def test_t2_direct_evaluation(params):
    s = SubgroupStats(5.0, 4.0, 1.0, 1.0, 0.5)
    expected = 5 * (0.95 * math.exp(1 / 9) + 0.05 * math.exp(-1 / 9))
    assert t2(s, params, weights(0.95)) == pytest.approx(expected, rel=1e-14)


@pytest.mark.parametrize("alpha", [0.0, 0.3, 1.45])
def test_t2_at_population_mean(params, alpha):
    s = SubgroupStats(4.7, 5.0, 1.0, 1.0, 0.2)
    assert t2(s, params, weights(alpha)) == pytest.approx(4.7, rel=1e-15)


def test_t3_reduces_to_t2(params):
    s = SubgroupStats(4.7, 5.0, 1.0, 1.0, 0.2)
    assert t3(s, params, weights(0.8)) == pytest.approx(4.7)
    assert t3(s, params, weights(0.8, w1=0.4)) == pytest.approx(t2(s, params, weights(0.8)))


def test_t3_single_expression(params):
    w = weights_for(params, 5, WeightSource.QUADRATIC)
    s = subgroup_stats(FIXTURE)
    y, x, X = s.y_bar, s.x_bar, params.mu_x
    e = math.exp((X - x) / (X + x))
    expected = (y * (w.alpha * e + (1 - w.alpha) * math.exp((x - X) / (x + X))) + w.w1 * (X - x) + w.w2 * y) * e
    assert t3(s, params, w) == pytest.approx(expected, rel=1e-13)


def test_ratio_domain_error(params):
    s = SubgroupStats(5.0, -5.0, 1.0, 1.0, 0.2)
    with pytest.raises(EstimatorDomainError):
        t2(s, params, weights())
    with pytest.raises(EstimatorDomainError):
        t3(s, params, weights())


def test_statistic_dispatch(params):
    s = subgroup_stats(FIXTURE)
    w = weights_for(params, 5)
    assert statistic("T0", s, params) == t0(s)
    assert statistic(EstimatorKind.T1, s, params) == t1(s, params)
    assert statistic("T2", s, params, w) == t2(s, params, w)
    assert statistic("T3", s, params, w) == t3(s, params, w)
    with pytest.raises(ValueError):
        statistic("T2", s, params)


def test_evaluate_matches_scalar(params):
    w = weights_for(params, 5)
    s = subgroup_stats(FIXTURE)
    for kind in ALL_KINDS:
        v = evaluate(kind, np.array([s.y_bar]), np.array([s.x_bar]), np.array([s.slope]), params, w)
        assert v[0] == pytest.approx(statistic(kind, s, params, w), rel=1e-14)


@settings(max_examples=50, deadline=None)
@given(c=st.floats(-100, 100), seed=st.integers(0, 10_000))
def test_t1_location_shift(c, seed):
    params = ProcessParameters(5.0, 5.0, 1.0, 1.0, 0.9)
    g = sample_subgroup_fixture(seed)
    shifted = Subgroup.from_arrays(g.y + c, g.x)
    assert t1(subgroup_stats(shifted), params) == pytest.approx(t1(subgroup_stats(g), params) + c, abs=1e-9)


@settings(max_examples=50, deadline=None)
@given(seed=st.integers(0, 10_000), scale=st.floats(0.1, 10))
def test_t0_ignores_x(seed, scale):
    g = sample_subgroup_fixture(seed)
    other = Subgroup.from_arrays(g.y, g.x * scale + 1.0)
    assert t0(subgroup_stats(other)) == t0(subgroup_stats(g))


def sample_subgroup_fixture(seed):
    y, x = draw_pairs(ProcessParameters(5, 5, 1, 1, 0.6), 5, IN_CONTROL, RngStream(seed).generator, 1)
    return Subgroup.from_arrays(y[0], x[0])


# ---------------------------------------------------------------- weights


def test_alpha_half_when_uncorrelated(independent_params):
    assert alpha_opt(independent_params) == 0.5
    assert weights_for(independent_params, 5, WeightSource.PRINTED).alpha == 0.5


def test_printed_weights_literal(params):
    """Independent transcription of the printed closed forms."""
    lam, Cy, Cx, r, X, Y = 1 / 5, 0.2, 0.2, 0.9, 5.0, 5.0
    den = 4 * X * Cx * (-1 + lam * (-1 + r**2) * Cy**2)
    w1 = Y * (-4 * r * Cy + Cx * (2 - lam * Cx**2 + lam * r * Cy * Cx + 2 * lam * (-1 + r**2)) * Cy**2) / den
    w2 = lam * (Cx**2 - 4 * (-1 + r**2) * Cy**2) / den
    w = weights_for(params, 5, WeightSource.PRINTED)
    assert w.alpha == pytest.approx(0.5 + 0.9)
    assert w.w1 == pytest.approx(w1, rel=1e-14)
    assert w.w2 == pytest.approx(w2, rel=1e-14)
    assert w.alpha_t3 == w.alpha


def _first_order_mse(params, n, alpha, w):
    m, rhs = first_order_normal_equations(params, n, alpha)
    w = np.asarray(w)
    return w @ m @ w - 2 * rhs @ w


@pytest.mark.parametrize("rho", [-0.6, 0.0, 0.3, 0.9])
def test_quadratic_minimizer_is_stationary(rho):
    p = ProcessParameters(5.0, 4.0, 1.0, 0.8, rho)
    w = weights_for(p, 5, WeightSource.QUADRATIC)
    best = _first_order_mse(p, 5, w.alpha, (w.w1, w.w2))
    for d1, d2 in [(1e-3, 0), (-1e-3, 0), (0, 1e-3), (0, -1e-3), (1e-3, 1e-3)]:
        assert _first_order_mse(p, 5, w.alpha, (w.w1 + d1, w.w2 + d2)) >= best


@pytest.mark.parametrize("n", [5, 15])
def test_exact_minimizer_is_locally_optimal(params, n):
    w = weights_for(params, n, WeightSource.EXACT)
    best = exact_mse(EstimatorKind.T3, params, n, w)
    for field, eps in [("w1", 0.02), ("w2", 0.002), ("alpha_t3", 0.02)]:
        for sign in (1, -1):
            moved = EstimatorWeights(**{**w.__dict__, field: getattr(w, field) + sign * eps})
            assert exact_mse(EstimatorKind.T3, params, n, moved) > best


def test_exact_minimizer_beats_perturbations_empirically(params):
    y, x = draw_pairs(params, 5, IN_CONTROL, RngStream(12).generator, 100_000)
    yb, xb, _, _ = moments_from_pairs(y, x)
    w = weights_for(params, 5, WeightSource.EXACT)

    def mse(wt):
        return float(np.mean((evaluate("T3", yb, xb, None, params, wt) - 5.0) ** 2))

    best = mse(w)
    for eps in (0.1, -0.1):
        assert mse(EstimatorWeights(w.alpha, w.w1 + eps, w.w2, w.source, w.alpha_t3)) > best
        assert mse(EstimatorWeights(w.alpha, w.w1, w.w2 + eps / 10, w.source, w.alpha_t3)) > best


def test_weight_sources_compared(params):
    report = weights_report(params, 5)
    by_source = {row["source"]: row for row in report["sources"]}
    assert set(by_source) == {s.value for s in WeightSource}
    # the closed-form weights are far off; the exact optimum beats T2
    assert by_source["printed-formula"]["exact_mse_t3"] > 10 * report["exact_mse_t2"]
    assert by_source["exact-minimizer"]["exact_mse_t3"] < report["exact_mse_t2"]


def test_exact_mse_quadrature_against_monte_carlo(params):
    w = weights_for(params, 5)
    y, x = draw_pairs(params, 5, IN_CONTROL, RngStream(13).generator, 200_000)
    yb, xb, b, _ = moments_from_pairs(y, x)
    for kind in ALL_KINDS:
        err = evaluate(kind, yb, xb, b, params, w) - 5.0
        mc = float(np.mean(err**2))
        se = float(np.std(err**2) / math.sqrt(err.size))
        assert abs(mc - exact_mse(kind, params, 5, w)) < 4 * se


# ---------------------------------------------------------------- MSE


def test_eq11_value():
    p = ProcessParameters(5.0, 5.0, 1.0, 1.0, 0.9)
    assert theoretical_mse("T2", p, 5) == pytest.approx(0.2 * 25 * 0.19 * 0.04)
    assert theoretical_mse("T0", p, 5) == pytest.approx(0.2)


def test_uncorrelated_mse_equal(independent_params):
    vals = [theoretical_mse(k, independent_params, 7) for k in ("T0", "T1", "T2")]
    assert vals[0] == pytest.approx(vals[1]) == pytest.approx(vals[2])


@settings(max_examples=200, deadline=None)
@given(p=valid_params, n=st.integers(2, 50))
def test_mse_ordering(p, n):
    t2_mse = theoretical_mse("T2", p, n)
    assert theoretical_mse("T1", p, n) == t2_mse
    assert theoretical_mse("T3", p, n) <= t2_mse * (1 + 1e-12)
    assert theoretical_mse("T2", p, n) <= theoretical_mse("T0", p, n) * (1 + 1e-12)


@settings(max_examples=100, deadline=None)
@given(p=valid_params, n=st.integers(2, 50))
def test_mse_gains_are_nonnegative(p, n):
    a, b = mse_gains(p, n)
    assert a >= 0 and b >= 0


@settings(max_examples=50, deadline=None)
@given(p=valid_params, n=st.integers(2, 30))
def test_quadratic_weights_finite(p, n):
    assume(abs(p.rho_xy) < 0.98)
    w = weights_for(p, n, WeightSource.QUADRATIC)
    assert math.isfinite(w.w1) and math.isfinite(w.w2)


def test_t1_exact_mse_inflation(params):
    assert exact_mse("T1", params, 15) == pytest.approx(theoretical_mse("T1", params, 15) * 13 / 12)
    assert exact_mse("T1", params, 3) == math.inf
