import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapfill.covariance import exponential, simulate_unconditional
from gapfill.diagnostics import (
    REPORT_COLUMNS,
    bias_adjusted_interval,
    compare_predictors,
    expected_abs_halfnormal,
    normal_quantile,
    quotient_variance_theoretical,
    report_table,
    score,
    second_order_quotient,
    smoothness_stat,
    z_for_level,
)
from gapfill.geometry import planar_points


class TestScore:
    def test_arithmetic(self):
        rep = score([1.5, 1.5], [1.0, 1.0], [1.0, 2.0])
        assert rep.mpe == pytest.approx(0.0)
        assert rep.mape == pytest.approx(0.5)
        assert rep.rmspe == pytest.approx(0.5)

    def test_identity(self):
        rep = score([1.0, 2.0, 3.0], 0.5, [1.0, 2.0, 3.0])
        assert rep.mpe == rep.mape == rep.rmspe == 0.0
        assert rep.coverage == 1.0
        assert rep.slope == pytest.approx(1.0)

    def test_sign_convention_reference_minus_prediction(self):
        rep = score([2.0, 2.0], 1.0, [5.0, 5.0])
        assert rep.mpe == pytest.approx(3.0)

    def test_single_value_rejected_for_r2(self):
        with pytest.raises(ValueError):
            score([2.0], 1.0, [5.0])

    def test_slope_through_origin(self):
        truth = np.array([1.0, 2.0, 4.0])
        pred = 2.0 * truth
        rep = score(pred, 1.0, truth)
        assert rep.slope == pytest.approx(2.0)

    def test_coverage_boundary_closed(self):
        z = z_for_level(0.95)
        rep = score([0.0, 0.0], [1.0, 1.0], [z, 0.0])
        assert rep.coverage == 1.0

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            score([1.0], 1.0, [1.0, 2.0])

    @given(
        st.lists(st.floats(-10, 10), min_size=2, max_size=30),
        st.lists(st.floats(-10, 10), min_size=2, max_size=30),
    )
    @settings(max_examples=100)
    def test_mean_inequalities(self, a, b):
        n = min(len(a), len(b))
        rep = score(a[:n], 1.0, b[:n])
        assert rep.mape <= rep.rmspe + 1e-12
        assert abs(rep.mpe) <= rep.mape + 1e-12


class TestNormalQuantile:
    def test_median(self):
        assert normal_quantile(0.5) == pytest.approx(0.0, abs=1e-12)

    def test_975(self):
        assert normal_quantile(0.975) == pytest.approx(1.959963984540054, abs=1e-9)

    def test_z_for_level(self):
        assert z_for_level(0.90) == pytest.approx(1.6448536269514722, abs=1e-9)


class TestBiasAdjustedInterval:
    def test_shifted_interval(self):
        lo, hi = bias_adjusted_interval(400.0, 0.5, 1.0, level=0.95)
        assert lo == pytest.approx(399.5 - 1.959963984540054, abs=1e-9)
        assert hi == pytest.approx(399.5 + 1.959963984540054, abs=1e-9)
        assert (round(lo, 2), round(hi, 2)) == (397.54, 401.46)

    def test_degenerate_sigma(self):
        lo, hi = bias_adjusted_interval(10.0, 2.0, 0.0)
        assert lo == hi == 8.0

    def test_shift_property_exact(self):
        for v, mu in [(3.7, 0.9), (-2.0, -0.4), (400.0, 1.5)]:
            a = bias_adjusted_interval(v, mu, 1.3, level=0.9)
            b = bias_adjusted_interval(v - mu, 0.0, 1.3, level=0.9)
            assert a == b

    def test_mc_coverage(self):
        rng = np.random.default_rng(77)
        n = 10_000
        bias, sigma = 0.8, 1.5
        truth = rng.normal(0, 2, n)
        z = truth + bias + rng.normal(0, sigma, n)
        hits = 0
        for zi, yi in zip(z, truth):
            lo, hi = bias_adjusted_interval(zi, bias, sigma, level=0.95)
            hits += lo <= yi <= hi
        assert abs(hits / n - 0.95) < 0.01

    def test_invalid_level(self):
        with pytest.raises(ValueError):
            bias_adjusted_interval(0.0, 0.0, 1.0, level=1.5)


class TestComparePredictors:
    def test_independent_errors(self):
        ci = compare_predictors(1.0, 0.5, 0.0, 0.0, 1.0, 1.0, rho=0.0)
        assert ci.sigma_delta**2 == pytest.approx(2.0)

    def test_perfectly_correlated(self):
        ci = compare_predictors(1.0, 1.0, 0.0, 0.0, 1.0, 1.0, rho=1.0)
        assert ci.sigma_delta == pytest.approx(0.0)

    def test_bias_difference(self):
        ci = compare_predictors(4.0, 1.0, 0.7, 0.2, 1.0, 1.0, rho=0.0)
        assert ci.mu_delta == pytest.approx(0.5)

    def test_sigma_delta_bounds_property(self):
        rng = np.random.default_rng(5)
        for _ in range(200):
            s1, s2 = rng.uniform(0.1, 3, 2)
            rho = rng.uniform(-1, 1)
            ci = compare_predictors(0.0, 0.0, 0.0, 0.0, s1, s2, rho=rho)
            assert (s1 - s2) ** 2 - 1e-12 <= ci.sigma_delta**2 <= (s1 + s2) ** 2 + 1e-12

    def test_mc_contains_zero(self):
        rng = np.random.default_rng(99)
        n = 10_000
        hits = 0
        for _ in range(n):
            y = rng.normal(0, 2)
            y1 = y + rng.normal(0, 1.0)
            y2 = y + rng.normal(0, 0.7)
            ci = compare_predictors(y1, y2, 0.0, 0.0, 1.0, 0.7, rho=0.0, level=0.95)
            hits += ci.contains_zero
        assert abs(hits / n - 0.95) < 0.01

    def test_invalid_rho(self):
        with pytest.raises(ValueError):
            compare_predictors(0, 0, 0, 0, 1, 1, rho=1.5)


class TestSecondOrderQuotient:
    def test_linear_annihilated(self):
        h = 0.1
        s = np.array([0.3, 0.4, 0.5])
        y = 2.0 + 3.0 * s
        assert second_order_quotient(y[0], y[1], y[2], h) == pytest.approx(0.0)

    def test_quadratic(self):
        h = 0.05
        s = np.array([0.2, 0.25, 0.3])
        y = s**2
        assert second_order_quotient(y[0], y[1], y[2], h) == pytest.approx(2.0)

    @given(
        st.floats(-5, 5),
        st.floats(-5, 5),
        st.floats(-5, 5),
        st.floats(0.01, 1.0),
    )
    def test_matches_direct_formula(self, y1, y2, y3, h):
        got = second_order_quotient(y1, y2, y3, h)
        assert got == pytest.approx((y1 - 2 * y2 + y3) / h**2, rel=1e-12)


def triple(x1, x2, x3):
    return planar_points(np.array([[x1, 0.0], [x2, 0.0], [x3, 0.0]]))


class TestQuotientVariance:
    def test_perfect_correlation_limit(self):
        cov = exponential(1.0, 1e12)
        p1, p2, p3 = triple(0.0, 0.01, 0.02)
        v = quotient_variance_theoretical(cov, p1, p2, p3, h=0.01)
        assert v == pytest.approx(0.0, abs=1e-4)

    def test_zero_correlation_limit(self):
        cov = exponential(2.0, 1e-12)
        p1, p2, p3 = triple(0.0, 0.5, 1.0)
        v = quotient_variance_theoretical(cov, p1, p2, p3, h=0.5)
        assert v == pytest.approx(6 * 2.0 / 0.5**4, rel=1e-9)

    def test_geometry_violation(self):
        cov = exponential(1.0, 0.15)
        p1, p2, p3 = triple(0.0, 0.3, 0.4)
        with pytest.raises(ValueError):
            quotient_variance_theoretical(cov, p1, p2, p3, h=0.2)

    def test_mc_oracle(self):
        cov = exponential(1.0, 0.15)
        h = 0.01
        pts = planar_points(np.array([[0.5, 0.5], [0.5 + h, 0.5], [0.5 + 2 * h, 0.5]]))
        target = quotient_variance_theoretical(cov, pts[0], pts[1], pts[2], h=h)
        n = 100_000
        rng_draws = np.array(
            [simulate_unconditional(cov, pts, seed=s).values for s in range(500)]
        )
        d = (rng_draws[:, 0] - 2 * rng_draws[:, 1] + rng_draws[:, 2]) / h**2
        est = d.var(ddof=1)
        mc_se = math.sqrt(2.0 / (len(d) - 1)) * target
        assert abs(est - target) < 3 * mc_se


class TestHalfNormal:
    def test_unit(self):
        assert expected_abs_halfnormal(math.pi / 2) == pytest.approx(1.0)

    def test_zero(self):
        assert expected_abs_halfnormal(0.0) == 0.0

    def test_one(self):
        assert expected_abs_halfnormal(1.0) == pytest.approx(math.sqrt(2 / math.pi))


class TestSmoothnessStat:
    def test_constant_field(self):
        f = np.full((10, 10), 3.0)
        assert smoothness_stat(f, h=0.1) == 0.0

    def test_linear_field(self):
        x = np.linspace(0, 1, 20)
        f = np.add.outer(2 * x, 3 * x)
        assert smoothness_stat(f, h=x[1] - x[0]) == pytest.approx(0.0, abs=1e-9)

    def test_too_small_grid(self):
        with pytest.raises(ValueError):
            smoothness_stat(np.ones((2, 5)), h=0.1, axis=0)

    def test_quadratic_field(self):
        x = np.linspace(0, 1, 30)
        f = np.tile(x**2, (30, 1)).T
        h = x[1] - x[0]
        assert smoothness_stat(f, h=h, axis=0) == pytest.approx(2.0, rel=1e-6)


class TestReportTable:
    def test_column_order(self):
        assert REPORT_COLUMNS == (
            "Station",
            "N",
            "MPE",
            "MAPE",
            "RMSPE",
            "R2",
            "Slope",
            "95% Cov.",
        )

    def test_render(self):
        rep = score([1.0, 2.0], 1.0, [1.0, 2.5])
        text = report_table([("Alpha", rep), ("Total", rep)])
        lines = text.strip().split("\n")
        assert lines[0] == ",".join(REPORT_COLUMNS)
        assert lines[1].startswith("Alpha,2,")
        assert len(lines) == 3
