import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from gapfill.covariance import (
    ConditioningError,
    binned_indicator,
    correlation,
    correlation_matrix,
    covariance_matrix,
    exponential,
    separable_exp,
    simulate_conditional,
    simulate_unconditional,
)
from gapfill.geometry import planar_points
from gapfill.kriging import Dataset, simple_krige


def pt(x, y, t=0.0):
    return planar_points(np.array([[x, y]]), [t])[0]


class TestCorrelation:
    def test_efolding(self):
        cov = exponential(1.0, 0.2)
        assert correlation(cov, pt(0, 0), pt(0.2, 0)) == pytest.approx(
            math.exp(-1), rel=1e-12
        )

    def test_zero_separation(self):
        cov = exponential(2.0, 0.2)
        assert correlation(cov, pt(0.3, 0.4), pt(0.3, 0.4)) == 1.0

    def test_example4_separation(self):
        cov = exponential(1.0, 0.15)
        r = correlation(cov, pt(0.5, 0.2), pt(0.5, 0.3))
        assert r == pytest.approx(math.exp(-2.0 / 3.0), rel=1e-12)
        assert r == pytest.approx(0.5134, abs=5e-5)

    def test_separable(self):
        cov = separable_exp(1.0, 0.2, 0.5)
        r = correlation(cov, pt(0, 0, 0.0), pt(0.2, 0, 1.0))
        assert r == pytest.approx(math.exp(-1) * math.exp(-2), rel=1e-12)

    def test_binned_indicator_same_bin(self):
        cov = binned_indicator(1.0, 0.2, bin_width=0.1)
        assert correlation(cov, pt(0, 0, 0.01), pt(0.2, 0, 0.09)) == pytest.approx(
            math.exp(-1)
        )

    def test_binned_indicator_cross_bin(self):
        cov = binned_indicator(1.0, 0.2, bin_width=0.1)
        assert correlation(cov, pt(0, 0, 0.09), pt(0.2, 0, 0.11)) == 0.0

    @given(
        st.floats(-5, 5),
        st.floats(-5, 5),
        st.floats(-5, 5),
        st.floats(-5, 5),
    )
    def test_range_and_translation(self, x1, y1, x2, y2):
        cov = exponential(1.0, 0.3)
        r = correlation(cov, pt(x1, y1), pt(x2, y2))
        assert 0.0 <= r <= 1.0
        shifted = correlation(cov, pt(x1 + 2, y1 - 1), pt(x2 + 2, y2 - 1))
        assert r == pytest.approx(shifted, rel=1e-12)


class TestCovarianceMatrix:
    def test_single_point(self):
        cov = exponential(3.0, 0.2)
        m = covariance_matrix(cov, [pt(0.1, 0.1)], [pt(0.1, 0.1)])
        assert m == pytest.approx(np.array([[3.0]]))

    def test_two_points_at_tau(self):
        cov = exponential(1.0, 0.25)
        pts = [pt(0, 0), pt(0.25, 0)]
        m = covariance_matrix(cov, pts, pts)
        e = math.exp(-1)
        assert m == pytest.approx(np.array([[1, e], [e, 1]]), rel=1e-12)

    def test_matches_scalar_loop(self):
        rng = np.random.default_rng(3)
        pts = planar_points(rng.uniform(0, 1, (5, 2)))
        cov = exponential(1.7, 0.3)
        m = covariance_matrix(cov, pts, pts)
        for i in range(5):
            for j in range(5):
                assert m[i, j] == 1.7 * correlation(cov, pts[i], pts[j])

    def test_symmetric_and_near_psd(self):
        rng = np.random.default_rng(5)
        pts = planar_points(rng.uniform(0, 1, (40, 2)))
        cov = exponential(2.0, 0.15)
        m = covariance_matrix(cov, pts, pts)
        assert np.allclose(m, m.T)
        assert np.linalg.eigvalsh(m).min() >= -1e-8 * 2.0

    def test_parameter_validation(self):
        with pytest.raises(ValueError):
            exponential(-1.0, 0.2)
        with pytest.raises(ValueError):
            exponential(1.0, 0.0)
        with pytest.raises(ValueError):
            separable_exp(1.0, 0.2, -0.5)


class TestSimulateUnconditional:
    def test_deterministic(self):
        cov = exponential(1.0, 0.2)
        a = simulate_unconditional(cov, [pt(0.5, 0.5)], seed=42)
        b = simulate_unconditional(cov, [pt(0.5, 0.5)], seed=42)
        assert a.values[0] == b.values[0]
        assert len(a.values) == 1

    def test_single_point_standard_normal(self):
        cov = exponential(1.0, 0.2)
        draws = np.array(
            [
                simulate_unconditional(cov, [pt(0.5, 0.5)], seed=s).values[0]
                for s in range(2000)
            ]
        )
        assert abs(draws.mean()) < 4 / math.sqrt(2000)
        assert abs(draws.var() - 1.0) < 4 * math.sqrt(2.0 / 2000)

    def test_mc_covariance_three_points(self):
        cov = exponential(1.0, 0.3)
        pts = [pt(0.1, 0.1), pt(0.3, 0.5), pt(0.9, 0.2)]
        target = covariance_matrix(cov, pts, pts)
        n = 2000
        draws = np.array(
            [simulate_unconditional(cov, pts, seed=s).values for s in range(n)]
        )
        emp = np.cov(draws.T, bias=False)
        # MC standard error of a covariance entry is ~ sqrt((c_ii c_jj + c_ij^2)/n)
        for i in range(3):
            for j in range(3):
                se = math.sqrt(
                    (target[i, i] * target[j, j] + target[i, j] ** 2) / n
                )
                assert abs(emp[i, j] - target[i, j]) < 3 * se

    def test_perfectly_correlated_limit(self):
        cov = exponential(1.0, 1e9)
        rng = np.random.default_rng(8)
        pts = planar_points(rng.uniform(0, 1e-5, (20, 2)))
        vals = simulate_unconditional(cov, pts, seed=1).values
        assert np.ptp(vals) < 1e-6


class TestSimulateConditional:
    def test_noiseless_interpolation(self):
        cov = exponential(1.0, 0.3)
        rng = np.random.default_rng(11)
        pts = planar_points(rng.uniform(0, 1, (15, 2)))
        z = rng.normal(0, 1, 15)
        sims = simulate_conditional(cov, pts, z, np.zeros(15), pts, n_sims=5, seed=2)
        for s in sims:
            assert np.max(np.abs(s.values - z)) < 1e-8

    def test_mean_matches_kriging(self):
        cov = exponential(1.0, 0.3)
        rng = np.random.default_rng(12)
        data_pts = planar_points(rng.uniform(0, 1, (30, 2)))
        truth = simulate_unconditional(cov, data_pts, seed=100).values
        z = truth + rng.normal(0, 0.5, 30)
        pred_pts = planar_points(rng.uniform(0, 1, (10, 2)))
        n = 500
        sims = simulate_conditional(
            cov, data_pts, z, np.full(30, 0.5), pred_pts, n_sims=n, seed=3
        )
        vals = np.array([s.values for s in sims])
        res = simple_krige(
            Dataset(points=data_pts, z=z, sigma_eps=0.5), cov, pred_pts
        )
        mc_se = vals.std(axis=0, ddof=1) / math.sqrt(n)
        assert np.all(np.abs(vals.mean(axis=0) - res.pred) <= 4 * mc_se)

    def test_variance_matches_kriging(self):
        cov = exponential(1.0, 0.3)
        rng = np.random.default_rng(13)
        data_pts = planar_points(rng.uniform(0, 1, (25, 2)))
        z = rng.normal(0, 1, 25)
        pred_pts = planar_points(np.array([[0.52, 0.48]]))
        n = 2000
        sims = simulate_conditional(
            cov, data_pts, z, np.full(25, 0.7), pred_pts, n_sims=n, seed=4
        )
        vals = np.array([s.values[0] for s in sims])
        res = simple_krige(
            Dataset(points=data_pts, z=z, sigma_eps=0.7), cov, pred_pts
        )
        target = res.se_process[0] ** 2
        # var of a sample variance of normals: 2 sigma^4 / (n - 1)
        mc_se = math.sqrt(2.0 / (n - 1)) * target
        assert abs(vals.var(ddof=1) - target) < 3 * mc_se

    def test_conditional_covariance_matches_analytic(self):
        cov = exponential(1.0, 0.3)
        rng = np.random.default_rng(14)
        data_pts = planar_points(rng.uniform(0, 1, (20, 2)))
        z = rng.normal(0, 1, 20)
        pred_pts = planar_points(np.array([[0.2, 0.8], [0.25, 0.75]]))
        sig = 0.5
        c_dd = covariance_matrix(cov, data_pts, data_pts) + sig**2 * np.eye(20)
        c_dp = covariance_matrix(cov, data_pts, pred_pts)
        c_pp = covariance_matrix(cov, pred_pts, pred_pts)
        target = c_pp - c_dp.T @ np.linalg.solve(c_dd, c_dp)
        n = 4000
        sims = simulate_conditional(
            cov, data_pts, z, np.full(20, sig), pred_pts, n_sims=n, seed=5
        )
        vals = np.array([s.values for s in sims])
        emp = np.cov(vals.T, ddof=1)
        for i in range(2):
            for j in range(2):
                se = math.sqrt(
                    (target[i, i] * target[j, j] + target[i, j] ** 2) / n
                )
                assert abs(emp[i, j] - target[i, j]) < 4 * se
