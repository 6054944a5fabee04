"""Scoring and uncertainty-validation machinery.

Covers the standard prediction-error summaries (MPE / MAPE / RMSPE / R-squared
/ through-origin slope), empirical coverage, bias-aware prediction intervals,
interval-based comparison of two predictors, and the second-order
difference-quotient smoothness calculus.
"""

from __future__ import annotations

import io
from dataclasses import dataclass

import numpy as np
from scipy.special import ndtri


@dataclass(frozen=True)
class DiagnosticsReport:
    n: int
    mpe: float
    mape: float
    rmspe: float
    r2: float
    slope: float
    coverage: float
    nominal_level: float


@dataclass(frozen=True)
class ComparisonInterval:
    delta: float
    mu_delta: float
    sigma_delta: float
    level: float
    lower: float
    upper: float
    contains_zero: bool


def normal_quantile(p: float) -> float:
    """Standard-normal quantile (scipy's ndtri; well below 1e-9 abs error)."""
    return float(ndtri(p))


def z_for_level(level: float) -> float:
    """Two-sided equal-tail multiplier for the given interval level."""
    if not 0.0 < level < 1.0:
        raise ValueError("level must lie strictly in (0, 1)")
    return normal_quantile(0.5 + level / 2.0)


def score(pred, se, truth, nominal_level: float = 0.95) -> DiagnosticsReport:
    """Prediction-error summaries against a reference, plus empirical coverage.

    Errors follow the reference-minus-prediction sign convention.  The slope
    is the through-origin regression of prediction on reference, R-squared is
    the squared Pearson correlation, and coverage counts closed-interval
    membership of |truth - pred| <= z * se.
    """
    pred = np.asarray(pred, dtype=float)
    truth = np.asarray(truth, dtype=float)
    se = np.broadcast_to(np.asarray(se, dtype=float), pred.shape)
    if pred.shape != truth.shape:
        raise ValueError("pred and truth must have equal length")
    n = len(pred)
    if n < 1:
        raise ValueError("need at least one value")
    err = truth - pred
    mpe = float(np.mean(err))
    mape = float(np.mean(np.abs(err)))
    rmspe = float(np.sqrt(np.mean(err**2)))
    denom = float(np.sum(truth**2))
    slope = float(np.sum(pred * truth) / denom) if denom > 0 else float("nan")
    if n >= 2:
        sd_p = np.std(pred)
        sd_t = np.std(truth)
        if sd_p > 0 and sd_t > 0:
            r2 = float(np.corrcoef(pred, truth)[0, 1] ** 2)
        else:
            r2 = float("nan")
    else:
        raise ValueError("R-squared needs at least two values")
    z = z_for_level(nominal_level)
    coverage = float(np.mean(np.abs(err) <= z * se))
    return DiagnosticsReport(n, mpe, mape, rmspe, r2, slope, coverage, nominal_level)


def bias_adjusted_interval(value: float, mu_eps: float, sigma: float, level: float = 0.95):
    """Prediction interval for the true field: (v - mu - z*sigma, v - mu + z*sigma).

    The bias mu_eps must be supplied explicitly so the correction cannot be
    silently skipped.
    """
    if sigma < 0:
        raise ValueError("sigma must be >= 0")
    z = z_for_level(level)
    centre = value - mu_eps
    return (centre - z * sigma, centre + z * sigma)


def compare_predictors(
    y1: float,
    y2: float,
    mu_eps1: float,
    mu_eps2: float,
    sigma_k1: float,
    sigma_k2: float,
    rho: float = 0.0,
    level: float = 0.95,
) -> ComparisonInterval:
    """Interval for the difference of two predictors of the same field value.

    mu_delta = mu_eps1 - mu_eps2 and sigma_delta^2 = s1^2 + s2^2 - 2 rho s1 s2;
    rho = 0 is the case of a kriging product compared against an independent
    reference measurement.
    """
    if sigma_k1 < 0 or sigma_k2 < 0:
        raise ValueError("prediction-error SDs must be >= 0")
    if not -1.0 <= rho <= 1.0:
        raise ValueError("rho must lie in [-1, 1]")
    z = z_for_level(level)
    delta = y1 - y2
    mu_delta = mu_eps1 - mu_eps2
    var_delta = sigma_k1**2 + sigma_k2**2 - 2.0 * rho * sigma_k1 * sigma_k2
    sigma_delta = float(np.sqrt(max(var_delta, 0.0)))
    lower = delta - mu_delta - z * sigma_delta
    upper = delta - mu_delta + z * sigma_delta
    return ComparisonInterval(
        delta, mu_delta, sigma_delta, level, lower, upper, lower <= 0.0 <= upper
    )


def second_order_quotient(y1: float, y2: float, y3: float, h: float) -> float:
    """Finite-difference curvature (y1 - 2*y2 + y3) / h^2 at the midpoint."""
    if h <= 0:
        raise ValueError("h must be > 0")
    return (y1 - 2.0 * y2 + y3) / h**2


def quotient_variance_theoretical(cov, s1, s2, s3, h: float) -> float:
    """Variance of the second-order quotient of a mean-zero Gaussian field:
    (sigma2/h^4) * (6 - 4 R(s1,s2) - 4 R(s2,s3) + 2 R(s1,s3)).

    s2 must sit midway between s1 and s3 at spacing h.
    """
    from .covariance import correlation
    from .geometry import distance

    if h <= 0:
        raise ValueError("h must be > 0")
    d12 = distance(s1.loc, s2.loc)
    d23 = distance(s2.loc, s3.loc)
    if not (np.isclose(d12, h, rtol=1e-6) and np.isclose(d23, h, rtol=1e-6)):
        raise ValueError("s2 must be midway between s1 and s3 at spacing h")
    r12 = correlation(cov, s1, s2)
    r23 = correlation(cov, s2, s3)
    r13 = correlation(cov, s1, s3)
    return (cov.sigma2 / h**4) * (6.0 - 4.0 * r12 - 4.0 * r23 + 2.0 * r13)


def expected_abs_halfnormal(sigma2: float) -> float:
    """E|X| for X ~ N(0, sigma2): sqrt(2*sigma2/pi)."""
    if sigma2 < 0:
        raise ValueError("sigma2 must be >= 0")
    return float(np.sqrt(2.0 * sigma2 / np.pi))


def smoothness_stat(field: np.ndarray, h: float, axis: int = 0) -> float:
    """Mean absolute second-order difference quotient over all interior
    triples of a regular grid along an axis."""
    field = np.asarray(field, dtype=float)
    if field.shape[axis] < 3:
        raise ValueError("need at least 3 grid points along the axis")
    f = np.moveaxis(field, axis, 0)
    quot = (f[:-2] - 2.0 * f[1:-1] + f[2:]) / h**2
    return float(np.mean(np.abs(quot)))


REPORT_COLUMNS = ("Station", "N", "MPE", "MAPE", "RMSPE", "R2", "Slope", "95% Cov.")


def report_table(rows, delimiter: str = ",") -> str:
    """Delimited validation table, one row per (label, DiagnosticsReport)."""
    buf = io.StringIO()
    buf.write(delimiter.join(REPORT_COLUMNS) + "\n")
    for label, rep in rows:
        buf.write(
            delimiter.join(
                [
                    str(label),
                    str(rep.n),
                    f"{rep.mpe:.4f}",
                    f"{rep.mape:.4f}",
                    f"{rep.rmspe:.4f}",
                    f"{rep.r2:.4f}",
                    f"{rep.slope:.5f}",
                    f"{rep.coverage:.4f}",
                ]
            )
            + "\n"
        )
    return buf.getvalue()
