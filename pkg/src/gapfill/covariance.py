"""Parametric covariance functions and Gaussian random-field simulation.

Three covariance families are provided:

* ``exponential`` -- stationary spatial exponential, exp(-d/tau_s);
* ``separable_exp`` -- separable space-time, exp(-d/tau_s) * exp(-|dt|/tau_t);
* ``binned_indicator`` -- exp(-d/tau_s) times an indicator that the two times
  fall in the same fixed-width temporal bin (the model implied by snapshot
  gridding of space-time data).

Simulation is by lower-triangular factorisation of the covariance matrix with
a jitter ladder, plus conditioning-by-kriging for conditional draws.  All
stochastic operations take an explicit seed and use numpy's PCG64 generator,
so results are bit-reproducible within a release.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cholesky, cho_factor, cho_solve

from .geometry import (
    FrameMismatchError,
    bin_index,
    distance_matrix,
    points_to_arrays,
)

EXPONENTIAL = "exponential"
SEPARABLE_EXP = "separable_exp"
BINNED_INDICATOR = "binned_indicator"

_JITTER_START = 1e-10
_JITTER_MAX = 1e-6


class ConditioningError(np.linalg.LinAlgError):
    """Covariance factorisation failed even after maximal jitter."""


@dataclass(frozen=True)
class CovarianceFunction:
    """Stationary covariance sigma2 * R(h, dt) in one of the three families."""

    kind: str
    sigma2: float
    tau_s: float
    tau_t: Optional[float] = None
    bin_width: Optional[float] = None
    bin_origin: float = 0.0

    def __post_init__(self):
        if self.kind not in (EXPONENTIAL, SEPARABLE_EXP, BINNED_INDICATOR):
            raise ValueError(f"unknown covariance kind {self.kind!r}")
        if self.sigma2 <= 0 or self.tau_s <= 0:
            raise ValueError("sigma2 and tau_s must be > 0")
        if self.kind == SEPARABLE_EXP and (self.tau_t is None or self.tau_t <= 0):
            raise ValueError("separable_exp requires tau_t > 0")
        if self.kind == BINNED_INDICATOR and (self.bin_width is None or self.bin_width <= 0):
            raise ValueError("binned_indicator requires bin_width > 0")

    @property
    def sigma(self) -> float:
        return float(np.sqrt(self.sigma2))


def exponential(sigma2: float, tau_s: float) -> CovarianceFunction:
    return CovarianceFunction(EXPONENTIAL, sigma2, tau_s)


def separable_exp(sigma2: float, tau_s: float, tau_t: float) -> CovarianceFunction:
    return CovarianceFunction(SEPARABLE_EXP, sigma2, tau_s, tau_t=tau_t)


def binned_indicator(sigma2: float, tau_s: float, bin_width: float, bin_origin: float = 0.0) -> CovarianceFunction:
    return CovarianceFunction(
        BINNED_INDICATOR, sigma2, tau_s, bin_width=bin_width, bin_origin=bin_origin
    )


@dataclass(frozen=True)
class FieldSample:
    """One realisation of the field at a fixed set of points."""

    points: list
    values: np.ndarray
    seed: int

    def __post_init__(self):
        if len(self.values) != len(self.points):
            raise ValueError("values and points must have equal length")


def correlation_matrix(cov: CovarianceFunction, pts_a, pts_b) -> np.ndarray:
    frame_a, coords_a, times_a = points_to_arrays(pts_a)
    frame_b, coords_b, times_b = points_to_arrays(pts_b)
    if frame_a is not frame_b:
        raise FrameMismatchError("point sets in different frames")
    r = np.exp(-distance_matrix(frame_a, coords_a, coords_b) / cov.tau_s)
    if cov.kind == SEPARABLE_EXP:
        r *= np.exp(-np.abs(times_a[:, None] - times_b[None, :]) / cov.tau_t)
    elif cov.kind == BINNED_INDICATOR:
        bins_a = np.floor((times_a - cov.bin_origin) / cov.bin_width).astype(int)
        bins_b = np.floor((times_b - cov.bin_origin) / cov.bin_width).astype(int)
        r *= (bins_a[:, None] == bins_b[None, :]).astype(float)
    return r


def correlation(cov: CovarianceFunction, a, b) -> float:
    """Correlation between the field at two space-time points."""
    return float(correlation_matrix(cov, [a], [b])[0, 0])


def covariance_matrix(cov: CovarianceFunction, pts_a, pts_b) -> np.ndarray:
    """Entry (i, j) = sigma2 * correlation(pts_a[i], pts_b[j])."""
    return cov.sigma2 * correlation_matrix(cov, pts_a, pts_b)


def chol_with_jitter(mat: np.ndarray, scale: float) -> np.ndarray:
    """Lower-triangular factor, escalating diagonal jitter from 1e-10*scale
    by factors of 10 up to 1e-6*scale before giving up."""
    jitter = 0.0
    while True:
        try:
            return cholesky(mat + jitter * np.eye(len(mat)), lower=True)
        except np.linalg.LinAlgError:
            jitter = _JITTER_START * scale if jitter == 0.0 else jitter * 10.0
            if jitter > _JITTER_MAX * scale:
                raise ConditioningError(
                    f"factorisation failed at jitter {jitter:.1e}"
                ) from None


def simulate_unconditional(cov: CovarianceFunction, points, seed: int) -> FieldSample:
    """Mean-zero Gaussian draw with the stated covariance; deterministic in seed."""
    c = covariance_matrix(cov, points, points)
    lower = chol_with_jitter(c, cov.sigma2)
    rng = np.random.default_rng(seed)
    values = lower @ rng.standard_normal(len(points))
    return FieldSample(list(points), values, seed)


def simulate_conditional(
    cov: CovarianceFunction,
    data_points,
    z: np.ndarray,
    sigma_eps: np.ndarray,
    pred_points,
    n_sims: int,
    seed: int,
):
    """Conditional simulation by conditioning-by-kriging.

    Each sample is an unconditional joint draw at (data, pred) points,
    corrected by Y_sim_pred + C*' (C + Sigma_eps)^-1 (Z - Z_sim), where Z_sim
    adds fresh measurement noise to the simulated field at the data points.
    The sample mean converges to the simple-kriging predictor.
    """
    z = np.asarray(z, dtype=float)
    sigma_eps = np.broadcast_to(np.asarray(sigma_eps, dtype=float), z.shape)
    if np.any(sigma_eps < 0):
        raise ValueError("sigma_eps must be >= 0")
    m = len(data_points)

    # Prediction points that coincide with data points reuse the data draw,
    # so that noiseless conditioning reproduces Z exactly.
    index_of = {(p.loc.frame, p.loc.coords, p.t): i for i, p in enumerate(data_points)}
    joint = list(data_points)
    pred_idx = np.empty(len(pred_points), dtype=int)
    for j, p in enumerate(pred_points):
        key = (p.loc.frame, p.loc.coords, p.t)
        if key in index_of:
            pred_idx[j] = index_of[key]
        else:
            pred_idx[j] = len(joint)
            joint.append(p)

    c_joint = covariance_matrix(cov, joint, joint)
    lower = chol_with_jitter(c_joint, cov.sigma2)
    c_dd = c_joint[:m, :m] + np.diag(sigma_eps**2)
    c_dp = c_joint[:m, pred_idx]
    factor = _cho_factor_with_jitter(c_dd, cov.sigma2)
    krige_of_z = c_dp.T @ cho_solve(factor, z)

    rng = np.random.default_rng(seed)
    samples = []
    for _ in range(n_sims):
        y_sim = lower @ rng.standard_normal(len(joint))
        z_sim = y_sim[:m] + sigma_eps * rng.standard_normal(m)
        resid = c_dp.T @ cho_solve(factor, z_sim)
        values = krige_of_z + y_sim[pred_idx] - resid
        samples.append(FieldSample(list(pred_points), values, seed))
    return samples


def _cho_factor_with_jitter(mat: np.ndarray, scale: float):
    jitter = 0.0
    while True:
        try:
            return cho_factor(mat + jitter * np.eye(len(mat)), lower=True)
        except np.linalg.LinAlgError:
            jitter = _JITTER_START * scale if jitter == 0.0 else jitter * 10.0
            if jitter > _JITTER_MAX * scale:
                raise ConditioningError(
                    f"factorisation failed at jitter {jitter:.1e}"
                ) from None
