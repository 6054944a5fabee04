"""Exact simple kriging plus the two local variants: fixed temporal bins
(spatial-only prediction per bin) and a moving temporal window.

Predictions are reported in both process space (the underlying field Y) and
observation space (a hypothetical new measurement Z = Y + eps): the point
predictions coincide at unobserved locations, and the variances differ by the
measurement-error variance at the prediction point.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from enum import Enum
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve

from .covariance import CovarianceFunction, covariance_matrix, _cho_factor_with_jitter
from .geometry import bin_index


class Space(Enum):
    PROCESS = "process"
    OBSERVATION = "observation"


@dataclass
class Dataset:
    """Point measurements: locations/times, values, per-point error SDs."""

    points: list
    z: np.ndarray
    sigma_eps: np.ndarray
    mu_eps: Optional[np.ndarray] = None

    def __post_init__(self):
        self.z = np.asarray(self.z, dtype=float)
        self.sigma_eps = np.broadcast_to(
            np.asarray(self.sigma_eps, dtype=float), self.z.shape
        ).copy()
        if len(self.points) != len(self.z):
            raise ValueError("points and z must have equal length")
        if np.any(self.sigma_eps < 0):
            raise ValueError("sigma_eps must be >= 0")
        if self.mu_eps is None:
            self.mu_eps = np.zeros_like(self.z)
        else:
            self.mu_eps = np.broadcast_to(
                np.asarray(self.mu_eps, dtype=float), self.z.shape
            ).copy()

    def __len__(self):
        return len(self.z)

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(
            [self.points[i] for i in idx],
            self.z[idx],
            self.sigma_eps[idx],
            self.mu_eps[idx],
        )


@dataclass
class PredictionResult:
    """Co-registered predictions with process- and observation-space SEs."""

    points: list
    pred: np.ndarray
    se_process: np.ndarray
    se_observation: np.ndarray
    space: Space
    prior_reversion: np.ndarray = field(default=None)  # True where no data informed the prediction

    def __post_init__(self):
        self.space = Space(self.space)
        if self.prior_reversion is None:
            self.prior_reversion = np.zeros(len(self.pred), dtype=bool)

    @property
    def se(self) -> np.ndarray:
        """SE in the requested space."""
        return self.se_process if self.space is Space.PROCESS else self.se_observation


def _resolve_sigma_eps_pred(data: Dataset, pred_points, sigma_eps_pred):
    n = len(pred_points)
    if sigma_eps_pred is None:
        sigma_eps_pred = float(np.mean(data.sigma_eps)) if len(data) else 0.0
    return np.broadcast_to(np.asarray(sigma_eps_pred, dtype=float), (n,)).copy()


def simple_krige(
    data: Dataset,
    cov: CovarianceFunction,
    pred_points,
    space: Space = Space.PROCESS,
    sigma_eps_pred=None,
    mean: str = "zero",
) -> PredictionResult:
    """Simple kriging with known zero mean (default) under the given covariance.

    pred = c(s*)' (C + Sigma_eps)^-1 Z, with process-space variance
    sigma2 - c(s*)' (C + Sigma_eps)^-1 c(s*).  ``sigma_eps_pred`` gives the
    measurement-error SD of a hypothetical re-retrieval at the prediction
    points (defaults to the mean of the data SDs) and only enters the
    observation-space SE.  ``mean="estimate"`` switches to ordinary kriging
    with an unknown constant mean.
    """
    if len(data) == 0:
        raise ValueError("cannot krige with empty data")
    sig_pred = _resolve_sigma_eps_pred(data, pred_points, sigma_eps_pred)
    c_dd = covariance_matrix(cov, data.points, data.points) + np.diag(data.sigma_eps**2)
    c_dp = covariance_matrix(cov, data.points, pred_points)
    factor = _cho_factor_with_jitter(c_dd, cov.sigma2)

    if mean == "zero":
        pred = c_dp.T @ cho_solve(factor, data.z)
        var_proc = cov.sigma2 - np.einsum("ij,ij->j", c_dp, cho_solve(factor, c_dp))
    elif mean == "estimate":
        ones = np.ones(len(data))
        a_inv_c = cho_solve(factor, c_dp)
        a_inv_1 = cho_solve(factor, ones)
        denom = ones @ a_inv_1
        mu_hat = (a_inv_1 @ data.z) / denom
        lagrange = (1.0 - ones @ a_inv_c) / denom
        pred = c_dp.T @ cho_solve(factor, data.z - mu_hat * ones) + mu_hat
        var_proc = (
            cov.sigma2
            - np.einsum("ij,ij->j", c_dp, a_inv_c)
            + (1.0 - ones @ a_inv_c) * lagrange
        )
    else:
        raise ValueError("mean must be 'zero' or 'estimate'")

    var_proc = np.maximum(var_proc, 0.0)
    se_proc = np.sqrt(var_proc)
    se_obs = np.sqrt(var_proc + sig_pred**2)
    return PredictionResult(list(pred_points), pred, se_proc, se_obs, space)


def fixed_bin_krige(
    data: Dataset,
    cov_spatial: CovarianceFunction,
    bin_width: float,
    pred_points,
    bin_origin: float = 0.0,
    space: Space = Space.PROCESS,
    sigma_eps_pred=None,
) -> PredictionResult:
    """Spatial-only simple kriging within fixed temporal bins.

    Each prediction point uses only the data whose time falls in its bin;
    time is otherwise ignored (cov_spatial acts on spatial separation alone).
    Empty bins revert to the prior: prediction 0, process SE = sigma_Y.
    """
    if bin_width <= 0:
        raise ValueError("bin_width must be > 0")
    sig_pred = _resolve_sigma_eps_pred(data, pred_points, sigma_eps_pred)
    data_bins = np.array([bin_index(p.t, bin_origin, bin_width) for p in data.points])
    pred_bins = np.array([bin_index(p.t, bin_origin, bin_width) for p in pred_points])

    n = len(pred_points)
    pred = np.zeros(n)
    var_proc = np.full(n, cov_spatial.sigma2)
    reverted = np.zeros(n, dtype=bool)
    for b in np.unique(pred_bins):
        sel_pred = np.flatnonzero(pred_bins == b)
        sel_data = np.flatnonzero(data_bins == b)
        if len(sel_data) == 0:
            reverted[sel_pred] = True
            continue
        sub = simple_krige(
            data.subset(sel_data),
            cov_spatial,
            [pred_points[i] for i in sel_pred],
            space=space,
        )
        pred[sel_pred] = sub.pred
        var_proc[sel_pred] = sub.se_process**2
    se_proc = np.sqrt(var_proc)
    se_obs = np.sqrt(var_proc + sig_pred**2)
    return PredictionResult(list(pred_points), pred, se_proc, se_obs, space, reverted)


def moving_window_krige(
    data: Dataset,
    cov: CovarianceFunction,
    delta: float,
    pred_points,
    space: Space = Space.PROCESS,
    sigma_eps_pred=None,
) -> PredictionResult:
    """Spatio-temporal simple kriging from a moving temporal window.

    Each prediction at (s; t) uses exactly the data with time in the closed
    interval [t - delta/2, t + delta/2].  Prediction points sharing a window
    membership are solved together.  Empty windows revert to the prior.
    """
    if delta <= 0:
        raise ValueError("delta must be > 0")
    sig_pred = _resolve_sigma_eps_pred(data, pred_points, sigma_eps_pred)
    data_t = np.array([p.t for p in data.points])
    pred_t = np.array([p.t for p in pred_points])

    # Group prediction points by window membership (the set of data indices).
    order = np.argsort(data_t, kind="stable")
    sorted_t = data_t[order]
    lo = np.searchsorted(sorted_t, pred_t - delta / 2.0, side="left")
    hi = np.searchsorted(sorted_t, pred_t + delta / 2.0, side="right")

    n = len(pred_points)
    pred = np.zeros(n)
    var_proc = np.full(n, cov.sigma2)
    reverted = np.zeros(n, dtype=bool)
    groups = {}
    for j in range(n):
        groups.setdefault((lo[j], hi[j]), []).append(j)
    for (a, b), members in groups.items():
        if b <= a:
            for j in members:
                reverted[j] = True
            continue
        sel_data = order[a:b]
        sub = simple_krige(
            data.subset(sel_data),
            cov,
            [pred_points[j] for j in members],
            space=space,
        )
        pred[members] = sub.pred
        var_proc[members] = sub.se_process**2
    se_proc = np.sqrt(var_proc)
    se_obs = np.sqrt(var_proc + sig_pred**2)
    return PredictionResult(list(pred_points), pred, se_proc, se_obs, space, reverted)
