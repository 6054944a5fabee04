"""Fixed Rank Kriging: reduced-rank spatial / spatio-temporal prediction.

The field is modelled as Y(s;t) = phi(s;t)' eta + zeta(s;t), with r basis
functions phi, random coefficients eta with block-diagonal (by resolution)
covariance K, and white fine-scale variation zeta with variance sigma2_zeta.
Measurements add known heteroscedastic noise.  K and sigma2_zeta are
estimated by EM (free covariance blocks) optionally followed by numerical
maximum likelihood for a structured exponential parameterisation of K.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import scipy.sparse as sp
from scipy.linalg import cho_factor, cho_solve, cholesky, eigh, solve_triangular
from scipy.optimize import minimize

from .covariance import ConditioningError, CovarianceFunction, covariance_matrix, _cho_factor_with_jitter
from .geometry import Frame, distance_matrix, points_to_arrays
from .kriging import Dataset, PredictionResult, Space, _resolve_sigma_eps_pred


def eval_bisquare(d, aperture: float):
    """Bisquare radial profile: (1 - (d/A)^2)^2 for d <= A, else 0."""
    if aperture <= 0:
        raise ValueError("aperture must be > 0")
    d = np.asarray(d, dtype=float)
    x = d / aperture
    out = np.where(d <= aperture, (1.0 - x**2) ** 2, 0.0)
    return out if out.ndim else float(out)


@dataclass
class BasisSet:
    """Ordered multi-resolution bisquare basis, optionally tensored with a
    single temporal resolution of bisquares.

    Functions are ordered by resolution; within a resolution the ordering is
    temporal-major (all spatial centroids for the first temporal centroid,
    then the second, ...), so each resolution occupies one contiguous block.
    """

    frame: Frame
    centroids: np.ndarray  # (n_s, dim), sorted by resolution
    apertures: np.ndarray  # (n_s,)
    res_index: np.ndarray  # (n_s,), 1-based, contiguous
    t_centroids: Optional[np.ndarray] = None
    t_aperture: Optional[float] = None

    def __post_init__(self):
        self.centroids = np.atleast_2d(np.asarray(self.centroids, dtype=float))
        self.apertures = np.asarray(self.apertures, dtype=float)
        self.res_index = np.asarray(self.res_index, dtype=int)
        if np.any(self.apertures <= 0):
            raise ValueError("apertures must be > 0")
        if self.t_centroids is not None:
            self.t_centroids = np.asarray(self.t_centroids, dtype=float)
            if self.t_aperture is None or self.t_aperture <= 0:
                raise ValueError("temporal aperture must be > 0")
        res = np.unique(self.res_index)
        if not np.array_equal(res, np.arange(1, len(res) + 1)):
            raise ValueError("resolutions must be contiguous from 1")
        if np.any(np.diff(self.res_index) < 0):
            raise ValueError("centroids must be sorted by resolution")

    @property
    def n_res(self) -> int:
        return int(self.res_index.max())

    @property
    def n_temporal(self) -> int:
        return 1 if self.t_centroids is None else len(self.t_centroids)

    @property
    def spatial_counts(self):
        return tuple(int(np.sum(self.res_index == q)) for q in range(1, self.n_res + 1))

    @property
    def counts_per_res(self):
        nt = self.n_temporal
        return tuple(c * nt for c in self.spatial_counts)

    @property
    def n_functions(self) -> int:
        return len(self.centroids) * self.n_temporal

    def _spatial_values(self, coords: np.ndarray) -> np.ndarray:
        d = distance_matrix(self.frame, coords, self.centroids)
        x = d / self.apertures[None, :]
        return np.where(d <= self.apertures[None, :], (1.0 - x**2) ** 2, 0.0)

    def _temporal_values(self, times: np.ndarray) -> np.ndarray:
        if self.t_centroids is None:
            return np.ones((len(times), 1))
        d = np.abs(times[:, None] - self.t_centroids[None, :])
        x = d / self.t_aperture
        return np.where(d <= self.t_aperture, (1.0 - x**2) ** 2, 0.0)

    def design_matrix(self, points) -> sp.csr_matrix:
        """Sparse (n_points, n_functions) matrix of basis evaluations."""
        frame, coords, times = points_to_arrays(points)
        if frame is not self.frame:
            raise ValueError("points frame does not match basis frame")
        s_vals = self._spatial_values(coords)
        t_vals = self._temporal_values(times)
        blocks = []
        for q in range(1, self.n_res + 1):
            sel = self.res_index == q
            s_q = s_vals[:, sel]
            for j in range(t_vals.shape[1]):
                blocks.append(sp.csr_matrix(s_q * t_vals[:, [j]]))
        return sp.hstack(blocks, format="csr")

    def centroid_distances(self):
        """Per-resolution spatial distance matrices and the temporal one."""
        d_s = []
        for q in range(1, self.n_res + 1):
            c = self.centroids[self.res_index == q]
            d_s.append(distance_matrix(self.frame, c, c))
        if self.t_centroids is None:
            d_t = np.zeros((1, 1))
        else:
            d_t = np.abs(self.t_centroids[:, None] - self.t_centroids[None, :])
        return d_s, d_t


def build_basis_planar(bounds, counts_per_res) -> BasisSet:
    """Regular lattices of planar bisquares, one lattice per resolution.

    counts_per_res is a sequence of (nx, ny) pairs; aperture at each
    resolution is 1.5 times the lattice spacing.
    """
    (x_lo, x_hi), (y_lo, y_hi) = bounds
    centroids = []
    apertures = []
    res_index = []
    for q, (nx, ny) in enumerate(counts_per_res, start=1):
        dx = (x_hi - x_lo) / nx
        dy = (y_hi - y_lo) / ny
        xs = x_lo + (np.arange(nx) + 0.5) * dx
        ys = y_lo + (np.arange(ny) + 0.5) * dy
        gx, gy = np.meshgrid(xs, ys, indexing="ij")
        pts = np.column_stack([gx.ravel(order="F"), gy.ravel(order="F")])
        centroids.append(pts)
        apertures.append(np.full(len(pts), 1.5 * max(dx, dy)))
        res_index.append(np.full(len(pts), q, dtype=int))
    return BasisSet(
        Frame.PLANAR,
        np.vstack(centroids),
        np.concatenate(apertures),
        np.concatenate(res_index),
    )


def fibonacci_sphere(n: int) -> np.ndarray:
    """n quasi-uniform (lon, lat) points in degrees via the Fibonacci lattice."""
    i = np.arange(n)
    z = 1.0 - 2.0 * (i + 0.5) / n
    lat = np.degrees(np.arcsin(z))
    golden = np.pi * (3.0 - np.sqrt(5.0))
    lon = np.degrees((i * golden) % (2.0 * np.pi)) - 180.0
    lon = np.where(lon >= 180.0, lon - 360.0, lon)
    return np.column_stack([lon, lat])


def build_basis_sphere_time(
    spatial_counts=(42, 114, 240),
    window: float = 16.0,
    n_temporal: int = 8,
    aperture_factor: float = 1.5,
) -> BasisSet:
    """Tensor-product basis: quasi-uniform spherical bisquares at several
    resolutions, times equally spaced temporal bisquares on [0, window].

    Spatial apertures are aperture_factor times the mean nearest-centroid
    great-circle distance at each resolution; the temporal aperture is
    aperture_factor times the centroid spacing.
    """
    if window <= 0:
        raise ValueError("window must be > 0")
    centroids = []
    apertures = []
    res_index = []
    for q, n in enumerate(spatial_counts, start=1):
        pts = fibonacci_sphere(n)
        d = distance_matrix(Frame.SPHERE, pts, pts)
        np.fill_diagonal(d, np.inf)
        nearest = d.min(axis=1)
        centroids.append(pts)
        apertures.append(np.full(n, aperture_factor * nearest.mean()))
        res_index.append(np.full(n, q, dtype=int))
    spacing = window / n_temporal
    t_centroids = (np.arange(n_temporal) + 0.5) * spacing
    return BasisSet(
        Frame.SPHERE,
        np.vstack(centroids),
        np.concatenate(apertures),
        np.concatenate(res_index),
        t_centroids=t_centroids,
        t_aperture=aperture_factor * spacing,
    )


@dataclass
class FRKParams:
    """Structured-K parameters: per resolution a marginal variance, a spatial
    e-folding length, and (space-time bases only) a temporal e-folding length,
    plus the fine-scale variance."""

    theta1: np.ndarray
    theta2: np.ndarray
    theta3: Optional[np.ndarray]
    sigma2_zeta: float

    def __post_init__(self):
        self.theta1 = np.asarray(self.theta1, dtype=float)
        self.theta2 = np.asarray(self.theta2, dtype=float)
        if self.theta3 is not None:
            self.theta3 = np.asarray(self.theta3, dtype=float)
        vals = [self.theta1, self.theta2] + ([self.theta3] if self.theta3 is not None else [])
        if any(np.any(v <= 0) for v in vals) or self.sigma2_zeta <= 0:
            raise ValueError("all parameters must be strictly positive")


def structured_K(params: FRKParams, basis: BasisSet):
    """Block-diagonal K: block q has entries
    theta1_q * exp(-d_s/theta2_q - d_t/theta3_q) over centroid distances."""
    d_s, d_t = basis.centroid_distances()
    blocks = []
    for q in range(basis.n_res):
        spatial = np.exp(-d_s[q] / params.theta2[q])
        if basis.t_centroids is None:
            temporal = np.ones((1, 1))
        else:
            temporal = np.exp(-d_t / params.theta3[q])
        blocks.append(params.theta1[q] * np.kron(temporal, spatial))
    return blocks


def _block_slices(basis: BasisSet):
    sizes = basis.counts_per_res
    offsets = np.concatenate([[0], np.cumsum(sizes)])
    return [slice(offsets[q], offsets[q + 1]) for q in range(len(sizes))]


@dataclass
class FittedFRK:
    """A fitted reduced-rank model: basis, K blocks, fine-scale variance and
    the Gaussian posterior of the coefficients given the data."""

    basis: BasisSet
    k_blocks: list
    sigma2_zeta: float
    eta_mean: np.ndarray
    eta_cov: np.ndarray
    loglik_path: list = field(default_factory=list)
    data: Optional[Dataset] = None
    zeta_mean: Optional[np.ndarray] = None
    zeta_var: Optional[np.ndarray] = None
    params: Optional[FRKParams] = None
    mode: str = "free"
    n_iterations: int = 0

    @classmethod
    def prior(cls, basis: BasisSet, k_blocks, sigma2_zeta: float) -> "FittedFRK":
        """No-data model: posterior equals the prior (pred 0, prior variance)."""
        r = basis.n_functions
        from scipy.linalg import block_diag

        return cls(basis, list(k_blocks), sigma2_zeta, np.zeros(r), block_diag(*k_blocks))


class _EMState:
    """One E-step at fixed (K, sigma2_zeta); caches the posterior pieces."""

    def __init__(self, phi, z, noise_var, k_blocks, sigma2_zeta, slices):
        d = sigma2_zeta + noise_var  # diag of var(Z | eta)
        self.dinv = 1.0 / d
        self.sigma2_zeta = sigma2_zeta
        phi_dinv = phi.multiply(self.dinv[:, None]).tocsr()
        self.phi_dinv = phi_dinv
        a = (phi_dinv.T @ phi).toarray()
        k_logdet = 0.0
        for blk, sl in zip(k_blocks, slices):
            lower = cholesky(blk, lower=True)
            k_logdet += 2.0 * np.sum(np.log(np.diag(lower)))
            a[sl, sl] += cho_solve((lower, True), np.eye(len(blk)))
        lower_a = cholesky(a, lower=True)
        b = phi_dinv.T @ z
        half = solve_triangular(lower_a, b, lower=True)
        self.eta_mean = cho_solve((lower_a, True), b)
        self.eta_cov = cho_solve((lower_a, True), np.eye(len(a)))
        # marginal log-likelihood via the determinant lemma and Woodbury
        logdet = np.sum(np.log(d)) + k_logdet + 2.0 * np.sum(np.log(np.diag(lower_a)))
        quad = float(z @ (z * self.dinv) - half @ half)
        self.loglik = -0.5 * (len(z) * np.log(2.0 * np.pi) + logdet + quad)
        # posterior mean of the fine-scale component via Sigma_Z^{-1} Z
        self.zeta_mean = sigma2_zeta * (z * self.dinv - phi_dinv @ self.eta_mean)

    def mean_diag_sz_inv(self) -> float:
        """Mean diagonal of Sigma_Z^{-1}, via tr(A^-1 Phi' D^-2 Phi)."""
        b = (self.phi_dinv.T @ self.phi_dinv).tocoo()
        tr = float(np.sum(b.data * self.eta_cov[b.col, b.row]))
        return float(np.mean(self.dinv)) - tr / len(self.dinv)

    def zeta_variances(self, chunk: int = 4096) -> np.ndarray:
        """Per-point posterior variance of zeta at the data points."""
        m = self.phi_dinv.shape[0]
        diag = np.empty(m)
        for s in range(0, m, chunk):
            rows = self.phi_dinv[s : s + chunk]
            p = rows @ self.eta_cov
            diag[s : s + chunk] = self.dinv[s : s + chunk] - np.asarray(
                rows.multiply(p).sum(axis=1)
            ).ravel()
        return np.maximum(self.sigma2_zeta - self.sigma2_zeta**2 * diag, 0.0)


def _loglik_only(phi, z, noise_var, k_blocks, sigma2_zeta, slices) -> float:
    d = sigma2_zeta + noise_var
    dinv = 1.0 / d
    phi_dinv = phi.multiply(dinv[:, None]).tocsr()
    a = (phi_dinv.T @ phi).toarray()
    k_logdet = 0.0
    for blk, sl in zip(k_blocks, slices):
        lower = cholesky(blk, lower=True)
        k_logdet += 2.0 * np.sum(np.log(np.diag(lower)))
        a[sl, sl] += cho_solve((lower, True), np.eye(len(blk)))
    lower_a = cholesky(a, lower=True)
    b = phi_dinv.T @ z
    half = solve_triangular(lower_a, b, lower=True)
    logdet = np.sum(np.log(d)) + k_logdet + 2.0 * np.sum(np.log(np.diag(lower_a)))
    quad = float(z @ (z * dinv) - half @ half)
    return -0.5 * (len(z) * np.log(2.0 * np.pi) + logdet + quad)


def default_init_params(data: Dataset, basis: BasisSet, window: Optional[float] = None) -> FRKParams:
    """Spec'd starting point: variance split evenly across resolutions,
    spatial scale = domain diameter / 5, temporal scale = window / 2."""
    var_z = float(np.var(data.z))
    if var_z <= 0:
        var_z = 1.0
    n_res = basis.n_res
    _, coords, times = points_to_arrays(data.points)
    if basis.frame is Frame.PLANAR:
        diam = float(np.linalg.norm(coords.max(axis=0) - coords.min(axis=0)))
    else:
        diam = np.pi * 6371.0
    if diam <= 0:
        diam = 1.0
    theta1 = np.full(n_res, var_z / n_res)
    theta2 = np.full(n_res, diam / 5.0)
    if basis.t_centroids is not None:
        if window is None:
            window = float(times.max() - times.min()) or 1.0
        theta3 = np.full(n_res, window / 2.0)
    else:
        theta3 = None
    return FRKParams(theta1, theta2, theta3, 0.1 * var_z)


def fit_em(
    data: Dataset,
    basis: BasisSet,
    mode: str = "free",
    tol: float = 1e-6,
    max_iter: int = 200,
    init: Optional[FRKParams] = None,
    structured_maxiter: int = 200,
) -> FittedFRK:
    """Estimate K and sigma2_zeta, returning the fitted model.

    mode "free": EM with unconstrained per-resolution covariance blocks
    (monotone marginal log-likelihood).  mode "structured": numerical maximum
    likelihood over the structured-K parameters, multi-started.
    """
    if mode not in ("free", "structured"):
        raise ValueError("mode must be 'free' or 'structured'")
    if len(data) == 0:
        raise ValueError("cannot fit with empty data")
    phi = basis.design_matrix(data.points)
    z = data.z
    noise_var = data.sigma_eps**2
    slices = _block_slices(basis)
    if init is None:
        init = default_init_params(data, basis)
    k_blocks = structured_K(init, basis)
    sigma2_zeta = init.sigma2_zeta
    zeta_floor = max(1e-10 * float(np.var(z)), 1e-300)

    loglik_path = []
    state = None
    n_iter = 0
    params = None
    if mode == "structured":
        params = _fit_structured(
            phi, z, noise_var, basis, slices, init, maxiter=structured_maxiter
        )
        k_blocks = structured_K(params, basis)
        sigma2_zeta = params.sigma2_zeta
        state = _EMState(phi, z, noise_var, k_blocks, sigma2_zeta, slices)
        if not np.isfinite(state.loglik):
            raise ConditioningError("non-finite marginal log-likelihood")
        loglik_path.append(state.loglik)
    else:
        for n_iter in range(1, max_iter + 1):
            state = _EMState(phi, z, noise_var, k_blocks, sigma2_zeta, slices)
            if not np.isfinite(state.loglik):
                raise ConditioningError("non-finite marginal log-likelihood")
            loglik_path.append(state.loglik)
            converged = (
                len(loglik_path) >= 2
                and abs(loglik_path[-1] - loglik_path[-2])
                <= tol * max(1.0, abs(loglik_path[-2]))
            )
            if converged:
                break
            # M-step
            new_blocks = []
            for sl in slices:
                mu = state.eta_mean[sl]
                new_blocks.append(state.eta_cov[sl, sl] + np.outer(mu, mu))
            mean_zeta_var = sigma2_zeta - sigma2_zeta**2 * state.mean_diag_sz_inv()
            sigma2_zeta = max(
                mean_zeta_var + float(np.mean(state.zeta_mean**2)), zeta_floor
            )
            k_blocks = new_blocks

    fitted = FittedFRK(
        basis=basis,
        k_blocks=k_blocks,
        sigma2_zeta=sigma2_zeta,
        eta_mean=state.eta_mean,
        eta_cov=state.eta_cov,
        loglik_path=loglik_path,
        data=data,
        zeta_mean=state.zeta_mean,
        zeta_var=state.zeta_variances(),
        params=params,
        mode=mode,
        n_iterations=n_iter,
    )
    return fitted


def _fit_structured(phi, z, noise_var, basis, slices, init, maxiter):
    """Numerical ML over the structured-K parameters, multi-started over
    domain-scale and aperture-scale spatial lengths."""
    n_res = basis.n_res
    has_time = basis.t_centroids is not None

    def pack(params: FRKParams):
        parts = [np.log(params.theta1), np.log(params.theta2)]
        if has_time:
            parts.append(np.log(params.theta3))
        parts.append([np.log(max(params.sigma2_zeta, 1e-12))])
        return np.concatenate(parts)

    def unpack(x):
        t1 = np.exp(x[:n_res])
        t2 = np.exp(x[n_res : 2 * n_res])
        if has_time:
            t3 = np.exp(x[2 * n_res : 3 * n_res])
            s2z = np.exp(x[3 * n_res])
        else:
            t3 = None
            s2z = np.exp(x[2 * n_res])
        return FRKParams(t1, t2, t3, float(s2z))

    def objective(x):
        try:
            p = unpack(x)
            blocks = structured_K(p, basis)
            val = -_loglik_only(phi, z, noise_var, blocks, p.sigma2_zeta, slices)
            return val if np.isfinite(val) else 1e300
        except (np.linalg.LinAlgError, FloatingPointError, OverflowError, ValueError):
            return 1e300

    # Two starts differing in the spatial range guess: the domain-scale
    # default and the per-resolution aperture scale.  Seeding theta1 from the
    # free-blocks diagonal is deliberately avoided: it steers the optimizer
    # into a near-diagonal-K mode with slightly higher likelihood but badly
    # inflated prediction variances.
    apertures = np.array(
        [basis.apertures[basis.res_index == q][0] for q in range(1, n_res + 1)]
    )
    starts = [
        FRKParams(init.theta1, init.theta2, init.theta3, init.sigma2_zeta),
        FRKParams(init.theta1, apertures, init.theta3, init.sigma2_zeta),
    ]
    best_x, best_val = None, np.inf
    for start in starts:
        res = minimize(
            objective, pack(start), method="L-BFGS-B",
            options={"maxiter": maxiter},
        )
        if res.fun < best_val:
            best_x, best_val = res.x, res.fun
    return unpack(best_x)


def frk_predict(
    fitted: FittedFRK,
    pred_points,
    space: Space = Space.PROCESS,
    sigma_eps_pred=None,
) -> PredictionResult:
    """Predict the field at new points from a fitted model.

    At unobserved points, pred = phi' E(eta|Z) with process variance
    phi' var(eta|Z) phi + sigma2_zeta.  At points coinciding with a datum the
    fine-scale posterior mean is added and its posterior variance replaces
    sigma2_zeta.  Observation-space SE adds the measurement-error variance.
    """
    phi = fitted.basis.design_matrix(pred_points)
    pred = phi @ fitted.eta_mean
    half = phi @ fitted.eta_cov
    var_eta = np.asarray(phi.multiply(half).sum(axis=1)).ravel()
    var_proc = var_eta + fitted.sigma2_zeta

    if fitted.data is not None and fitted.zeta_mean is not None:
        index_of = {
            (p.loc.coords, p.t): i for i, p in enumerate(fitted.data.points)
        }
        for j, p in enumerate(pred_points):
            i = index_of.get((p.loc.coords, p.t))
            if i is not None:
                pred[j] += fitted.zeta_mean[i]
                var_proc[j] = var_eta[j] + fitted.zeta_var[i]

    if sigma_eps_pred is None:
        if fitted.data is not None:
            sig_pred = _resolve_sigma_eps_pred(fitted.data, pred_points, None)
        else:
            sig_pred = np.zeros(len(pred_points))
    else:
        sig_pred = np.broadcast_to(
            np.asarray(sigma_eps_pred, dtype=float), (len(pred_points),)
        ).copy()

    var_proc = np.maximum(var_proc, 0.0)
    se_proc = np.sqrt(var_proc)
    se_obs = np.sqrt(var_proc + sig_pred**2)
    return PredictionResult(list(pred_points), np.asarray(pred).ravel(), se_proc, se_obs, space)


class ExactRecoveryBasis:
    """Data-dependent basis phi(s*)' = c(s*)' (C + Sigma_eps)^-1 that makes
    FRK reproduce the simple-kriging predictor exactly."""

    def __init__(self, data_points, cov: CovarianceFunction, sigma2_eps: float):
        self.data_points = list(data_points)
        self.cov = cov
        self.sigma2_eps = float(sigma2_eps)
        c = covariance_matrix(cov, self.data_points, self.data_points)
        self.k = c + self.sigma2_eps * np.eye(len(c))
        self._factor = _cho_factor_with_jitter(self.k, cov.sigma2)
        self.n_res = 1
        self.counts_per_res = (len(self.data_points),)
        self.n_functions = len(self.data_points)

    def design_matrix(self, points):
        c_star = covariance_matrix(self.cov, points, self.data_points)
        return sp.csr_matrix(cho_solve(self._factor, c_star.T).T)


def exact_recovery_basis(data: Dataset, cov: CovarianceFunction, sigma2_eps: float) -> FittedFRK:
    """Appendix-style exact-recovery construction: m data-dependent basis
    functions with K = C + sigma2_eps*I and eta | Z centred at Z.

    The resulting FRK prediction equals simple kriging exactly; the reported
    variance is the variance of the optimal predictor,
    c(s*)'(C + sigma2_eps I)^-1 c(s*), not the conditional variance of Y.
    """
    basis = ExactRecoveryBasis(data.points, cov, sigma2_eps)
    return FittedFRK(
        basis=basis,
        k_blocks=[basis.k],
        sigma2_zeta=0.0,
        eta_mean=data.z.copy(),
        eta_cov=basis.k,
        data=None,
        mode="exact_recovery",
    )


def _psd_factor(cov_mat: np.ndarray) -> np.ndarray:
    """Square root of a symmetric PSD matrix, repairing tiny negative
    eigenvalues (below -1e-10 of the trace is an error)."""
    try:
        return cholesky(cov_mat, lower=True)
    except np.linalg.LinAlgError:
        vals, vecs = eigh(cov_mat)
        tr = max(np.trace(cov_mat), 1e-300)
        if vals.min() < -1e-10 * tr:
            raise ConditioningError(
                f"posterior covariance not PSD (min eig {vals.min():.3e})"
            ) from None
        vals = np.clip(vals, 0.0, None)
        return vecs * np.sqrt(vals)[None, :]


def frk_conditional_sim(fitted: FittedFRK, points, n_sims: int, seed: int):
    """Draw realisations of Y = phi' eta + zeta given the data: eta from its
    Gaussian posterior, zeta as fresh white noise with variance sigma2_zeta."""
    from .covariance import FieldSample

    phi = fitted.basis.design_matrix(points)
    factor = _psd_factor(fitted.eta_cov)
    rng = np.random.default_rng(seed)
    sigma_zeta = np.sqrt(fitted.sigma2_zeta)
    samples = []
    for _ in range(n_sims):
        eta = fitted.eta_mean + factor @ rng.standard_normal(fitted.basis.n_functions)
        values = phi @ eta + sigma_zeta * rng.standard_normal(len(points))
        samples.append(FieldSample(list(points), np.asarray(values).ravel(), seed))
    return samples


def frk_implied_covariance(fitted: FittedFRK, a, b) -> float:
    """Model-implied covariance phi(a)' K phi(b) + sigma2_zeta * 1[a == b]."""
    from scipy.linalg import block_diag

    phi = fitted.basis.design_matrix([a, b]).toarray()
    k = block_diag(*fitted.k_blocks)
    val = float(phi[0] @ k @ phi[1])
    same = a.loc.frame is b.loc.frame and a.loc.coords == b.loc.coords and a.t == b.t
    if same:
        val += fitted.sigma2_zeta
    return val


def implied_covariance_curve(fitted: FittedFRK, points, n_bins: int = 20):
    """Spatially averaged implied covariance vs. distance, for plotting
    against the true covariance function.

    Returns (bin centre distances, mean implied covariance per bin); the
    zero-distance entry includes the fine-scale jump.
    """
    from scipy.linalg import block_diag

    frame, coords, _ = points_to_arrays(points)
    phi = fitted.basis.design_matrix(points).toarray()
    k = block_diag(*fitted.k_blocks)
    cov_full = phi @ k @ phi.T
    d = distance_matrix(frame, coords, coords)
    iu = np.triu_indices(len(points), k=1)
    dist = d[iu]
    vals = cov_full[iu]
    edges = np.linspace(0.0, dist.max(), n_bins + 1)
    centres = 0.5 * (edges[:-1] + edges[1:])
    means = np.full(n_bins, np.nan)
    for i in range(n_bins):
        sel = (dist >= edges[i]) & (dist < edges[i + 1])
        if np.any(sel):
            means[i] = vals[sel].mean()
    zero_val = float(np.mean(np.diag(cov_full)) + fitted.sigma2_zeta)
    return np.concatenate([[0.0], centres]), np.concatenate([[zero_val], means])


SERIALIZATION_VERSION = 1


def save_fitted(fitted: FittedFRK, path) -> None:
    """Write a fitted model to a single .npz file (bit-exact round trip).

    Exact-recovery fits carry data-dependent basis functions and are not
    serialisable.
    """
    if isinstance(fitted.basis, ExactRecoveryBasis):
        raise ValueError("exact-recovery fits cannot be serialised")
    payload = {
        "version": np.array(SERIALIZATION_VERSION),
        "frame": np.array(fitted.basis.frame.value),
        "centroids": fitted.basis.centroids,
        "apertures": fitted.basis.apertures,
        "res_index": fitted.basis.res_index,
        "sigma2_zeta": np.array(fitted.sigma2_zeta),
        "eta_mean": fitted.eta_mean,
        "eta_cov": fitted.eta_cov,
        "loglik_path": np.asarray(fitted.loglik_path, dtype=float),
        "mode": np.array(fitted.mode),
        "n_iterations": np.array(fitted.n_iterations),
    }
    for q, blk in enumerate(fitted.k_blocks):
        payload[f"k_block_{q}"] = blk
    payload["n_k_blocks"] = np.array(len(fitted.k_blocks))
    if fitted.basis.t_centroids is not None:
        payload["t_centroids"] = fitted.basis.t_centroids
        payload["t_aperture"] = np.array(fitted.basis.t_aperture)
    if fitted.params is not None:
        payload["params_theta1"] = fitted.params.theta1
        payload["params_theta2"] = fitted.params.theta2
        if fitted.params.theta3 is not None:
            payload["params_theta3"] = fitted.params.theta3
        payload["params_sigma2_zeta"] = np.array(fitted.params.sigma2_zeta)
    if fitted.data is not None:
        _, coords, times = points_to_arrays(fitted.data.points)
        payload["data_coords"] = coords
        payload["data_times"] = times
        payload["data_z"] = fitted.data.z
        payload["data_sigma_eps"] = fitted.data.sigma_eps
        payload["data_mu_eps"] = fitted.data.mu_eps
        payload["zeta_mean"] = fitted.zeta_mean
        payload["zeta_var"] = fitted.zeta_var
    np.savez(path, **payload)


def load_fitted(path) -> FittedFRK:
    """Read a fitted model written by save_fitted."""
    with np.load(path, allow_pickle=False) as f:
        version = int(f["version"])
        if version != SERIALIZATION_VERSION:
            raise ValueError(f"unsupported model-file version {version}")
        frame = Frame(str(f["frame"]))
        basis = BasisSet(
            frame,
            f["centroids"],
            f["apertures"],
            f["res_index"],
            t_centroids=f["t_centroids"] if "t_centroids" in f else None,
            t_aperture=float(f["t_aperture"]) if "t_aperture" in f else None,
        )
        k_blocks = [f[f"k_block_{q}"] for q in range(int(f["n_k_blocks"]))]
        params = None
        if "params_theta1" in f:
            params = FRKParams(
                f["params_theta1"],
                f["params_theta2"],
                f["params_theta3"] if "params_theta3" in f else None,
                float(f["params_sigma2_zeta"]),
            )
        data = None
        zeta_mean = zeta_var = None
        if "data_coords" in f:
            from .geometry import planar_points, sphere_points

            build = planar_points if frame is Frame.PLANAR else sphere_points
            data = Dataset(
                build(f["data_coords"], f["data_times"]),
                f["data_z"],
                f["data_sigma_eps"],
                f["data_mu_eps"],
            )
            zeta_mean = f["zeta_mean"]
            zeta_var = f["zeta_var"]
        return FittedFRK(
            basis=basis,
            k_blocks=k_blocks,
            sigma2_zeta=float(f["sigma2_zeta"]),
            eta_mean=f["eta_mean"],
            eta_cov=f["eta_cov"],
            loglik_path=list(f["loglik_path"]),
            data=data,
            zeta_mean=zeta_mean,
            zeta_var=zeta_var,
            params=params,
            mode=str(f["mode"]),
            n_iterations=int(f["n_iterations"]),
        )
