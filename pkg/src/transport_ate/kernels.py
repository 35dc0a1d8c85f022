"""Numerical primitives shared by the estimators and the sensitivity tools.

Linear and logistic regression, Gaussian conditional expectations,
Nadaraya-Watson smoothing and Box's M test for equal covariance matrices.
Every fit is a pure function of its inputs and returns an immutable record.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
from scipy import stats
from scipy.linalg import lapack, solve_triangular
from scipy.special import expit
from sklearn.base import BaseEstimator, RegressorMixin
from sklearn.utils.validation import check_array, check_is_fitted, check_X_y

from .data import CovariatePattern, MomentSummary
from .exceptions import InputError, SingularCovariance, SingularDesign

PROB_CLIP = 1e-12
PIVOT_TOL = 1e-12
LOGLIK_ROUNDING = 64 * np.finfo(float).eps


def pivoted_cholesky(A: np.ndarray, tol: float = PIVOT_TOL):
    """Cholesky factor of a symmetric PSD matrix with symmetric pivoting.

    Returns ``(L, perm, rank)`` with ``A[perm][:, perm] = L @ L.T`` on the
    leading ``rank`` block.  ``tol`` is relative to the largest diagonal entry.
    """
    A = np.asarray(A, dtype=float)
    scale = float(np.max(np.abs(np.diag(A)))) if A.size else 0.0
    if A.size == 0 or scale == 0.0 or not np.isfinite(scale):
        return np.zeros_like(A), np.arange(A.shape[0]), 0
    L, piv, rank, info = lapack.dpstrf(A, lower=1, tol=tol * scale)
    if info < 0:
        raise ArithmeticError(f"dpstrf failed with info={info}")
    return np.tril(L), piv - 1, int(rank)


def spd_solve(A: np.ndarray, B: np.ndarray, tol: float = PIVOT_TOL, error=SingularDesign, what="matrix"):
    """Solve ``A X = B`` for symmetric positive-definite ``A``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.asarray(B, dtype=float)
    L, perm, rank = pivoted_cholesky(A, tol)
    q = A.shape[0]
    if rank < q:
        raise error(f"{what} is numerically singular (rank {rank} < {q})")
    Bp = B[perm]
    Z = solve_triangular(L, Bp, lower=True)
    Xp = solve_triangular(L.T, Z, lower=False)
    X = np.empty_like(Xp)
    X[perm] = Xp
    return X


def spd_inverse(A, tol: float = PIVOT_TOL, error=SingularDesign, what="matrix"):
    A = np.atleast_2d(A)
    return spd_solve(A, np.eye(A.shape[0]), tol, error, what)


# -- ordinary least squares ------------------------------------------------


@dataclass(frozen=True, eq=False)
class LinearFit:
    """Affine predictor ``intercept + X @ coefficients``."""

    intercept: float
    coefficients: np.ndarray
    residual_variance: float
    n_obs: int = 0
    bread: np.ndarray | None = field(default=None, repr=False)

    def predict(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None] if self.coefficients.size == 1 else X[None, :]
        return self.intercept + X @ self.coefficients


def fit_ols(X, y, ridge: float = 0.0, fit_intercept: bool = True,
            drop_aliased: bool = False) -> LinearFit:
    """Least squares with an optional ridge penalty on the slopes only.

    The normal equations are solved by pivoted Cholesky; with ``ridge == 0``
    a rank-deficient design raises :class:`SingularDesign`, unless
    ``drop_aliased`` is set, in which case columns found linearly dependent
    on earlier pivots get a zero coefficient.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    n, q = X.shape
    if y.shape != (n,):
        raise InputError(f"response has shape {y.shape}, expected ({n},)")
    if ridge < 0:
        raise InputError("ridge must be non-negative")
    if ridge == 0 and n < q + int(fit_intercept):
        raise SingularDesign(f"{n} rows cannot identify {q + int(fit_intercept)} parameters")

    if fit_intercept:
        x_bar, y_bar = X.mean(axis=0), y.mean()
        Xc, yc = X - x_bar, y - y_bar
    else:
        x_bar, y_bar = np.zeros(q), 0.0
        Xc, yc = X, y
    if q == 0:
        coef = np.zeros(0)
        bread = np.zeros((0, 0))
    else:
        G = Xc.T @ Xc
        if ridge:
            G = G + ridge * np.eye(q)
        elif drop_aliased:
            _, perm, rank = pivoted_cholesky(G)
            if rank < q:
                keep = np.sort(perm[:rank])
                sub = fit_ols(X[:, keep], y, fit_intercept=fit_intercept)
                coef = np.zeros(q)
                coef[keep] = sub.coefficients
                coef.setflags(write=False)
                return LinearFit(sub.intercept, coef, sub.residual_variance, n, None)
        bread = spd_inverse(G, what="design matrix")
        coef = spd_solve(G, Xc.T @ yc, what="design matrix")
    intercept = float(y_bar - x_bar @ coef)
    resid = yc - Xc @ coef
    dof = max(n - q - int(fit_intercept), 1)
    rv = float(resid @ resid) / dof
    bread.setflags(write=False)
    coef.setflags(write=False)
    return LinearFit(intercept, coef, max(rv, 0.0), n, bread)


def hc0_covariance(X, residuals, bread=None) -> np.ndarray:
    """White's heteroskedasticity-robust covariance ``B (X' diag(e^2) X) B``."""
    X = np.asarray(X, dtype=float)
    if bread is None:
        bread = spd_inverse(X.T @ X, what="design matrix")
    meat = (X * residuals[:, None] ** 2).T @ X
    return bread @ meat @ bread


# -- logistic regression ---------------------------------------------------


@dataclass(frozen=True, eq=False)
class LogisticFit:
    """Logistic model ``P(s=1|x) = expit(intercept + x @ coefficients)``."""

    intercept: float
    coefficients: np.ndarray
    converged: bool
    iterations: int
    standard_errors: np.ndarray | None = None
    loglik_path: tuple = ()

    def decision_function(self, X) -> np.ndarray:
        X = np.asarray(X, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        return self.intercept + X @ self.coefficients

    def predict_proba(self, X) -> np.ndarray:
        """Probabilities clipped to ``[1e-12, 1 - 1e-12]``."""
        return np.clip(expit(self.decision_function(X)), PROB_CLIP, 1 - PROB_CLIP)

    def odds(self, X) -> np.ndarray:
        p = self.predict_proba(X)
        return p / (1 - p)


def _loglik(eta, s):
    return float(np.sum(s * eta - np.logaddexp(0.0, eta)))


def fit_logistic(X, s, max_iter: int = 100, tol: float = 1e-8) -> LogisticFit:
    """Maximum likelihood logistic regression by IRLS with step halving.

    The log-likelihood never decreases across iterations.  Convergence is
    declared once ``max |score| < tol``; under separation the fit stops at
    ``max_iter`` with ``converged=False`` and growing coefficients.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    s = np.asarray(s, dtype=float)
    n, q = X.shape
    if s.shape != (n,):
        raise InputError("label vector does not match the design")
    if not np.all((s == 0) | (s == 1)):
        raise InputError("labels must be 0 or 1")
    if s.min() == s.max():
        raise InputError("both classes must be present")

    D = np.column_stack([np.ones(n), X])
    frac = s.mean()
    beta = np.zeros(q + 1)
    beta[0] = np.log(frac / (1 - frac))
    eta = D @ beta
    ll = _loglik(eta, s)
    path = [ll]
    converged = False
    it = 0
    for it in range(1, max_iter + 1):
        p = expit(eta)
        score = D.T @ (s - p)
        if np.max(np.abs(score)) < tol:
            converged = True
            it -= 1
            break
        w = p * (1 - p)
        H = (D * w[:, None]).T @ D
        try:
            step = spd_solve(H, score, what="logistic information matrix")
        except SingularDesign:
            if np.max(w) < 1e-10:  # separated data: information vanishes
                break
            raise
        # near the optimum the gain is below the rounding error of the sum
        slack = LOGLIK_ROUNDING * (abs(ll) + 1.0)
        t = 1.0
        for _ in range(40):
            cand = beta + t * step
            eta_c = D @ cand
            ll_c = _loglik(eta_c, s)
            if ll_c >= ll - slack:
                break
            t *= 0.5
        else:
            break
        beta, eta, ll = cand, eta_c, ll_c
        path.append(ll)
    else:
        p = expit(eta)
        converged = bool(np.max(np.abs(D.T @ (s - p))) < tol)

    p = expit(eta)
    if converged and np.all(np.abs(s - p) < 1e-6):
        # the score vanishes along a separating direction without a finite optimum
        converged = False
    w = p * (1 - p)
    try:
        se = np.sqrt(np.diag(spd_inverse((D * w[:, None]).T @ D)))
    except SingularDesign:
        se = np.full(q + 1, np.inf)
    return LogisticFit(
        intercept=float(beta[0]),
        coefficients=beta[1:].copy(),
        converged=converged,
        iterations=it,
        standard_errors=se,
        loglik_path=tuple(path),
    )


# -- Gaussian conditional expectation ---------------------------------------


@dataclass(frozen=True, eq=False)
class ConditionalGaussian:
    """``E[X_mis | X_obs = x] = base + slope @ (x - obs_mean)``."""

    base: np.ndarray
    slope: np.ndarray
    obs_mean: np.ndarray
    obs_idx: tuple
    mis_idx: tuple
    condition_number: float

    def predict(self, x_obs) -> np.ndarray:
        """One row (1-D input) or a matrix of rows of observed covariates."""
        x = np.asarray(x_obs, dtype=float)
        single = x.ndim <= 1
        x = x.reshape(1, -1) if single else x
        out = self.base + (x - self.obs_mean) @ self.slope.T
        return out[0] if single else out


def conditional_gaussian(
    moments: MomentSummary,
    pattern: CovariatePattern,
    stratum: str = "target",
    mis=None,
    obs=None,
) -> ConditionalGaussian:
    """Gaussian regression of the missing covariates on the observed ones.

    ``stratum`` selects whose means anchor the prediction (``"target"`` or
    ``"trial"``); the covariance comes from ``moments.cov``.
    """
    obs_idx = tuple(pattern.obs_idx if obs is None else obs)
    mis_idx = tuple(pattern.mis_idx if mis is None else mis)
    mean = {"target": moments.target_mean, "trial": moments.trial_mean}[stratum]
    S_oo = moments.block(obs_idx, obs_idx) if obs_idx else np.zeros((0, 0))
    S_mo = moments.block(mis_idx, obs_idx) if obs_idx else np.zeros((len(mis_idx), 0))
    if obs_idx:
        slope = spd_solve(S_oo, S_mo.T, tol=1e-10, error=SingularCovariance,
                          what="observed covariance block").T
        ev = np.linalg.eigvalsh(S_oo)
        cond = float(ev[-1] / ev[0]) if ev[0] > 0 else np.inf
        obs_mean = mean(list(obs_idx))
    else:
        slope, cond, obs_mean = np.zeros((len(mis_idx), 0)), 1.0, np.zeros(0)
    return ConditionalGaussian(
        base=mean(list(mis_idx)),
        slope=slope,
        obs_mean=obs_mean,
        obs_idx=obs_idx,
        mis_idx=mis_idx,
        condition_number=cond,
    )


# -- kernel regression -----------------------------------------------------


def silverman_bandwidth(X) -> np.ndarray:
    """Per-dimension normal-reference bandwidth ``(4/(d+2))^(1/(d+4)) n^(-1/(d+4)) sd_j``."""
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    n, d = X.shape
    sd = X.std(axis=0, ddof=1) if n > 1 else np.ones(d)
    sd = np.where(sd > 0, sd, 1.0)
    return (4.0 / (d + 2)) ** (1.0 / (d + 4)) * n ** (-1.0 / (d + 4)) * sd


def kernel_regress(X, y, bandwidth, query=None, leave_one_out: bool | None = None,
                   chunk: int = 512) -> np.ndarray:
    """Nadaraya-Watson regression with a Gaussian product kernel.

    With ``query=None`` predictions are made at the training rows and each
    row's own observation is left out (override with ``leave_one_out``).
    Rows whose kernel weights all vanish get the global mean of ``y``.
    """
    X = np.asarray(X, dtype=float)
    if X.ndim == 1:
        X = X[:, None]
    y = np.asarray(y, dtype=float)
    h = np.broadcast_to(np.asarray(bandwidth, dtype=float), (X.shape[1],))
    if np.any(~(h > 0)):
        raise InputError("bandwidth must be positive")
    if query is None:
        Q = X
        loo = True if leave_one_out is None else leave_one_out
    else:
        Q = np.asarray(query, dtype=float)
        if Q.ndim == 1:
            Q = Q[:, None] if X.shape[1] == 1 else Q[None, :]
        loo = bool(leave_one_out)
        if loo and Q.shape != X.shape:
            raise InputError("leave-one-out needs the query to be the training rows")
    Xs, Qs = X / h, Q / h
    x_sq = np.sum(Xs**2, axis=1)
    fallback = float(y.mean())
    out = np.empty(Q.shape[0])
    for start in range(0, Q.shape[0], chunk):
        stop = min(start + chunk, Q.shape[0])
        q = Qs[start:stop]
        d2 = np.sum(q**2, axis=1)[:, None] + x_sq[None, :] - 2.0 * q @ Xs.T
        np.maximum(d2, 0.0, out=d2)
        if loo:
            d2[np.arange(stop - start), np.arange(start, stop)] = np.inf
        d2 -= d2.min(axis=1, keepdims=True)
        w = np.exp(-0.5 * d2)
        w[~np.isfinite(w)] = 0.0
        tot = w.sum(axis=1)
        ok = tot > 0
        res = np.full(stop - start, fallback)
        res[ok] = (w[ok] @ y) / tot[ok]
        out[start:stop] = res
    return out


class NadarayaWatson(RegressorMixin, BaseEstimator):
    """Gaussian-kernel smoother.

    Parameters
    ----------
    bandwidth : float, array or "silverman"
        Kernel scale per dimension.
    """

    def __init__(self, bandwidth="silverman"):
        self.bandwidth = bandwidth

    def fit(self, X, y):
        X, y = check_X_y(X, y, y_numeric=True)
        self.X_fit_, self.y_fit_ = X, y.astype(float)
        if isinstance(self.bandwidth, str):
            if self.bandwidth != "silverman":
                raise InputError(f"unknown bandwidth rule {self.bandwidth!r}")
            self.bandwidth_ = silverman_bandwidth(X)
        else:
            self.bandwidth_ = np.broadcast_to(np.asarray(self.bandwidth, float), (X.shape[1],)).copy()
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        check_is_fitted(self, "X_fit_")
        X = check_array(X)
        return kernel_regress(self.X_fit_, self.y_fit_, self.bandwidth_, query=X)

    def loo_predict(self):
        """Leave-one-out predictions at the training rows."""
        check_is_fitted(self, "X_fit_")
        return kernel_regress(self.X_fit_, self.y_fit_, self.bandwidth_)


# -- Box's M test ------------------------------------------------------------


@dataclass(frozen=True)
class BoxMResult:
    statistic: float
    dof: int
    p_value: float
    approximation: str = "chi2"

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "dof": self.dof,
                "p_value": self.p_value, "approximation": self.approximation}


def _logdet_pd(S, label):
    sign, val = np.linalg.slogdet(S)
    if sign <= 0 or not np.isfinite(val):
        raise SingularCovariance(f"{label} covariance is not positive definite")
    try:
        np.linalg.cholesky(S)
    except np.linalg.LinAlgError:
        raise SingularCovariance(f"{label} covariance is not positive definite") from None
    return val


def box_m_test(cov_a, n_a: int, cov_b, n_b: int) -> BoxMResult:
    """Box's M test of equal covariance matrices in two groups (chi-square form).

    ``cov_a`` and ``cov_b`` are unbiased sample covariances from groups of
    size ``n_a`` and ``n_b``.
    """
    Sa = np.atleast_2d(np.asarray(cov_a, dtype=float))
    Sb = np.atleast_2d(np.asarray(cov_b, dtype=float))
    p = Sa.shape[0]
    if Sa.shape != (p, p) or Sb.shape != (p, p):
        raise InputError("covariance matrices must be square and of equal size")
    if n_a <= p or n_b <= p:
        raise InputError(f"each group needs more than {p} rows")
    k, N = 2, n_a + n_b
    pooled = ((n_a - 1) * Sa + (n_b - 1) * Sb) / (N - k)
    la, lb = _logdet_pd(Sa, "first"), _logdet_pd(Sb, "second")
    lp = _logdet_pd(pooled, "pooled")
    M = (N - k) * lp - (n_a - 1) * la - (n_b - 1) * lb
    # log-det rounding when both matrices coincide
    if abs(M) < 1e-9 * N:
        M = 0.0
    c = (2 * p**2 + 3 * p - 1) / (6.0 * (p + 1) * (k - 1)) * (
        1.0 / (n_a - 1) + 1.0 / (n_b - 1) - 1.0 / (N - k)
    )
    stat = max(M * (1 - c), 0.0)
    dof = p * (p + 1) // 2
    return BoxMResult(float(stat), dof, float(stats.chi2.sf(stat, dof)))
