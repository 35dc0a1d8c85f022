"""Bias of a transported ATE when treatment-effect modifiers are unobserved.

Under a linear CATE ``tau(x) = <delta, x>`` and a covariance matrix shared by
the trial and the target population, an estimator that adjusts only for the
observed covariates converges to ``tau + bias`` with::

    bias = -sum_j delta_j * (shift_j - Sigma_{j,obs} Sigma_{obs,obs}^{-1} shift_obs)

where ``shift = E[X] - E[X | S=1]``.  The sign convention throughout is
``bias = E[tau_hat_obs] - tau``.

The module also provides the sensitivity procedures for each missingness
location, an R-learner for the CATE coefficients, proxy attenuation
formulas, linear imputation and the partial R^2 rescaling.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted

from .data import (
    CombinedSample,
    CovariatePattern,
    CovSource,
    MissingLocation,
    MomentSummary,
    detect_pattern,
    estimate_moments,
)
from .estimators import AteEstimate, EstimatorKind, difference_in_means, g_formula
from .exceptions import (
    InputError,
    MissingBlock,
    MissingShift,
    NonPositiveVariance,
    PatternMismatch,
    SingularCovariance,
    ZeroDenominator,
)
from .kernels import box_m_test, fit_ols, hc0_covariance, kernel_regress, silverman_bandwidth, spd_solve

logger = logging.getLogger(__name__)

SIGN_CONVENTION = "bias = E[tau_hat_obs] - tau"


# -- closed-form bias ------------------------------------------------------


@dataclass(frozen=True)
class BiasReport:
    """Asymptotic bias split into per-covariate contributions.

    ``bias == -sum(delta[j] * (shift[j] - estimated_terms[j]))`` over the
    missing covariates, and ``per_covariate_terms`` holds each summand.
    """

    bias: float
    per_covariate_terms: dict
    estimated_terms: dict
    shifts: dict
    deltas: dict
    free_parameters: dict
    assumptions: dict = field(default_factory=dict)

    def recompute(self) -> float:
        return -sum(self.deltas[k] * (self.shifts[k] - self.estimated_terms[k]) for k in self.deltas)

    def to_dict(self) -> dict:
        return {
            "bias": self.bias,
            "sign_convention": SIGN_CONVENTION,
            "per_covariate_terms": self.per_covariate_terms,
            "estimated_terms": self.estimated_terms,
            "shifts": self.shifts,
            "deltas": self.deltas,
            "free_parameters": self.free_parameters,
            "assumptions": self.assumptions,
        }


def correction_terms(moments: MomentSummary, mis, obs) -> np.ndarray:
    """``Sigma_{j,obs} Sigma_{obs,obs}^{-1} (E[X_obs] - E[X_obs|S=1])`` for each ``j`` in ``mis``."""
    mis, obs = list(mis), list(obs)
    if not obs:
        return np.zeros(len(mis))
    S_oo = moments.block(obs, obs)
    S_mo = moments.block(mis, obs)
    w = spd_solve(S_oo, moments.shift(obs), tol=1e-10, error=SingularCovariance,
                  what="observed covariance block")
    return S_mo @ w


def _as_override(values, names, mis) -> dict:
    if values is None:
        return {}
    if isinstance(values, dict):
        return {names.index(k) if isinstance(k, str) else int(k): float(v) for k, v in values.items()}
    values = np.atleast_1d(np.asarray(values, dtype=float))
    if values.size != len(mis):
        raise InputError(f"shift_override has {values.size} entries for {len(mis)} missing covariates")
    return {j: float(v) for j, v in zip(mis, values) if not np.isnan(v)}


def theoretical_bias(
    delta_mis,
    moments: MomentSummary,
    pattern: CovariatePattern,
    shift_override=None,
    mis=None,
) -> BiasReport:
    """Asymptotic bias of an estimator adjusting for ``pattern.obs_idx`` only.

    Parameters
    ----------
    delta_mis : array of length ``|mis|``
        CATE coefficients of the missing covariates.
    moments : MomentSummary
        Supplies the shifts and covariance blocks.
    pattern : CovariatePattern
    shift_override : array or dict, optional
        Replaces ``E[X_j] - E[X_j|S=1]`` for the listed missing covariates;
        required when the shift cannot be estimated.  ``NaN`` entries fall
        back to the estimate.
    mis : sequence of int, optional
        Subset of missing covariates to include (defaults to all).

    Notes
    -----
    A covariate absent from both strata has no estimable covariance with the
    observed ones; it is treated as independent of them and the report sets
    ``assumptions["independence_assumed"]``.
    """
    mis = list(pattern.mis_idx if mis is None else mis)
    obs = list(pattern.obs_idx)
    names = list(moments.covariate_names)
    delta = np.atleast_1d(np.asarray(delta_mis, dtype=float))
    if delta.size != len(mis):
        raise InputError(f"{delta.size} coefficients for {len(mis)} missing covariates")
    override = _as_override(shift_override, names, mis)

    independent = [j for j in mis if pattern.location(j) is MissingLocation.TOTALLY_MISSING]
    correlated = [j for j in mis if j not in independent]
    terms = dict.fromkeys(mis, 0.0)
    if correlated and obs:
        terms.update(zip(correlated, correction_terms(moments, correlated, obs)))

    shifts, sources = {}, {}
    for j in mis:
        if j in override:
            shifts[j], sources[names[j]] = override[j], "supplied"
            continue
        try:
            shifts[j] = float(moments.shift(j)[0])
        except MissingBlock:
            raise MissingShift(
                f"shift of '{names[j]}' is not estimable from the data; supply it"
            ) from None
        sources[names[j]] = "estimated"

    contrib = {names[j]: float(-d * (shifts[j] - terms[j])) for j, d in zip(mis, delta)}
    return BiasReport(
        bias=float(sum(contrib.values())),
        per_covariate_terms=contrib,
        estimated_terms={names[j]: float(terms[j]) for j in mis},
        shifts={names[j]: shifts[j] for j in mis},
        deltas={names[j]: float(d) for j, d in zip(mis, delta)},
        free_parameters={"delta_mis": "supplied", "shift": sources},
        assumptions={
            "independence_assumed": [names[j] for j in independent],
            "cov_source": moments.cov_source.value,
        },
    )


# -- R-learner -------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RobinsonFit:
    """CATE coefficients from residual-on-residual regression."""

    delta: np.ndarray
    standard_errors: np.ndarray
    covariate_names: tuple
    stage1: object = None
    e1: float = 0.5
    bandwidth: np.ndarray | None = None

    def coefficient(self, name) -> float:
        return float(self.delta[self.covariate_names.index(name)])

    def standard_error(self, name) -> float:
        return float(self.standard_errors[self.covariate_names.index(name)])

    def to_dict(self) -> dict:
        return {
            "delta": dict(zip(self.covariate_names, map(float, self.delta))),
            "standard_errors": dict(zip(self.covariate_names, map(float, self.standard_errors))),
            "e1": self.e1,
        }


class RLearner(BaseEstimator):
    """Partially linear CATE model ``Y = g(X) + A <delta, X> + noise``.

    Stage one regresses ``Y`` on ``X`` (leave-one-out kernel smoother or OLS);
    stage two regresses ``Y - m(X)`` on ``(A - e1) X`` without an intercept.
    Standard errors are heteroskedasticity-robust (HC0).

    Parameters
    ----------
    e1 : float
        Known treatment probability in the trial.
    stage1 : {"kernel", "linear"}
    bandwidth : "silverman" or float or array
    """

    def __init__(self, e1=0.5, stage1="kernel", bandwidth="silverman"):
        self.e1 = e1
        self.stage1 = stage1
        self.bandwidth = bandwidth

    def fit(self, X, y, treatment):
        X = check_array(X)
        y = np.asarray(y, dtype=float)
        a = np.asarray(treatment, dtype=float)
        if not 0 < self.e1 < 1:
            raise InputError("treatment probability e1 must lie in (0, 1)")
        if self.stage1 == "kernel":
            h = silverman_bandwidth(X) if isinstance(self.bandwidth, str) else self.bandwidth
            self.bandwidth_ = np.broadcast_to(np.asarray(h, float), (X.shape[1],)).copy()
            m_hat = kernel_regress(X, y, self.bandwidth_)
            self.stage1_ = "kernel"
        elif self.stage1 == "linear":
            self.bandwidth_ = None
            # only the fitted values matter here, so aliased columns are harmless
            self.stage1_ = fit_ols(X, y, drop_aliased=True)
            m_hat = self.stage1_.predict(X)
        else:
            raise InputError(f"unknown stage-one regressor {self.stage1!r}")
        y_res = y - m_hat
        Z = (a - self.e1)[:, None] * X
        fit = fit_ols(Z, y_res, fit_intercept=False)
        resid = y_res - Z @ fit.coefficients
        cov = hc0_covariance(Z, resid, fit.bread)
        self.coef_ = np.asarray(fit.coefficients)
        self.stderr_ = np.sqrt(np.clip(np.diag(cov), 0, None))
        self.n_features_in_ = X.shape[1]
        return self

    def predict(self, X):
        """CATE ``<delta, x>`` at each row."""
        check_is_fitted(self, "coef_")
        return check_array(X) @ self.coef_


def robinson_rlearner(sample: CombinedSample, e1: float = 0.5, stage1: str = "kernel",
                      covariates=None, bandwidth="silverman") -> RobinsonFit:
    """Fit the R-learner on the trial rows of ``sample``.

    ``covariates`` defaults to every covariate observed in the trial.
    """
    if covariates is None:
        seen = ~np.isnan(sample.covariates[sample.trial_mask]).any(axis=0)
        idx = list(np.flatnonzero(seen))
    else:
        idx = sample.index_of(covariates)
    X = sample.trial_covariates(idx)
    if np.isnan(X).any():
        names = [sample.covariate_names[j] for j in idx if np.isnan(sample.covariates[sample.trial_mask, j]).any()]
        raise MissingBlock(f"covariate(s) {names} are not observed in the trial")
    model = RLearner(e1, stage1, bandwidth).fit(X, sample.trial_outcome, sample.trial_treatment)
    return RobinsonFit(
        delta=model.coef_,
        standard_errors=model.stderr_,
        covariate_names=tuple(sample.covariate_names[j] for j in idx),
        stage1=model.stage1_,
        e1=e1,
        bandwidth=model.bandwidth_,
    )


# -- sensitivity grids -----------------------------------------------------


@dataclass(frozen=True, eq=False)
class SensitivityGrid:
    """Bias over a lattice of (CATE coefficient, shift) values.

    ``bias[i, k]`` corresponds to ``delta_axis[i]`` and ``shift_axis[k]``.
    """

    delta_axis: np.ndarray
    shift_axis: np.ndarray
    bias: np.ndarray
    threshold: float | None = None
    point_marker: dict | None = None
    metadata: dict = field(default_factory=dict)

    def rows(self):
        for i, d in enumerate(self.delta_axis):
            for k, s in enumerate(self.shift_axis):
                yield float(d), float(s), float(self.bias[i, k])


def _axis(values) -> np.ndarray:
    a = np.atleast_1d(np.asarray(values, dtype=float))
    if a.size == 0 or not np.all(np.isfinite(a)):
        raise InputError("grid axes must be non-empty and finite")
    return a


def procedure_totally_missing(delta_range, shift_range, threshold: float | None = None,
                              correction: float = 0.0) -> SensitivityGrid:
    """Bias ``-delta * (shift - correction)`` for a covariate missing everywhere.

    The covariate is assumed independent of the observed ones, so the
    correction term is 0 unless supplied.
    """
    d, s = _axis(delta_range), _axis(shift_range)
    bias = -np.outer(d, s - correction)
    return SensitivityGrid(
        d, s, bias, threshold,
        metadata={
            "pattern": MissingLocation.TOTALLY_MISSING.value,
            "sign_convention": SIGN_CONVENTION,
            "correction_term": float(correction),
            "assumptions": {"independence_assumed": True},
        },
    )


def _pick_missing(pattern: CovariatePattern, where: MissingLocation, missing, names) -> int:
    if missing is None:
        cands = [j for j in pattern.mis_idx if pattern.location(j) is where]
        if len(cands) != 1:
            raise PatternMismatch(
                f"expected exactly one covariate {where.value}, found {[names[j] for j in cands]}"
            )
        return cands[0]
    j = names.index(missing) if isinstance(missing, str) else int(missing)
    if pattern.location(j) is not where:
        raise PatternMismatch(
            f"covariate '{names[j]}' is not {where.value} "
            f"(detected: {pattern.location(j).value if pattern.location(j) else 'observed'})"
        )
    return j


def box_m_observed(sample: CombinedSample, covariates) -> dict:
    """Box's M test between strata on the given (fully observed) covariates."""
    Xt, Xo = sample.trial_covariates(covariates), sample.obs_covariates(covariates)
    if np.isnan(Xt).any() or np.isnan(Xo).any():
        raise MissingBlock("Box's M test needs covariates observed in both strata")
    ct = np.atleast_2d(np.cov(Xt, rowvar=False))
    co = np.atleast_2d(np.cov(Xo, rowvar=False))
    return box_m_test(ct, Xt.shape[0], co, Xo.shape[0]).to_dict()


def default_threshold(sample: CombinedSample, pattern: CovariatePattern | None = None) -> float:
    """``|tau_hat_obs - tau_hat_DM|`` with a linear G-formula on the observed covariates."""
    return abs(g_formula(sample, pattern).value - difference_in_means(sample).value)


def procedure_missing_in_rct(sample: CombinedSample, pattern: CovariatePattern | None,
                             delta_range, shift_range, threshold: float | None = None,
                             missing=None, marker: dict | None = None) -> SensitivityGrid:
    """Sensitivity grid for a covariate observed only in the observational rows.

    The covariance blocks and the observed-covariate shifts are estimated
    from the data; the CATE coefficient and the covariate's own shift are the
    grid axes.  Box's M test on the observed covariates is attached as a
    check of the shared-covariance assumption.
    """
    pattern = pattern or detect_pattern(sample)
    names = list(sample.covariate_names)
    j = _pick_missing(pattern, MissingLocation.MISSING_IN_TRIAL, missing, names)
    moments = estimate_moments(sample, pattern, CovSource.OBSERVATIONAL)
    c = float(correction_terms(moments, [j], pattern.obs_idx)[0])
    d, s = _axis(delta_range), _axis(shift_range)
    if threshold is None:
        threshold = default_threshold(sample, pattern)
    box = box_m_observed(sample, list(pattern.obs_idx)) if len(pattern.obs_idx) else None
    return SensitivityGrid(
        d, s, -np.outer(d, s - c), threshold, marker,
        metadata={
            "pattern": MissingLocation.MISSING_IN_TRIAL.value,
            "covariate": names[j],
            "sign_convention": SIGN_CONVENTION,
            "correction_term": c,
            "assumptions": {"shared_covariance_box_m": box},
        },
    )


def procedure_missing_in_obs(sample: CombinedSample, pattern: CovariatePattern | None,
                             expectation_range, e1: float = 0.5, stage1: str = "kernel",
                             missing=None) -> list[AteEstimate]:
    """Target ATE for each hypothesized mean of a covariate absent from the target rows.

    The CATE coefficients are learned on the trial (all covariates observed
    there); the target ATE is ``<delta_obs, E[X_obs]> + delta_mis * E[X_mis]``.
    """
    pattern = pattern or detect_pattern(sample)
    names = list(sample.covariate_names)
    j = _pick_missing(pattern, MissingLocation.MISSING_IN_OBSERVATIONAL, missing, names)
    obs = list(pattern.obs_idx)
    fit = robinson_rlearner(sample, e1, stage1, covariates=obs + [j])
    d_obs, d_mis = fit.delta[:-1], float(fit.delta[-1])
    base = float(d_obs @ sample.obs_covariates(obs).mean(axis=0)) if obs else 0.0
    out = []
    for e in _axis(expectation_range):
        out.append(AteEstimate(
            base + d_mis * float(e), EstimatorKind.LINEAR_CATE, fit.covariate_names,
            sample.n, sample.m,
            diagnostics={"hypothesized_mean": float(e), "covariate": names[j],
                         "delta_mis": d_mis, "delta_mis_se": float(fit.standard_errors[-1])},
        ))
    return out


# -- imputation --------------------------------------------------------------


class LinearImputer(TransformerMixin, BaseEstimator):
    """Fill a stratum-wide missing covariate from the observed ones by OLS.

    The regression is fitted on the stratum where the covariate is observed
    and applied to the other stratum; observed cells are never changed.
    """

    def __init__(self, covariates=None):
        self.covariates = covariates

    def fit(self, sample: CombinedSample, y=None):
        pattern = detect_pattern(sample)
        targets = (
            [j for j in pattern.mis_idx if pattern.location(j) is not MissingLocation.TOTALLY_MISSING]
            if self.covariates is None else sample.index_of(self.covariates)
        )
        obs = list(pattern.obs_idx)
        self.models_ = {}
        for j in targets:
            loc = pattern.location(j)
            if loc is MissingLocation.MISSING_IN_TRIAL:
                rows = sample.obs_mask
            elif loc is MissingLocation.MISSING_IN_OBSERVATIONAL:
                rows = sample.trial_mask
            else:
                raise PatternMismatch(
                    f"covariate '{sample.covariate_names[j]}' must be observed in exactly one stratum"
                )
            self.models_[j] = (loc, fit_ols(sample.covariates[np.ix_(rows, obs)], sample.covariates[rows, j]))
        self.obs_idx_ = obs
        return self

    def transform(self, sample: CombinedSample) -> CombinedSample:
        check_is_fitted(self, "models_")
        X = np.array(sample.covariates)
        for j, (loc, fit) in self.models_.items():
            rows = sample.trial_mask if loc is MissingLocation.MISSING_IN_TRIAL else sample.obs_mask
            X[rows, j] = fit.predict(X[np.ix_(rows, self.obs_idx_)])
        meta = dict(sample.metadata)
        meta["imputed"] = [sample.covariate_names[j] for j in self.models_]
        return sample.replace(covariates=X, metadata=meta)


def linear_impute(sample: CombinedSample, pattern: CovariatePattern | None = None,
                  covariates=None) -> CombinedSample:
    return LinearImputer(covariates).fit(sample).transform(sample)


def data_driven_delta(sample: CombinedSample, pattern: CovariatePattern | None = None,
                      missing=None, e1: float = 0.5, stage1: str = "kernel",
                      return_fit: bool = False):
    """CATE coefficient of a covariate missing from the trial, via imputation.

    The covariate is predicted in the trial from the observed covariates
    (model fitted on the observational rows) and the R-learner is run on the
    imputed trial.  When the covariate is weakly explained by the observed
    ones the estimate is attenuated towards the coefficients of its
    correlates.
    """
    pattern = pattern or detect_pattern(sample)
    names = list(sample.covariate_names)
    j = _pick_missing(pattern, MissingLocation.MISSING_IN_TRIAL, missing, names)
    filled = linear_impute(sample, pattern, covariates=[j])
    fit = robinson_rlearner(filled, e1, stage1, covariates=list(pattern.obs_idx) + [j])
    return fit if return_fit else float(fit.delta[-1])


# -- proxies -----------------------------------------------------------------


def _check_sigmas(sigma_mis, sigma_prox):
    if not sigma_mis > 0:
        raise NonPositiveVariance("sigma_mis must be positive")
    if not sigma_prox >= 0:
        raise NonPositiveVariance("sigma_prox must be non-negative")


def proxy_bias(delta_mis: float, shift: float, sigma_mis: float, sigma_prox: float) -> float:
    """Bias left when a missing covariate is replaced by ``X + noise``."""
    _check_sigmas(sigma_mis, sigma_prox)
    if np.isinf(sigma_prox):
        return -delta_mis * shift
    vm, vp = sigma_mis**2, sigma_prox**2
    return float(-delta_mis * shift * (1.0 - vm / (vm + vp)))


def proxy_bias_estimated(delta_prox_hat: float, shift_prox: float, sigma_mis: float,
                         sigma_prox: float) -> float:
    """Same bias written with the (attenuated) coefficient fitted on the proxy."""
    _check_sigmas(sigma_mis, sigma_prox)
    return float(-delta_prox_hat * shift_prox * sigma_prox**2 / sigma_mis**2)


def proxy_curve(delta_mis: float, shift: float, sigma_mis: float, sigma_prox_values) -> np.ndarray:
    return np.array([proxy_bias(delta_mis, shift, sigma_mis, s) for s in _axis(sigma_prox_values)])


# -- partial R^2 -------------------------------------------------------------


def partial_r2(delta_mis: float, var_mis: float, obs_fit: RobinsonFit,
               moments: MomentSummary) -> float:
    """Share of CATE variance carried by the missing covariate relative to the observed part.

    ``delta_mis^2 var_mis / (delta_obs' Sigma_obs,obs delta_obs)``.
    """
    if var_mis < 0:
        raise NonPositiveVariance("var_mis must be non-negative")
    names = list(moments.covariate_names)
    idx = [names.index(k) for k in obs_fit.covariate_names]
    d = np.asarray(obs_fit.delta, dtype=float)
    denom = float(d @ moments.block(idx, idx) @ d)
    if not denom > 0:
        raise ZeroDenominator("observed CATE variance is zero")
    return float(delta_mis**2 * var_mis / denom)
