"""Target-population ATE estimators built from a trial and a covariate sample.

Four estimators are provided, each as a scikit-learn style class and as a
plain function:

* difference in means on the trial (the trial's own ATE);
* G-formula: outcome surfaces fitted per arm, averaged over the target rows;
* IPSW: trial outcomes reweighted by the inverse odds of trial membership;
* AIPSW: IPSW on outcome residuals plus the G-formula term (doubly robust).

Example
-------
>>> est = GFormula().fit(sample)          # doctest: +SKIP
>>> est.ate_                                # doctest: +SKIP
"""

from __future__ import annotations

import enum
import logging
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable

import numpy as np
from sklearn.base import BaseEstimator, clone

from .data import CombinedSample, CovariatePattern, detect_pattern
from .exceptions import (
    BootstrapFailure,
    DegenerateWeights,
    EmptyArm,
    InputError,
    MissingBlock,
    TransportError,
    ZeroDenominator,
)
from .kernels import NadarayaWatson, fit_logistic, fit_ols

logger = logging.getLogger(__name__)


class EstimatorKind(str, enum.Enum):
    DM = "dm"
    GFORMULA = "gformula"
    IPSW = "ipsw"
    AIPSW = "aipsw"
    LINEAR_CATE = "linear-cate"


@dataclass(frozen=True, eq=False)
class AteEstimate:
    """A point estimate with optional percentile bootstrap interval."""

    value: float
    estimator: EstimatorKind
    covariates_used: tuple = ()
    n: int = 0
    m: int = 0
    ci_low: float | None = None
    ci_high: float | None = None
    diagnostics: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.ci_low is not None and not (self.ci_low <= self.value <= self.ci_high):
            logger.debug("point estimate lies outside its bootstrap interval")

    def __float__(self) -> float:
        return float(self.value)

    def with_ci(self, low: float, high: float, **diag) -> "AteEstimate":
        d = dict(self.diagnostics)
        d.update(diag)
        return AteEstimate(self.value, self.estimator, self.covariates_used,
                           self.n, self.m, float(low), float(high), d)

    def to_dict(self, seed=None) -> dict:
        return {
            "estimator": self.estimator.value,
            "value": self.value,
            "ci": None if self.ci_low is None else [self.ci_low, self.ci_high],
            "n": self.n,
            "m": self.m,
            "covariates_used": list(self.covariates_used),
            "diagnostics": self.diagnostics,
            "seed": seed,
        }


@dataclass(frozen=True, eq=False)
class CrossFitPlan:
    """Random partition of the trial rows into ``k`` folds of near-equal size."""

    k: int
    fold_assignment: np.ndarray
    seed: int | None = None

    @classmethod
    def make(cls, n: int, k: int = 5, seed: int | None = 0) -> "CrossFitPlan":
        if k < 2:
            raise InputError("cross-fitting needs at least 2 folds")
        if n < k:
            raise InputError(f"cannot split {n} trial rows into {k} folds")
        perm = np.random.default_rng(seed).permutation(n)
        folds = np.empty(n, dtype=np.int64)
        folds[perm] = np.arange(n) % k
        folds.setflags(write=False)
        return cls(k, folds, seed)


# -- nuisance models -------------------------------------------------------


class _ConstantModel:
    def __init__(self, value: float):
        self.value = float(value)

    def predict(self, X):
        return np.full(np.asarray(X).shape[0], self.value)


class _LinearModel:
    def __init__(self, X, y, drop_aliased=False):
        self.fit_ = fit_ols(X, y, drop_aliased=drop_aliased)

    def predict(self, X):
        return self.fit_.predict(X)


def fit_outcome_model(kind, X, y):
    """Fit an outcome regression.

    ``kind`` is ``"linear"``, ``"linear-aliased"`` (collinear columns get a
    zero coefficient instead of raising), ``"kernel"``, ``"constant"`` or an
    sklearn regressor.
    """
    if isinstance(kind, str):
        if kind in ("linear", "linear-aliased"):
            if X.shape[1] == 0:
                return _ConstantModel(np.mean(y))
            return _LinearModel(X, y, drop_aliased=kind == "linear-aliased")
        if kind == "kernel":
            if X.shape[1] == 0:
                return _ConstantModel(np.mean(y))
            return NadarayaWatson().fit(X, y)
        if kind == "constant":
            return _ConstantModel(np.mean(y))
        raise InputError(f"unknown outcome model {kind!r}")
    return clone(kind).fit(X, y)


def fit_selection_odds(kind, X, s) -> Callable[[np.ndarray], np.ndarray]:
    """Return ``x -> P(S=1|x) / P(S=0|x)`` fitted on the stacked sample."""
    if isinstance(kind, str):
        if kind == "logistic":
            if X.shape[1] == 0:
                kind = "constant"
            else:
                fit = fit_logistic(X, s)
                if not fit.converged:
                    logger.warning("selection model did not converge after %d iterations", fit.iterations)
                return fit.odds
        if kind == "constant":
            frac = float(np.mean(s))
            return lambda Z: np.full(np.asarray(Z).shape[0], frac / (1 - frac))
        raise InputError(f"unknown selection model {kind!r}")
    model = clone(kind).fit(X, s)

    def odds(Z):
        p = np.clip(model.predict_proba(Z)[:, 1], 1e-12, 1 - 1e-12)
        return p / (1 - p)

    return odds


# -- shared plumbing -------------------------------------------------------


def _resolve_covariates(sample: CombinedSample, pattern, covariates) -> list[int]:
    pattern = pattern or detect_pattern(sample)
    if covariates is None:
        return list(pattern.obs_idx)
    idx = sample.index_of(covariates)
    bad = [sample.covariate_names[j] for j in idx if j not in pattern.obs_idx]
    if bad:
        raise MissingBlock(f"covariate(s) {bad} are not observed in both strata")
    return idx


def _trial_parts(sample: CombinedSample, min_per_arm: int = 1):
    A, Y = sample.trial_treatment, sample.trial_outcome
    n1 = int(np.count_nonzero(A == 1))
    n0 = A.size - n1
    if n1 < min_per_arm or n0 < min_per_arm:
        raise EmptyArm(
            f"need at least {min_per_arm} treated and {min_per_arm} control trial rows, "
            f"got {n1} treated and {n0} control"
        )
    if sample.m == 0:
        raise InputError("observational stratum is empty")
    return A, Y


def _check_e1(e1: float):
    if not 0 < e1 < 1:
        raise InputError("treatment probability e1 must lie in (0, 1)")


def _names(sample, idx):
    return tuple(sample.covariate_names[j] for j in idx)


def _weight_diagnostics(w: np.ndarray) -> dict:
    if not np.all(np.isfinite(w)) or np.any(w <= 0):
        raise ZeroDenominator("sampling weights must be positive and finite")
    med = float(np.median(w))
    if w.max() > 1e6 * med:
        warnings.warn(
            f"extreme sampling weights: max {w.max():.3g} vs median {med:.3g}",
            DegenerateWeights,
            stacklevel=3,
        )
    return {"weight_min": float(w.min()), "weight_max": float(w.max()), "weight_median": med}


# -- estimator classes -----------------------------------------------------


class _BaseTransport(BaseEstimator):
    kind: EstimatorKind

    def fit(self, sample: CombinedSample, pattern: CovariatePattern | None = None):
        self.estimate_ = self._estimate(sample, pattern)
        self.ate_ = self.estimate_.value
        return self

    def _estimate(self, sample, pattern) -> AteEstimate:  # pragma: no cover
        raise NotImplementedError


class DifferenceInMeans(_BaseTransport):
    """Mean treated outcome minus mean control outcome on the trial rows."""

    kind = EstimatorKind.DM

    def _estimate(self, sample, pattern=None):
        A, Y = sample.trial_treatment, sample.trial_outcome
        n1 = int(np.count_nonzero(A == 1))
        if n1 == 0 or n1 == A.size:
            raise EmptyArm(f"trial has {n1} treated and {A.size - n1} control rows")
        value = float(Y[A == 1].mean() - Y[A == 0].mean())
        return AteEstimate(value, self.kind, (), sample.n, sample.m,
                           diagnostics={"n_treated": n1, "n_control": A.size - n1})


class GFormula(_BaseTransport):
    """Outcome-model estimator.

    Parameters
    ----------
    covariates : list of str or int, optional
        Adjustment set; defaults to every covariate observed in both strata.
    outcome_model : {"linear", "kernel", "constant"} or sklearn regressor
    """

    kind = EstimatorKind.GFORMULA

    def __init__(self, covariates=None, outcome_model="linear"):
        self.covariates = covariates
        self.outcome_model = outcome_model

    def _estimate(self, sample, pattern=None):
        idx = _resolve_covariates(sample, pattern, self.covariates)
        A, Y = _trial_parts(sample, min_per_arm=2)
        Xt, Xo = sample.trial_covariates(idx), sample.obs_covariates(idx)
        mu1 = fit_outcome_model(self.outcome_model, Xt[A == 1], Y[A == 1])
        mu0 = fit_outcome_model(self.outcome_model, Xt[A == 0], Y[A == 0])
        value = float(np.mean(mu1.predict(Xo) - mu0.predict(Xo)))
        return AteEstimate(value, self.kind, _names(sample, idx), sample.n, sample.m,
                           diagnostics={"outcome_model": str(self.outcome_model)})


class IPSW(_BaseTransport):
    """Inverse probability of sampling weighting.

    Trial row ``i`` gets weight ``n / (m * odds(X_i))`` where the odds of
    trial membership come from a selection model fitted on the stacked
    sample.  ``normalize=True`` gives the ratio (Hajek) form, which divides by
    the weight total in each arm.
    """

    kind = EstimatorKind.IPSW

    def __init__(self, covariates=None, e1=0.5, normalize=False, selection_model="logistic"):
        self.covariates = covariates
        self.e1 = e1
        self.normalize = normalize
        self.selection_model = selection_model

    def _estimate(self, sample, pattern=None):
        _check_e1(self.e1)
        idx = _resolve_covariates(sample, pattern, self.covariates)
        A, Y = _trial_parts(sample)
        X = sample.covariates[:, idx]
        odds = fit_selection_odds(self.selection_model, X, sample.study.astype(float))
        w = sample.n / (sample.m * odds(sample.trial_covariates(idx)))
        diag = _weight_diagnostics(w)
        t, c = A / self.e1, (1 - A) / (1 - self.e1)
        if self.normalize:
            value = float(np.sum(w * t * Y) / np.sum(w * t) - np.sum(w * c * Y) / np.sum(w * c))
        else:
            value = float(np.mean(w * Y * (t - c)))
        diag.update(normalized=bool(self.normalize), e1=self.e1)
        return AteEstimate(value, self.kind, _names(sample, idx), sample.n, sample.m, diagnostics=diag)


class AIPSW(_BaseTransport):
    """Augmented IPSW with cross-fitted outcome surfaces.

    The residual term on trial row ``i`` uses outcome models fitted without
    the fold containing ``i``; the target-average term uses models fitted on
    the whole trial.  The selection odds are fitted once on all rows.
    """

    kind = EstimatorKind.AIPSW

    def __init__(self, covariates=None, e1=0.5, n_folds=5, seed=0,
                 outcome_model="linear", selection_model="logistic"):
        self.covariates = covariates
        self.e1 = e1
        self.n_folds = n_folds
        self.seed = seed
        self.outcome_model = outcome_model
        self.selection_model = selection_model

    def _estimate(self, sample, pattern=None, plan: CrossFitPlan | None = None):
        _check_e1(self.e1)
        idx = _resolve_covariates(sample, pattern, self.covariates)
        A, Y = _trial_parts(sample, min_per_arm=2)
        Xt, Xo = sample.trial_covariates(idx), sample.obs_covariates(idx)
        plan = plan or CrossFitPlan.make(sample.n, self.n_folds, self.seed)
        if plan.fold_assignment.shape != (sample.n,):
            raise InputError("cross-fitting plan does not match the trial size")

        fit = lambda rows, arm: fit_outcome_model(
            self.outcome_model, Xt[rows & (A == arm)], Y[rows & (A == arm)]
        )
        everything = np.ones(sample.n, dtype=bool)
        mu1_all, mu0_all = fit(everything, 1), fit(everything, 0)
        mu1 = np.empty(sample.n)
        mu0 = np.empty(sample.n)
        for k in range(plan.k):
            held = plan.fold_assignment == k
            m1, m0 = fit(~held, 1), fit(~held, 0)
            mu1[held] = m1.predict(Xt[held])
            mu0[held] = m0.predict(Xt[held])

        odds = fit_selection_odds(self.selection_model, sample.covariates[:, idx],
                                  sample.study.astype(float))
        w = sample.n / (sample.m * odds(Xt))
        diag = _weight_diagnostics(w)
        resid = A * (Y - mu1) / self.e1 - (1 - A) * (Y - mu0) / (1 - self.e1)
        correction = float(np.mean(w * resid))
        outcome_term = float(np.mean(mu1_all.predict(Xo) - mu0_all.predict(Xo)))
        diag.update(folds=plan.k, e1=self.e1, outcome_term=outcome_term,
                    weighted_residual_term=correction)
        return AteEstimate(outcome_term + correction, self.kind, _names(sample, idx),
                           sample.n, sample.m, diagnostics=diag)

    def fit(self, sample, pattern=None, plan: CrossFitPlan | None = None):
        self.estimate_ = self._estimate(sample, pattern, plan)
        self.ate_ = self.estimate_.value
        return self


ESTIMATORS = {
    EstimatorKind.DM: DifferenceInMeans,
    EstimatorKind.GFORMULA: GFormula,
    EstimatorKind.IPSW: IPSW,
    EstimatorKind.AIPSW: AIPSW,
}


# -- functional interface --------------------------------------------------


def difference_in_means(sample: CombinedSample) -> AteEstimate:
    return DifferenceInMeans().fit(sample).estimate_


def g_formula(sample, pattern=None, nuisance="linear", covariates=None) -> AteEstimate:
    return GFormula(covariates, nuisance).fit(sample, pattern).estimate_


def ipsw(sample, pattern=None, normalize=False, e1=0.5, covariates=None,
         selection_model="logistic") -> AteEstimate:
    return IPSW(covariates, e1, normalize, selection_model).fit(sample, pattern).estimate_


def aipsw(sample, pattern=None, plan: CrossFitPlan | None = None, e1=0.5, covariates=None,
          outcome_model="linear", selection_model="logistic", n_folds=5, seed=0) -> AteEstimate:
    est = AIPSW(covariates, e1, n_folds, seed, outcome_model, selection_model)
    return est.fit(sample, pattern, plan).estimate_


def make_estimator(kind: str | EstimatorKind, **params) -> _BaseTransport:
    cls = ESTIMATORS[EstimatorKind(kind)]
    valid = cls._get_param_names()
    return cls(**{k: v for k, v in params.items() if k in valid})


# -- bootstrap -------------------------------------------------------------


@dataclass(frozen=True)
class BootstrapInterval:
    low: float
    high: float
    replicates: int
    failures: int
    values: np.ndarray = field(repr=False, default=None)

    def __iter__(self):
        yield self.low
        yield self.high


def stratified_resample(sample: CombinedSample, rng: np.random.Generator) -> CombinedSample:
    """Draw ``n`` trial rows and ``m`` observational rows with replacement."""
    trial = np.flatnonzero(sample.trial_mask)
    obs = np.flatnonzero(sample.obs_mask)
    rows = np.r_[rng.choice(trial, trial.size), rng.choice(obs, obs.size)]
    return sample.take(rows)


def bootstrap_ci(
    sample: CombinedSample,
    estimator: Callable[[CombinedSample], float | AteEstimate],
    reps: int = 1000,
    seed: int = 0,
    threads: int = 1,
    level: float = 0.95,
    max_failure_rate: float = 0.05,
) -> BootstrapInterval:
    """Percentile interval from a bootstrap stratified on the study indicator.

    The whole pipeline, nuisance fits included, is re-run on each replicate.
    Replicate ``i`` draws from ``numpy.random.default_rng([seed, i])`` so the
    result does not depend on ``threads``.  Replicates that raise are skipped;
    more than ``max_failure_rate`` skipped raises :class:`BootstrapFailure`.
    """
    if reps < 100:
        raise InputError("the bootstrap needs at least 100 replicates")

    def one(i):
        rng = np.random.default_rng([seed, i])
        try:
            with warnings.catch_warnings():
                warnings.simplefilter("ignore", DegenerateWeights)
                return float(estimator(stratified_resample(sample, rng)))
        except (TransportError, ArithmeticError, np.linalg.LinAlgError) as exc:
            logger.debug("bootstrap replicate %d failed: %s", i, exc)
            return np.nan

    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            values = np.array(list(pool.map(one, range(reps))))
    else:
        values = np.array([one(i) for i in range(reps)])
    failed = int(np.count_nonzero(np.isnan(values)))
    if failed > max_failure_rate * reps:
        raise BootstrapFailure(f"{failed} of {reps} bootstrap replicates failed")
    ok = values[~np.isnan(values)]
    tail = 100 * (1 - level) / 2
    low, high = np.percentile(ok, [tail, 100 - tail])
    return BootstrapInterval(float(low), float(high), reps, failed, ok)
