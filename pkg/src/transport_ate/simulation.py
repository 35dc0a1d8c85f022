"""Synthetic trial/target experiments and Monte Carlo scenario runners.

Covariates are Gaussian.  A pool drawn from the (trial-side) covariate law
is subsampled into a trial with a logistic selection model, treatment is
assigned with a constant probability, and the outcome follows a linear model
with a linear CATE.  A fresh covariate sample stands in for the target
population.

Replicate ``r`` of a scenario seeded with ``seed`` always draws from
``numpy.random.default_rng([seed, r])``, so runs can be split, resumed or
parallelised without changing any number.
"""

from __future__ import annotations

import csv
import io
import logging
import math
import warnings
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Callable, Sequence

import numpy as np
from scipy.special import expit, logit

from .data import (
    CombinedSample,
    CovariatePattern,
    CovSource,
    MissingLocation,
    estimate_moments,
)
from .estimators import (
    aipsw,
    difference_in_means,
    g_formula,
    ipsw,
)
from .exceptions import DegenerateWeights, EmptySelection, InputError, TransportError
from .kernels import box_m_test
from .sensitivity import (
    linear_impute,
    procedure_missing_in_obs,
    proxy_bias,
    robinson_rlearner,
    theoretical_bias,
)

logger = logging.getLogger(__name__)

CALIBRATION_SEED = 0
SELECTION_FRACTION = 0.28


@dataclass(frozen=True, eq=False)
class ScenarioSpec:
    """Generative description of a synthetic experiment.

    ``beta_s0=None`` means the selection intercept is calibrated so that a
    fraction :data:`SELECTION_FRACTION` of the pool enters the trial.
    ``trial_cov`` optionally gives the pool a covariance different from the
    target's (used to break the shared-covariance assumption).
    """

    mean: np.ndarray
    cov: np.ndarray
    beta: np.ndarray
    delta: np.ndarray
    beta_s: np.ndarray
    beta_s0: float | None = None
    beta0: float = 0.0
    e1: float = 0.5
    target_size: int = 10_000
    obs_size: int = 10_000
    reps: int = 100
    seed: int = 0
    g_form: str = "linear"
    trial_cov: np.ndarray | None = None
    reuse_pool: bool = False

    def __post_init__(self):
        arr = lambda v: np.array(v, dtype=float, copy=True)
        for name in ("mean", "beta", "delta", "beta_s"):
            object.__setattr__(self, name, arr(getattr(self, name)))
        object.__setattr__(self, "cov", arr(self.cov))
        if self.trial_cov is not None:
            object.__setattr__(self, "trial_cov", arr(self.trial_cov))
        p = self.mean.size
        for name in ("beta", "delta", "beta_s"):
            if getattr(self, name).shape != (p,):
                raise InputError(f"{name} must have {p} entries")
        for label, c in (("cov", self.cov), ("trial_cov", self.trial_cov)):
            if c is None:
                continue
            if c.shape != (p, p) or not np.allclose(c, c.T):
                raise InputError(f"{label} must be a symmetric {p}x{p} matrix")
            try:
                np.linalg.cholesky(c)
            except np.linalg.LinAlgError:
                raise InputError(f"{label} must be positive definite") from None
        if self.reps < 1:
            raise InputError("reps must be at least 1")
        if not 0 < self.e1 < 1:
            raise InputError("e1 must lie in (0, 1)")
        if self.g_form not in ("linear", "nonlinear-demo"):
            raise InputError(f"unknown baseline form {self.g_form!r}")
        if self.target_size < 1 or self.obs_size < 1:
            raise InputError("sample sizes must be positive")

    @property
    def p(self) -> int:
        return self.mean.size

    @property
    def names(self) -> tuple:
        return tuple(f"X{j + 1}" for j in range(self.p))

    @property
    def true_ate(self) -> float:
        return float(self.delta @ self.mean)

    @classmethod
    def reference(cls, **overrides) -> "ScenarioSpec":
        """Five N(1, 1) covariates, corr(X1, X5) = 0.8, three effect modifiers."""
        cov = np.eye(5)
        cov[0, 4] = cov[4, 0] = 0.8
        base = dict(
            mean=np.ones(5),
            cov=cov,
            beta=np.full(5, 5.0),
            delta=np.array([30.0, 30.0, -10.0, 0.0, 0.0]),
            beta_s=np.array([-0.4, 0.0, -0.3, -0.3, 0.0]),
        )
        base.update(overrides)
        return cls(**base)

    def with_correlation(self, i: int, j: int, rho: float, which: str = "both") -> "ScenarioSpec":
        """Copy with ``corr(X_i, X_j) = rho`` (0-based indices) on the chosen covariance(s)."""
        out = {}
        for name in (("cov", "trial_cov") if which == "both" else (which,)):
            c = getattr(self, name)
            if c is None:
                c = self.cov
            c = c.copy()
            c[i, j] = c[j, i] = rho * math.sqrt(c[i, i] * c[j, j])
            out[name] = c
        if which in ("both", "cov") and self.trial_cov is None:
            out["trial_cov"] = None
        return replace(self, **out)

    def pool_cov(self) -> np.ndarray:
        return self.cov if self.trial_cov is None else self.trial_cov

    def resolved(self) -> "ScenarioSpec":
        """Copy with a calibrated selection intercept (no-op when already set)."""
        if self.beta_s0 is not None:
            return self
        b0 = calibrate_intercept(self, SELECTION_FRACTION, np.random.default_rng(CALIBRATION_SEED))
        return replace(self, beta_s0=b0)

    def to_dict(self) -> dict:
        return {
            "mean": self.mean.tolist(),
            "cov": self.cov.tolist(),
            "trial_cov": None if self.trial_cov is None else self.trial_cov.tolist(),
            "beta": self.beta.tolist(),
            "delta": self.delta.tolist(),
            "beta_s": self.beta_s.tolist(),
            "beta_s0": self.beta_s0,
            "beta0": self.beta0,
            "e1": self.e1,
            "target_size": self.target_size,
            "obs_size": self.obs_size,
            "reps": self.reps,
            "seed": self.seed,
            "g_form": self.g_form,
            "reuse_pool": self.reuse_pool,
        }

    @classmethod
    def from_dict(cls, d: dict) -> "ScenarioSpec":
        known = set(cls.__dataclass_fields__)
        unknown = set(d) - known
        if unknown:
            raise InputError(f"unknown scenario fields {sorted(unknown)}")
        if "cov" not in d and "mean" in d:
            d = dict(d, cov=np.eye(len(d["mean"])))
        return cls(**d)


def baseline(spec: ScenarioSpec, X: np.ndarray) -> np.ndarray:
    """Outcome surface under control, ``g(x)``."""
    if spec.g_form == "linear":
        return spec.beta0 + X @ spec.beta
    # 5 sin(x1) + x2^2 + linear in the remaining covariates
    rest = X[:, 2:] @ spec.beta[2:] if spec.p > 2 else 0.0
    return spec.beta0 + 5.0 * np.sin(X[:, 0]) + (X[:, 1] ** 2 if spec.p > 1 else 0.0) + rest


def _mvn(rng, mean, cov, size):
    return rng.multivariate_normal(mean, cov, size=size, method="cholesky")


def generate(spec: ScenarioSpec, rng: np.random.Generator) -> CombinedSample:
    """Draw one trial + target sample from ``spec``."""
    spec = spec.resolved()
    pool = _mvn(rng, spec.mean, spec.pool_cov(), spec.target_size)
    chosen = rng.random(spec.target_size) < expit(spec.beta_s0 + pool @ spec.beta_s)
    X = pool[chosen]
    n = X.shape[0]
    A = (rng.random(n) < spec.e1).astype(float)
    Y = baseline(spec, X) + A * (X @ spec.delta) + rng.standard_normal(n)
    X_obs = pool[~chosen] if spec.reuse_pool else _mvn(rng, spec.mean, spec.cov, spec.obs_size)
    return CombinedSample.from_strata(X, A, Y, X_obs, spec.names,
                                      metadata={"generator": "gaussian-linear-cate"})


def calibrate_intercept(spec: ScenarioSpec, desired_fraction: float,
                        rng: np.random.Generator, probes: int = 100_000) -> float:
    """Selection intercept giving the requested expected trial fraction.

    Bisection on a fixed set of probe draws, to a bracket narrower than 1e-10.
    """
    if not 0 < desired_fraction < 1:
        raise InputError("desired fraction must lie in (0, 1)")
    lin = _mvn(rng, spec.mean, spec.pool_cov(), probes) @ spec.beta_s
    if not np.any(lin != lin[0]):
        return float(logit(desired_fraction) - lin[0])
    frac = lambda b: float(np.mean(expit(b + lin)))
    lo, hi = -1.0, 1.0
    while frac(lo) > desired_fraction:
        lo *= 2
    while frac(hi) < desired_fraction:
        hi *= 2
    while hi - lo > 1e-10:
        mid = 0.5 * (lo + hi)
        if frac(mid) < desired_fraction:
            lo = mid
        else:
            hi = mid
    return 0.5 * (lo + hi)


# -- results ---------------------------------------------------------------


@dataclass
class ScenarioResult:
    """Long-format replicate table plus derived summaries.

    Each row is ``(replicate, pattern, estimator, value)``.  Theoretical
    overlays are stored as rows with ``estimator == "theory"``.
    """

    name: str
    rows: list = field(default_factory=list)
    truth: float | None = None
    metadata: dict = field(default_factory=dict)

    def add(self, replicate: int, pattern: str, estimator: str, value: float):
        self.rows.append((int(replicate), str(pattern), str(estimator), float(value)))

    def extend(self, other: "ScenarioResult") -> "ScenarioResult":
        self.rows.extend(other.rows)
        return self

    def values(self, pattern: str, estimator: str) -> np.ndarray:
        return np.array([v for _, p, e, v in self.rows if p == pattern and e == estimator])

    def keys(self) -> list[tuple[str, str]]:
        seen = {}
        for _, p, e, _ in self.rows:
            seen.setdefault((p, e), None)
        return list(seen)

    def summary(self) -> list[dict]:
        out = []
        for p, e in self.keys():
            v = self.values(p, e)
            v = v[~np.isnan(v)]
            k = v.size
            sd = float(np.std(v, ddof=1)) if k > 1 else None
            row = {
                "pattern": p,
                "estimator": e,
                "reps": k,
                "mean": float(np.mean(v)) if k else None,
                "sd": sd,
                "se": None if sd is None else sd / math.sqrt(k),
            }
            if self.truth is not None and k and not e.startswith(("theory", "box_m")):
                row["bias"] = row["mean"] - self.truth
            out.append(row)
        return out

    def stat(self, pattern: str, estimator: str) -> dict:
        for row in self.summary():
            if row["pattern"] == pattern and row["estimator"] == estimator:
                return row
        raise KeyError((pattern, estimator))

    def to_csv(self) -> str:
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["replicate", "pattern", "estimator", "value"])
        for r, p, e, v in sorted(self.rows, key=lambda t: t[0]):
            w.writerow([r, p, e, format(v, ".17g")])
        return buf.getvalue()

    def to_dict(self) -> dict:
        return {"scenario": self.name, "truth": self.truth,
                "summary": self.summary(), "metadata": self.metadata}


# -- replicate machinery ----------------------------------------------------


def _run_replicates(name, reps, seed, start, threads, body, truth=None, metadata=None):
    """Run ``body(rep, rng, result)`` per replicate and merge in replicate order."""

    def one(rep):
        res = ScenarioResult(name)
        with warnings.catch_warnings():
            warnings.simplefilter("ignore", DegenerateWeights)
            body(rep, np.random.default_rng([seed, rep]), res)
        return res

    idx = range(start, start + reps)
    if threads > 1:
        with ThreadPoolExecutor(threads) as pool:
            parts = list(pool.map(one, idx))
    else:
        parts = [one(r) for r in idx]
    out = ScenarioResult(name, truth=truth, metadata=dict(metadata or {}, seed=seed, start=start, reps=reps))
    for part in parts:
        out.extend(part)
    return out


@dataclass(frozen=True)
class MissingPattern:
    """Covariates removed from the analysis and where they are absent."""

    label: str
    missing: tuple = ()
    where: str = "both"

    @classmethod
    def parse(cls, text: str) -> "MissingPattern":
        """``"none"``, ``"X1"`` or ``"X1+X5"`` (absent from both strata)."""
        if text in ("none", ""):
            return cls("none")
        return cls(text, tuple(text.split("+")))

    def apply(self, sample: CombinedSample) -> CombinedSample:
        return sample.mask(list(self.missing), self.where) if self.missing else sample


FIG3_PATTERNS = ("none", "X1", "X3", "X1+X5", "X2", "X4", "X5")
ALL_ESTIMATORS = ("dm", "gformula", "ipsw", "aipsw")


def _oracle_pattern(names, missing) -> CovariatePattern:
    """Pattern whose missing covariates keep their covariance with the observed ones."""
    mis = tuple(names.index(k) for k in missing)
    return CovariatePattern(
        covariate_names=tuple(names),
        obs_idx=tuple(j for j in range(len(names)) if j not in mis),
        mis_idx=mis,
        mis_location={j: MissingLocation.MISSING_IN_TRIAL for j in mis},
    )


def oracle_bias(spec: ScenarioSpec, sample: CombinedSample, missing: Sequence[str],
                cov_source: CovSource | str = CovSource.OBSERVATIONAL) -> float:
    """Closed-form bias with the true CATE coefficients and moments of the complete sample.

    ``cov_source`` picks the stratum whose covariance enters the formula.
    """
    if not missing:
        return 0.0
    names = list(sample.covariate_names)
    pattern = _oracle_pattern(names, missing)
    moments = estimate_moments(sample, pattern, cov_source)
    return theoretical_bias(spec.delta[list(pattern.mis_idx)], moments, pattern).bias


def _apply_estimator(name: str, sample: CombinedSample, e1: float, crossfit_seed) -> float:
    if name == "dm":
        return difference_in_means(sample).value
    if name == "gformula":
        return g_formula(sample).value
    if name == "ipsw":
        return ipsw(sample, e1=e1).value
    if name == "ipsw-normalized":
        return ipsw(sample, e1=e1, normalize=True).value
    if name == "aipsw":
        return aipsw(sample, e1=e1, seed=crossfit_seed).value
    raise InputError(f"unknown estimator {name!r}")


def run_scenario(spec: ScenarioSpec, patterns=FIG3_PATTERNS, estimators=ALL_ESTIMATORS,
                 reps: int | None = None, start: int = 0, threads: int = 1,
                 overlay: bool = True, name: str = "scenario") -> ScenarioResult:
    """Every estimator under every missing-covariate pattern, per replicate.

    Two closed-form overlays are recorded: ``"theory"`` takes the covariance
    from the trial rows, whose regressions the estimators actually project
    through, and ``"theory-target-cov"`` takes it from the target rows.  They
    differ when selection distorts the trial covariance.

    Failed estimator calls are recorded as ``NaN`` and counted in the
    metadata rather than aborting the run.
    """
    spec = spec.resolved()
    reps = spec.reps if reps is None else reps
    pats = [p if isinstance(p, MissingPattern) else MissingPattern.parse(p) for p in patterns]
    failures = []

    def body(rep, rng, res):
        full = generate(spec, rng)
        for pat in pats:
            sample = pat.apply(full)
            for est in estimators:
                try:
                    v = _apply_estimator(est, sample, spec.e1, [spec.seed, rep])
                except TransportError as exc:
                    failures.append((rep, pat.label, est, str(exc)))
                    v = math.nan
                res.add(rep, pat.label, est, v)
            if overlay:
                res.add(rep, pat.label, "theory", oracle_bias(spec, full, pat.missing, CovSource.TRIAL))
                res.add(rep, pat.label, "theory-target-cov", oracle_bias(spec, full, pat.missing))
        res.add(rep, "sizes", "n", full.n)

    out = _run_replicates(name, reps, spec.seed, start, threads, body, spec.true_ate,
                          {"spec": spec.to_dict()})
    out.metadata["failures"] = len(failures)
    return out


# -- named experiments ------------------------------------------------------


def missing_pattern_study(reps=100, seed=1, threads=1, start=0) -> ScenarioResult:
    spec = ScenarioSpec.reference(seed=seed, reps=reps)
    return run_scenario(spec, FIG3_PATTERNS, ALL_ESTIMATORS, start=start, threads=threads,
                        name="paper-fig3")


def nguyen_table(reps=100, seed=1, expectations=(0.8, 0.9, 1.0, 1.1, 1.2), stage1="linear",
                 threads=1, start=0) -> ScenarioResult:
    """Target ATE for hypothesized means of X1 when X1 is absent from the target rows."""
    spec = ScenarioSpec.reference(seed=seed, reps=reps).resolved()

    def body(rep, rng, res):
        sample = generate(spec, rng).mask(["X1"], "observational")
        for est in procedure_missing_in_obs(sample, None, expectations, spec.e1, stage1, "X1"):
            res.add(rep, f"E={est.diagnostics['hypothesized_mean']:g}", "linear-cate", est.value)

    return _run_replicates("paper-table4", reps, seed, start, threads, body, spec.true_ate,
                           {"spec": spec.to_dict(), "stage1": stage1})


def correlation_attenuation(rhos=(0.05, 0.5, 0.95), reps=100, seed=1, stage1="linear",
                            threads=1, start=0) -> ScenarioResult:
    """G-formula bias and the X5 CATE coefficient when X1 is dropped, for several corr(X1, X5)."""
    specs = {r: ScenarioSpec.reference(seed=seed, reps=reps).with_correlation(0, 4, r).resolved()
             for r in rhos}

    def body(rep, rng, res):
        for r, spec in specs.items():
            full = generate(spec, rng)
            sample = full.mask(["X1"])
            label = f"rho={r:g}"
            res.add(rep, label, "gformula", g_formula(sample).value)
            res.add(rep, label, "theory", oracle_bias(spec, full, ["X1"]))
            fit = robinson_rlearner(sample, spec.e1, stage1, covariates=["X2", "X3", "X4", "X5"])
            res.add(rep, label, "delta5_hat", fit.coefficient("X5"))

    return _run_replicates("correlation-attenuation", reps, seed, start, threads, body,
                           50.0, {"rhos": list(rhos), "stage1": stage1})


def imputation_experiment(rhos=(0.05, 0.5, 0.95), reps=100, seed=1, threads=1,
                          start=0) -> ScenarioResult:
    """Drop versus linearly impute X1 when it is absent from one stratum.

    Rows are labelled ``"<location>|rho=<r>|<drop or impute>"``.  The
    G-formula on an imputed trial is collinear by construction; aliased
    columns are dropped as a rank-revealing least-squares routine would.
    """
    specs = {r: ScenarioSpec.reference(seed=seed, reps=reps).with_correlation(0, 4, r).resolved()
             for r in rhos}

    def body(rep, rng, res):
        for r, spec in specs.items():
            full = generate(spec, rng)
            for where, loc in (("trial", "missing-in-trial"), ("observational", "missing-in-obs")):
                partial = full.mask(["X1"], where)
                variants = {"drop": partial.drop(["X1"]), "impute": linear_impute(partial)}
                for how, s in variants.items():
                    label = f"{loc}|rho={r:g}|{how}"
                    res.add(rep, label, "gformula",
                            g_formula(s, nuisance="linear-aliased").value)
                    res.add(rep, label, "ipsw", ipsw(s, e1=spec.e1).value)

    return _run_replicates("imputation", reps, seed, start, threads, body, 50.0,
                           {"rhos": list(rhos)})


def proxy_sweep(sigmas=(0.0, 0.5, 1.0, 2.0, 3.0), reps=100, seed=1, threads=1,
                start=0, isolate_selection: bool = True) -> ScenarioResult:
    """Replace X1 by ``X1 + N(0, sigma^2)`` in both strata and run the G-formula.

    The attenuation formula needs X1 independent of the observed covariates
    inside the trial as well as in the target.  X1 is therefore decorrelated
    from X5 and, with ``isolate_selection``, selection acts on X1 alone:
    joint selection on X1, X3 and X4 makes them dependent among trial rows.
    The overlay uses the replicate's own X1 shift with ``sigma_mis = 1``
    (``theory``) or the trial standard deviation of X1 (``theory-trial-var``).
    """
    spec = ScenarioSpec.reference(seed=seed, reps=reps).with_correlation(0, 4, 0.0)
    if isolate_selection:
        spec = replace(spec, beta_s=np.array([spec.beta_s[0], 0.0, 0.0, 0.0, 0.0]))
    spec = spec.resolved()

    def body(rep, rng, res):
        full = generate(spec, rng)
        x1 = full.covariates[:, 0]
        shift = x1[full.obs_mask].mean() - x1[full.trial_mask].mean()
        sd_trial = x1[full.trial_mask].std(ddof=1)
        base = full.drop(["X1"])
        for s in sigmas:
            noisy = base.with_column("X1_proxy", x1 + s * rng.standard_normal(len(full)))
            label = f"sigma_prox={s:g}"
            res.add(rep, label, "gformula", g_formula(noisy).value)
            res.add(rep, label, "theory", proxy_bias(spec.delta[0], shift, 1.0, s))
            res.add(rep, label, "theory-trial-var", proxy_bias(spec.delta[0], shift, sd_trial, s))

    return _run_replicates("proxy-sweep", reps, seed, start, threads, body, spec.true_ate,
                           {"sigmas": list(sigmas), "spec": spec.to_dict()})


def _box_m_between(sample: CombinedSample):
    Xt, Xo = sample.trial_covariates(), sample.obs_covariates()
    return box_m_test(np.cov(Xt, rowvar=False), Xt.shape[0], np.cov(Xo, rowvar=False), Xo.shape[0])


def sweep_selection_strength(base_spec: ScenarioSpec | None = None,
                             beta_s1_values=(0.0, -0.4, -0.8, -1.2, -1.6, -2.0),
                             reps: int = 50, seed: int = 1, threads: int = 1,
                             start: int = 0) -> ScenarioResult:
    """Empirical vs closed-form bias (X1 missing) and Box's M p-value as selection on X1 grows."""
    base = base_spec or ScenarioSpec.reference(seed=seed)
    specs = {}
    for b in beta_s1_values:
        bs = base.beta_s.copy()
        bs[0] = b
        specs[b] = replace(base, beta_s=bs, beta_s0=None, seed=seed, reps=reps).resolved()

    def body(rep, rng, res):
        for b, spec in specs.items():
            full = generate(spec, rng)
            label = f"beta_s1={b:g}"
            res.add(rep, label, "gformula", g_formula(full.mask(["X1"])).value - spec.true_ate)
            res.add(rep, label, "theory", oracle_bias(spec, full, ["X1"]))
            bm = _box_m_between(full)
            res.add(rep, label, "box_m_p", bm.p_value)
            res.add(rep, label, "box_m_stat", bm.statistic)

    out = _run_replicates("boxm-sweep", reps, seed, start, threads, body, None,
                          {"beta_s1_values": list(beta_s1_values), "box_m": "chi2"})
    return out


def heterogeneity_spec(which: str, seed: int = 1, reps: int = 50) -> ScenarioSpec:
    """Trial pool whose covariance differs from the target's.

    A: corr(X1, X5) is 0.2 in the trial pool and 0.8 in the target.
    B: corr(X2, X3) is 0.5 in the trial pool and 0 in the target.
    The pool is sized for about 1000 trial rows.
    """
    spec = ScenarioSpec.reference(seed=seed, reps=reps, target_size=3_600, obs_size=10_000)
    if which == "A":
        spec = spec.with_correlation(0, 4, 0.2, which="trial_cov")
    elif which == "B":
        spec = spec.with_correlation(1, 2, 0.5, which="trial_cov")
    else:
        raise InputError(f"unknown heterogeneity situation {which!r}")
    return spec.resolved()


def heterogeneity_situations(which: str, reps: int = 50, seed: int = 1, threads: int = 1,
                             start: int = 0) -> ScenarioResult:
    """Naive and bias-corrected G-formula when X1 is missing from the trial.

    Box's M test is reported on all covariates (``box_m_*``) and on the
    covariates an analyst would actually see (``box_m_observed_*``).

    The correction subtracts the closed-form bias computed with the true X1
    coefficient, the X1 shift of the complete sample and the target-side
    covariance: ``corrected = tau_hat_obs - bias_hat``.
    """
    spec = heterogeneity_spec(which, seed, reps)

    def body(rep, rng, res):
        full = generate(spec, rng)
        sample = full.mask(["X1"], "trial")
        naive = g_formula(sample).value
        b = oracle_bias(spec, full, ["X1"])
        res.add(rep, which, "gformula", naive)
        res.add(rep, which, "theory", b)
        res.add(rep, which, "corrected", naive - b)
        for label, data in (("box_m", full), ("box_m_observed", full.drop(["X1"]))):
            bm = _box_m_between(data)
            res.add(rep, which, f"{label}_p", bm.p_value)
            res.add(rep, which, f"{label}_stat", bm.statistic)

    return _run_replicates(f"heterogeneity-{which}", reps, seed, start, threads, body,
                           spec.true_ate, {"spec": spec.to_dict()})


def biased_subsample(rct: CombinedSample, selection_covariate, logit_coeffs, rng,
                     holdout_fraction: float = 0.5):
    """Split a complete RCT into a selected trial and a random observational holdout.

    A random ``holdout_fraction`` of rows becomes the covariate-only target
    sample.  Each remaining row enters the trial with probability
    ``expit(c0 + c1 * x)`` for ``(c0, c1) = logit_coeffs``.
    """
    if rct.m:
        raise InputError("expected a sample made of trial rows only")
    if np.isnan(rct.covariates).any():
        raise InputError("the RCT must be fully observed")
    j = rct.index_of(selection_covariate)[0]
    c0, c1 = logit_coeffs
    N = len(rct)
    holdout = rng.random(N) < holdout_fraction
    rest = np.flatnonzero(~holdout)
    x = rct.covariates[rest, j]
    keep = rest[rng.random(rest.size) < expit(c0 + c1 * x)]
    if keep.size == 0:
        raise EmptySelection("no rows were selected into the trial")
    held = np.flatnonzero(holdout)
    if held.size == 0:
        raise EmptySelection("the observational holdout is empty")
    trial = rct.take(keep)
    obs_rows = rct.take(held)
    observational = CombinedSample(
        covariates=obs_rows.covariates,
        study=np.zeros(held.size),
        treatment=np.full(held.size, np.nan),
        outcome=np.full(held.size, np.nan),
        covariate_names=rct.covariate_names,
    )
    return trial, observational


SCENARIOS: dict[str, Callable[..., ScenarioResult]] = {
    "paper-fig3": missing_pattern_study,
    "paper-table4": nguyen_table,
    "proxy-sweep": proxy_sweep,
    "imputation": imputation_experiment,
    "boxm-sweep": lambda reps=50, seed=1, threads=1, start=0: sweep_selection_strength(
        None, reps=reps, seed=seed, threads=threads, start=start),
    "heterogeneity-A": lambda reps=50, seed=1, threads=1, start=0: heterogeneity_situations(
        "A", reps, seed, threads, start),
    "heterogeneity-B": lambda reps=50, seed=1, threads=1, start=0: heterogeneity_situations(
        "B", reps, seed, threads, start),
    "attenuation": correlation_attenuation,
}
