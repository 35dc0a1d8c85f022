"""Acceptance suite: the reference simulation study at full replicate counts.

Each test records a PASS/FAIL line that is printed at the end of the run.
"""

from __future__ import annotations

import math
import subprocess
import sys
from dataclasses import replace

import numpy as np
import pytest

from transport_ate import (
    MomentSummary,
    conditional_gaussian,
    difference_in_means,
    fit_ols,
    g_formula,
    ipsw,
    robinson_rlearner,
)
from transport_ate.data import CovariatePattern, MissingLocation
from transport_ate.simulation import (
    ScenarioSpec,
    correlation_attenuation,
    generate,
    heterogeneity_situations,
    imputation_experiment,
    nguyen_table,
    missing_pattern_study,
    proxy_sweep,
    sweep_selection_strength,
)

pytestmark = pytest.mark.slow

SEED = 1
TAU = 50.0


def _mean_se(v):
    v = np.asarray(v, dtype=float)
    v = v[~np.isnan(v)]
    return float(v.mean()), float(v.std(ddof=1) / math.sqrt(v.size))


@pytest.fixture(scope="module")
def fig3():
    return missing_pattern_study(reps=100, seed=SEED)


def test_complete_case_recovery(fig3, criterion):
    means = {e: fig3.stat("none", e)["mean"] for e in ("gformula", "ipsw", "aipsw")}
    ok = all(abs(m - TAU) <= 0.5 for m in means.values())
    detail = ", ".join(f"{e}={m:.3f}" for e, m in means.items()) + " (target 50 +/- 0.5)"
    criterion(1, "complete-case recovery", ok, detail)
    assert ok, detail


def test_internal_trial_estimate(fig3, criterion):
    m = fig3.stat("none", "dm")["mean"]
    ok = abs(m - 44.0) <= 1.0
    detail = f"dm={m:.3f} (target 44 +/- 1)"
    criterion(2, "internal trial estimate", ok, detail)
    assert ok, detail


def test_bias_overlay(fig3, criterion):
    parts, ok = [], True
    for pat in ("X1", "X3", "X1+X5", "X2", "X4", "X5"):
        emp, se = _mean_se(fig3.values(pat, "gformula") - TAU)
        theory = float(np.mean(fig3.values(pat, "theory")))
        good = abs(emp - theory) <= 3 * se
        if pat in ("X2", "X4", "X5"):
            good = good and abs(emp) <= 3 * se
        ok &= good
        parts.append(f"{pat}: {emp:.3f} vs {theory:.3f} (se {se:.3f})")
    detail = "; ".join(parts)
    criterion(3, "closed-form bias overlay", ok, detail)
    assert ok, detail


def test_hypothesized_mean_table(criterion):
    res = nguyen_table(reps=100, seed=SEED)
    targets = dict(zip((0.8, 0.9, 1.0, 1.1, 1.2), (44.0, 47.0, 50.0, 53.0, 56.0)))
    parts, ok = [], True
    for e, target in targets.items():
        st = res.stat(f"E={e:g}", "linear-cate")
        ok &= abs(st["mean"] - target) <= 1.0 and st["sd"] <= 0.6
        parts.append(f"E={e:g}: {st['mean']:.2f} (sd {st['sd']:.2f})")
    detail = "; ".join(parts)
    criterion(4, "hypothesized-mean table", ok, detail)
    assert ok, detail


def test_correlation_attenuation(criterion):
    res = correlation_attenuation(reps=100, seed=SEED)
    targets = {0.05: -8.32, 0.5: -6.29, 0.95: -0.81}
    parts, ok = [], True
    for rho, target in targets.items():
        b = res.stat(f"rho={rho:g}", "gformula")["bias"]
        ok &= abs(b - target) <= 1.0
        parts.append(f"rho={rho:g}: {b:.2f} vs {target}")
    detail = "; ".join(parts)
    criterion(5, "correlation attenuation", ok, detail)
    assert ok, detail


def test_imputation_gives_no_gain(criterion):
    res = imputation_experiment(reps=100, seed=SEED)
    worst, ok = 0.0, True
    for label, est in res.keys():
        if not label.endswith("|impute"):
            continue
        mi, si = _mean_se(res.values(label, est))
        md, sd = _mean_se(res.values(label.replace("|impute", "|drop"), est))
        ratio = abs(mi - md) / max(math.hypot(si, sd), 1e-12)
        worst = max(worst, ratio)
        ok &= abs(mi - md) <= 3 * math.hypot(si, sd)
    detail = f"largest |impute - drop| = {worst:.2f} combined SEs (limit 3)"
    criterion(6, "imputation gives no gain", ok, detail)
    assert ok, detail


def test_proxy_curve(criterion):
    res = proxy_sweep(reps=100, seed=SEED)
    parts, ok = [], True
    for s in (0.0, 0.5, 1.0, 2.0, 3.0):
        label = f"sigma_prox={s:g}"
        emp, se = _mean_se(res.values(label, "gformula") - TAU)
        theory = float(np.mean(res.values(label, "theory-trial-var")))
        good = abs(emp - theory) <= 3 * se
        if s == 0:
            good = good and abs(emp) <= 3 * se
        ok &= good
        parts.append(f"{s:g}: {emp:.2f} vs {theory:.2f} (se {se:.2f})")
    detail = "; ".join(parts)
    criterion(7, "proxy attenuation curve", ok, detail)
    assert ok, detail


def test_box_m_sweep(criterion):
    res = sweep_selection_strength(beta_s1_values=(0.0, -2.0), reps=50, seed=SEED)
    p0 = res.stat("beta_s1=0", "box_m_p")["mean"]
    p2 = res.stat("beta_s1=-2", "box_m_p")["mean"]
    ok = p0 >= 0.2 and p2 <= 1e-6
    detail = f"mean p at 0: {p0:.3f} (>= 0.2); at -2: {p2:.2e} (<= 1e-6)"
    criterion(8, "Box's M selection sweep", ok, detail)
    assert ok, detail


def test_heterogeneity_situations(criterion):
    a = heterogeneity_situations("A", reps=50, seed=SEED).stat("A", "corrected")
    b = heterogeneity_situations("B", reps=50, seed=SEED).stat("B", "corrected")
    miss_a = abs(a["mean"] - TAU) / a["se"]
    miss_b = abs(b["mean"] - TAU) / b["se"]
    ok = miss_b <= 3 and miss_a > 3
    detail = (f"A: {a['mean']:.2f} ({miss_a:.1f} SE from 50, must exceed 3); "
              f"B: {b['mean']:.2f} ({miss_b:.1f} SE, must be <= 3)")
    criterion(9, "covariance heterogeneity", ok, detail)
    assert ok, detail


# -- criterion 10: property suite ------------------------------------------------


def _conditional_gaussian_gap():
    """Closed-form regression of X1 on X2..X5 from the true moments vs OLS on a million draws."""
    spec = ScenarioSpec.reference()
    X = np.random.default_rng(2024).multivariate_normal(spec.mean, spec.cov, size=1_000_000)
    moments = MomentSummary(spec.mean, spec.mean, spec.cov, (0, 0), spec.names)
    pattern = CovariatePattern(spec.names, (1, 2, 3, 4), (0,), {0: MissingLocation.MISSING_IN_TRIAL})
    cg = conditional_gaussian(moments, pattern)
    ols = fit_ols(X[:, 1:], X[:, 0])
    return float(max(np.max(np.abs(cg.slope.ravel() - ols.coefficients)),
                     abs(cg.predict(np.zeros(4))[0] - ols.intercept)))


def _robinson_gap():
    spec = ScenarioSpec.reference(seed=SEED).resolved()
    sample = generate(spec, np.random.default_rng([SEED, 0]))
    fit = robinson_rlearner(sample, e1=spec.e1, stage1="kernel")
    return float(np.max(np.abs(fit.delta - spec.delta))), fit.delta


def _shrinkage(reps=100):
    out = {}
    for size in (1000, 4000):
        spec = replace(ScenarioSpec.reference(seed=SEED), target_size=size, obs_size=size).resolved()
        v = [ipsw(generate(spec, np.random.default_rng([SEED, r])), e1=spec.e1).value
             for r in range(reps)]
        out[size] = (abs(np.mean(v) - TAU), float(np.std(v, ddof=1)))
    return out


def _no_shift_agreement(reps=50):
    """Paired differences from DM when selection ignores the covariates: (mean, se) each."""
    spec = replace(ScenarioSpec.reference(seed=SEED), beta_s=np.zeros(5), target_size=4000,
                   obs_size=4000).resolved()
    diffs = []
    for r in range(reps):
        sample = generate(spec, np.random.default_rng([SEED, r]))
        dm = difference_in_means(sample).value
        diffs.append((g_formula(sample).value - dm, ipsw(sample, e1=spec.e1).value - dm))
    d = np.array(diffs)
    return {name: _mean_se(d[:, k]) for k, name in enumerate(("gformula", "ipsw"))}


def _replay(tmp_path):
    outs = []
    for k in range(2):
        stem = tmp_path / f"run{k}"
        subprocess.run(
            [sys.executable, "-m", "transport_ate.cli", "simulate", "--scenario", "paper-fig3",
             "--reps", "3", "--seed", "7", "--out", str(stem)],
            check=True, capture_output=True,
        )
        outs.append((stem.with_suffix(".json").read_bytes(), stem.with_suffix(".csv").read_bytes()))
    return outs[0] == outs[1]


def test_property_suite(criterion, tmp_path):
    cg_gap = _conditional_gaussian_gap()
    rob_gap, rob_delta = _robinson_gap()
    shrink = _shrinkage()
    (b1, s1), (b4, s4) = shrink[1000], shrink[4000]
    agree = _no_shift_agreement()
    same = _replay(tmp_path)
    checks = {
        "conditional-gaussian vs OLS <= 0.01": cg_gap <= 0.01,
        "Robinson within 1.0": rob_gap <= 1.0,
        "bias and SD shrink": b4 < b1 and s4 < s1,
        "no-shift agreement": all(abs(m) <= 3 * se for m, se in agree.values()),
        "byte-identical replay": same,
    }
    ok = all(checks.values())
    detail = (f"cg gap {cg_gap:.4f}; robinson {np.round(rob_delta, 2).tolist()}; "
              f"ipsw |bias|/sd {b1:.2f}/{s1:.2f} -> {b4:.2f}/{s4:.2f}; "
              "no shift, minus dm: "
              + ", ".join(f"{k} {m:+.2f} (se {se:.2f})" for k, (m, se) in agree.items())
              + f"; replay {'same' if same else 'differs'}")
    failed = [k for k, v in checks.items() if not v]
    criterion(10, "property suite", ok, detail + ("" if ok else f"; failed: {failed}"))
    assert ok, (failed, detail)
