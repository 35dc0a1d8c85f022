import warnings

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from sklearn.linear_model import LinearRegression

from transport_ate import (
    AIPSW,
    IPSW,
    CombinedSample,
    CrossFitPlan,
    DifferenceInMeans,
    GFormula,
    aipsw,
    bootstrap_ci,
    difference_in_means,
    g_formula,
    ipsw,
)
from transport_ate.estimators import EstimatorKind, make_estimator, stratified_resample
from transport_ate.exceptions import (
    BootstrapFailure,
    DegenerateWeights,
    EmptyArm,
    InputError,
    MissingBlock,
    ZeroDenominator,
)


def test_difference_in_means_frozen(tiny_sample):
    est = difference_in_means(tiny_sample)
    assert est.value == pytest.approx(2.75)
    assert est.estimator is EstimatorKind.DM
    assert est.diagnostics == {"n_treated": 2, "n_control": 2}


def test_constant_nuisances_reduce_to_difference_in_means(tiny_sample):
    assert g_formula(tiny_sample, nuisance="constant").value == pytest.approx(2.75)
    # constant odds n/m give unit weights; with e1 = 1/2 and balanced arms this is DM
    assert ipsw(tiny_sample, selection_model="constant").value == pytest.approx(2.75)


def test_g_formula_matches_manual_regressions(reference_sample):
    Xt, A, Y = reference_sample.trial_covariates(), reference_sample.trial_treatment, reference_sample.trial_outcome
    Xo = reference_sample.obs_covariates()
    m1 = LinearRegression().fit(Xt[A == 1], Y[A == 1])
    m0 = LinearRegression().fit(Xt[A == 0], Y[A == 0])
    expected = np.mean(m1.predict(Xo) - m0.predict(Xo))
    assert g_formula(reference_sample).value == pytest.approx(expected, rel=1e-10)


def test_ipsw_weights_use_selection_odds(reference_sample):
    est = ipsw(reference_sample)
    assert est.diagnostics["weight_min"] > 0
    hajek = ipsw(reference_sample, normalize=True)
    assert hajek.diagnostics["normalized"] is True
    assert abs(hajek.value - est.value) < 5


def test_aipsw_terms_add_up_and_plan_is_used(reference_sample):
    plan = CrossFitPlan.make(reference_sample.n, 5, seed=3)
    est = aipsw(reference_sample, plan=plan)
    d = est.diagnostics
    assert est.value == pytest.approx(d["outcome_term"] + d["weighted_residual_term"])
    assert d["outcome_term"] == pytest.approx(g_formula(reference_sample).value)
    assert aipsw(reference_sample, seed=3).value == est.value


def test_aipsw_with_exact_outcome_model_equals_g_formula():
    rng = np.random.default_rng(4)
    n, m = 300, 400
    Xt, Xo = rng.normal(size=(n, 2)), rng.normal(0.5, 1, size=(m, 2))
    A = rng.integers(0, 2, n).astype(float)
    Y = 1 + Xt @ [1.0, 2.0] + A * (3 + Xt[:, 0])
    s = CombinedSample.from_strata(Xt, A, Y, Xo)
    assert aipsw(s).value == pytest.approx(g_formula(s).value, abs=1e-8)
    assert g_formula(s).value == pytest.approx(3 + Xo[:, 0].mean(), abs=1e-8)


def test_crossfit_plan_is_balanced():
    plan = CrossFitPlan.make(103, 5, seed=1)
    counts = np.bincount(plan.fold_assignment)
    assert counts.max() - counts.min() <= 1
    with pytest.raises(InputError):
        CrossFitPlan.make(3, 5)


def test_errors(tiny_sample):
    only_treated = tiny_sample.replace(treatment=np.r_[1, 1, 1, 1, np.full(4, np.nan)])
    with pytest.raises(EmptyArm):
        difference_in_means(only_treated)
    with pytest.raises(EmptyArm):
        g_formula(tiny_sample.take([0, 1, 2, 4, 5]))
    with pytest.raises(InputError, match="e1"):
        ipsw(tiny_sample, e1=1.0)
    with pytest.raises(MissingBlock):
        g_formula(tiny_sample.mask(["X1"], "trial"), covariates=["X1"])


def test_degenerate_weights_warn_and_zero_weights_raise(tiny_sample):
    with pytest.warns(DegenerateWeights):
        from transport_ate.estimators import _weight_diagnostics
        _weight_diagnostics(np.r_[np.ones(9), 1e9])
    with pytest.raises(ZeroDenominator):
        _weight_diagnostics(np.r_[np.ones(3), 0.0])


def test_sklearn_style_api(reference_sample):
    est = make_estimator("aipsw", e1=0.5, n_folds=3, seed=2, bogus=1)
    assert isinstance(est, AIPSW) and est.get_params()["n_folds"] == 3
    assert est.fit(reference_sample).ate_ == est.estimate_.value
    assert isinstance(make_estimator("ipsw"), IPSW)
    assert GFormula(outcome_model="kernel").set_params(outcome_model="linear").outcome_model == "linear"
    assert DifferenceInMeans().fit(reference_sample).ate_ == difference_in_means(reference_sample).value


def test_estimate_serialises(tiny_sample):
    d = difference_in_means(tiny_sample).with_ci(1.0, 4.0).to_dict(seed=5)
    assert d["estimator"] == "dm" and d["ci"] == [1.0, 4.0] and d["seed"] == 5


def test_stratified_resample_keeps_stratum_sizes(tiny_sample):
    r = stratified_resample(tiny_sample, np.random.default_rng(0))
    assert (r.n, r.m) == (tiny_sample.n, tiny_sample.m)


def test_bootstrap_is_reproducible_and_thread_invariant(reference_sample):
    small = reference_sample.take(np.r_[0:300, reference_sample.n:reference_sample.n + 600])
    fn = lambda s: g_formula(s).value
    a = bootstrap_ci(small, fn, reps=100, seed=9)
    b = bootstrap_ci(small, fn, reps=100, seed=9, threads=3)
    np.testing.assert_array_equal(a.values, b.values)
    low, high = a
    assert low < g_formula(small).value < high


def test_bootstrap_guards(tiny_sample):
    with pytest.raises(InputError):
        bootstrap_ci(tiny_sample, difference_in_means, reps=50)
    with pytest.raises(BootstrapFailure):
        bootstrap_ci(tiny_sample, lambda s: g_formula(s, nuisance="linear").value, reps=100)


def _random_sample(seed, n=60, m=80):
    rng = np.random.default_rng(seed)
    Xt, Xo = rng.normal(size=(n, 2)), rng.normal(0.3, 1, size=(m, 2))
    A = np.r_[np.zeros(n // 2), np.ones(n - n // 2)]
    Y = Xt[:, 0] + A * (1 + Xt[:, 1]) + rng.normal(size=n)
    return CombinedSample.from_strata(Xt, A, Y, Xo)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 5000), a=st.floats(-5, 5).filter(lambda v: abs(v) > 0.1),
       b=st.floats(-100, 100))
def test_estimates_are_affine_equivariant_in_the_outcome(seed, a, b):
    s = _random_sample(seed)
    t = s.replace(outcome=a * s.outcome + b)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWeights)
        for f in (difference_in_means, g_formula, lambda x: ipsw(x, normalize=True)):
            assert f(t).value == pytest.approx(a * f(s).value, rel=1e-7, abs=1e-7)


@settings(max_examples=25, deadline=None)
@given(seed=st.integers(0, 5000), perm_seed=st.integers(0, 100))
def test_estimates_ignore_row_order(seed, perm_seed):
    s = _random_sample(seed)
    rng = np.random.default_rng(perm_seed)
    rows = np.r_[rng.permutation(s.n), s.n + rng.permutation(s.m)]
    t = s.take(rows)
    with warnings.catch_warnings():
        warnings.simplefilter("ignore", DegenerateWeights)
        assert g_formula(t).value == pytest.approx(g_formula(s).value, rel=1e-9)
        assert ipsw(t).value == pytest.approx(ipsw(s).value, rel=1e-7)
