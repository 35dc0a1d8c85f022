import csv
import io
import json
from dataclasses import replace

import numpy as np
import pytest

from transport_ate import CombinedSample, ScenarioSpec, biased_subsample, difference_in_means, generate
from transport_ate.exceptions import EmptySelection, InputError
from transport_ate.simulation import (
    SCENARIOS,
    SELECTION_FRACTION,
    MissingPattern,
    calibrate_intercept,
    run_scenario,
)


@pytest.fixture(scope="module")
def spec():
    return ScenarioSpec.reference(seed=3).resolved()


def test_calibrated_intercept_hits_selection_fraction(spec):
    sizes = [generate(spec, np.random.default_rng([3, r])).n for r in range(20)]
    assert np.mean(sizes) / spec.target_size == pytest.approx(SELECTION_FRACTION, abs=0.01)


def test_constant_selection_has_closed_form():
    flat = ScenarioSpec.reference(beta_s=np.zeros(5))
    b0 = calibrate_intercept(flat, 0.25, np.random.default_rng(0))
    assert b0 == pytest.approx(np.log(0.25 / 0.75))


def test_generate_is_bit_identical_per_seed(spec):
    a = generate(spec, np.random.default_rng([3, 1]))
    b = generate(spec, np.random.default_rng([3, 1]))
    np.testing.assert_array_equal(a.covariates, b.covariates)
    np.testing.assert_array_equal(a.outcome, b.outcome)


def test_variances_are_close_to_one_in_both_strata(spec):
    s = generate(spec, np.random.default_rng([3, 2]))
    for X in (s.trial_covariates(), s.obs_covariates()):
        assert np.all((X.var(axis=0, ddof=1) > 0.8) & (X.var(axis=0, ddof=1) < 1.2))


def test_reuse_pool_makes_observational_rows_the_non_selected(spec):
    s = generate(replace(spec, reuse_pool=True), np.random.default_rng(0))
    assert s.n + s.m == spec.target_size


def test_spec_round_trip_and_validation(spec):
    again = ScenarioSpec.from_dict(json.loads(json.dumps(spec.to_dict())))
    assert again.to_dict() == spec.to_dict()
    with pytest.raises(InputError, match="unknown scenario fields"):
        ScenarioSpec.from_dict({"mean": [0.0], "bogus": 1})
    with pytest.raises(InputError, match="positive definite"):
        ScenarioSpec.reference(cov=np.ones((5, 5)))
    rho = spec.with_correlation(0, 4, 0.3)
    assert rho.cov[0, 4] == pytest.approx(0.3) and rho.trial_cov is None


def test_missing_pattern_parsing():
    assert MissingPattern.parse("none").missing == ()
    assert MissingPattern.parse("X1+X5").missing == ("X1", "X5")


def test_replicate_blocks_concatenate(spec):
    kw = dict(patterns=["none", "X1"], estimators=["dm", "gformula"])
    whole = run_scenario(spec, reps=4, **kw)
    first = run_scenario(spec, reps=2, **kw)
    second = run_scenario(spec, reps=2, start=2, **kw)
    assert whole.rows == first.extend(second).rows
    threaded = run_scenario(spec, reps=4, threads=2, **kw)
    assert threaded.rows == whole.rows


def test_summary_matches_raw_rows(spec):
    res = run_scenario(spec, patterns=["X1"], estimators=["gformula"], reps=5)
    rows = list(csv.DictReader(io.StringIO(res.to_csv())))
    vals = np.array([float(r["value"]) for r in rows
                     if r["pattern"] == "X1" and r["estimator"] == "gformula"])
    st = res.stat("X1", "gformula")
    assert st["mean"] == pytest.approx(vals.mean())
    assert st["sd"] == pytest.approx(vals.std(ddof=1))
    assert st["bias"] == pytest.approx(vals.mean() - 50.0)
    assert "bias" not in res.stat("X1", "theory")


def test_failed_estimator_calls_are_recorded(spec):
    res = run_scenario(spec, patterns=["none"], estimators=["no-such"], reps=1)
    with pytest.raises(KeyError):
        res.stat("none", "gformula")
    assert res.values("none", "no-such").size == 1


def test_scenario_registry_is_complete():
    assert {"paper-fig3", "paper-table4", "proxy-sweep", "imputation", "boxm-sweep",
            "heterogeneity-A", "heterogeneity-B", "attenuation"} <= set(SCENARIOS)


def _complete_rct(seed=0, n=4000):
    rng = np.random.default_rng(seed)
    X = rng.normal(1, 1, size=(n, 2))
    A = rng.integers(0, 2, n).astype(float)
    Y = X[:, 1] + A * (10 * X[:, 0]) + rng.normal(size=n)
    return CombinedSample(X, np.ones(n), A, Y)


def test_biased_subsample_partition_and_sign():
    rct = _complete_rct()
    rng = np.random.default_rng(1)
    trial, obs = biased_subsample(rct, "X1", (0.0, 0.0), rng)
    full_dm = difference_in_means(rct).value
    assert abs(difference_in_means(trial).value - full_dm) < 1.5
    assert trial.n + obs.m <= rct.n
    shared = {tuple(r) for r in trial.covariates} & {tuple(r) for r in obs.covariates}
    assert not shared
    # favouring low X1 lowers the trial effect since its CATE coefficient is positive
    low, _ = biased_subsample(rct, "X1", (0.0, -3.0), np.random.default_rng(2))
    assert difference_in_means(low).value < full_dm - 2
    with pytest.raises(EmptySelection):
        biased_subsample(rct, "X1", (-800.0, 0.0), rng)
