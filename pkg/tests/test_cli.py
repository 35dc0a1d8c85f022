import csv
import io
import json
from types import SimpleNamespace

import numpy as np
import pytest

from transport_ate import write_csv
from transport_ate.cli import config_hash, main, parse_range
from transport_ate.exceptions import InputError
from transport_ate.sensitivity import proxy_bias


@pytest.fixture(scope="module")
def files(tmp_path_factory, reference_sample):
    d = tmp_path_factory.mktemp("data")
    rows = np.r_[0:600, reference_sample.n:reference_sample.n + 1500]
    small = reference_sample.take(rows)
    out = {}
    out["combined"] = d / "combined.csv"
    write_csv(small, out["combined"])
    out["rct"], out["obs"] = d / "rct.csv", d / "obs.csv"
    trial_rows = np.flatnonzero(small.trial_mask)
    obs_rows = np.flatnonzero(small.obs_mask)
    _write_split(small, trial_rows, out["rct"], with_outcome=True)
    _write_split(small, obs_rows, out["obs"], with_outcome=False)
    out["no_x1_obs"] = d / "no_x1_obs.csv"
    write_csv(reference_sample.mask(["X1"], "observational").take(rows), out["no_x1_obs"])
    out["no_x1_trial"] = d / "no_x1_trial.csv"
    write_csv(reference_sample.mask(["X1"], "trial").take(rows), out["no_x1_trial"])
    out["full_no_x1_obs"] = d / "full_no_x1_obs.csv"
    write_csv(reference_sample.mask(["X1"], "observational"), out["full_no_x1_obs"])
    return out


def _write_split(sample, rows, path, with_outcome):
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        head = ["S", "A", "Y"] if with_outcome else ["S"]
        w.writerow(head + list(sample.covariate_names))
        for i in rows:
            lead = [int(sample.study[i])]
            if with_outcome:
                lead += [int(sample.treatment[i]), repr(float(sample.outcome[i]))]
            w.writerow(lead + [repr(float(v)) for v in sample.covariates[i]])


def _run(capsys, *argv):
    code = main([str(a) for a in argv])
    out, err = capsys.readouterr()
    return code, out, err


def test_parse_range():
    np.testing.assert_allclose(parse_range("-1:1:5"), [-1, -0.5, 0, 0.5, 1])
    assert parse_range("2:2:1").tolist() == [2.0]
    for bad in ("1:0:3", "0:1:0", "a:b"):
        with pytest.raises(InputError):
            parse_range(bad)


def test_estimate_gformula_from_split_files(capsys, files):
    code, out, _ = _run(capsys, "estimate", "--rct", files["rct"], "--obs", files["obs"],
                        "--estimator", "gformula", "--outcome", "Y", "--treatment", "A")
    assert code == 0
    payload = json.loads(out)
    assert payload["estimator"] == "gformula" and 45 < payload["value"] < 55
    assert {"tool_version", "seed", "config_hash"} <= set(payload)


def test_estimate_bootstrap_replays_byte_identically(capsys, files, tmp_path):
    args = ["estimate", "--data", files["combined"], "--estimator", "aipsw", "--folds", "5",
            "--bootstrap", "100", "--seed", "7", "--threads", "1"]
    code, first, _ = _run(capsys, *args)
    assert code == 0
    _, second, _ = _run(capsys, *args[:-1], "2")
    assert first == second
    lo, hi = json.loads(first)["ci"]
    assert lo < json.loads(first)["value"] < hi


def test_aipsw_requires_seed(capsys, files):
    code, _, err = _run(capsys, "estimate", "--data", files["combined"], "--estimator", "aipsw")
    assert code == 2 and "--seed" in err


def test_missing_study_column_exits_2(capsys, tmp_path):
    f = tmp_path / "bad.csv"
    f.write_text("A,Y,X1\n1,2,3\n")
    code, _, err = _run(capsys, "estimate", "--data", f, "--estimator", "dm")
    assert code == 2 and "column 'S' not found" in err


def test_totally_missing_grid_size(capsys):
    code, out, _ = _run(capsys, "sensitivity", "--pattern", "totally-missing",
                        "--delta-range", "-40:40:81", "--shift-range", "-1:1:81")
    assert code == 0
    lines = out.splitlines()
    assert lines[0] == "delta_mis,shift,bias" and len(lines) == 1 + 6561


def test_missing_in_rct_writes_all_outputs(capsys, files, tmp_path):
    stem = tmp_path / "map"
    code, _, _ = _run(capsys, "sensitivity", "--pattern", "missing-in-rct", "--data",
                      files["no_x1_trial"], "--delta-range", "-30:30:7", "--shift-range", "-1:1:9",
                      "--marker", "30,0.3", "--format", "svg", "--out", stem)
    assert code == 0
    meta = json.loads((tmp_path / "map.json").read_text())
    assert meta["covariate"] == "X1" and meta["threshold"] > 0
    assert "p_value" in meta["assumptions"]["shared_covariance_box_m"]
    assert (tmp_path / "map.svg").read_bytes().startswith(b"<?xml")
    assert len((tmp_path / "map.csv").read_text().splitlines()) == 1 + 63


def test_pattern_contradicting_data_exits_4(capsys, files):
    code, _, err = _run(capsys, "sensitivity", "--pattern", "missing-in-rct", "--data",
                        files["no_x1_obs"])
    assert code == 4 and "missing-in-trial" in err


def test_missing_in_obs_table(capsys, files):
    code, out, _ = _run(capsys, "sensitivity", "--pattern", "missing-in-obs", "--data",
                        files["full_no_x1_obs"], "--expectations", "0.8:1.2:5", "--format", "csv")
    assert code == 0
    vals = [float(line.split(",")[1]) for line in out.splitlines()[1:]]
    np.testing.assert_allclose(vals, [44, 47, 50, 53, 56], atol=1.0)


def test_proxy_curve_matches_formula(capsys):
    code, out, _ = _run(capsys, "sensitivity", "--pattern", "proxy", "--sigma-prox", "0:3:31",
                        "--delta", "30", "--shift", "0.27", "--sigma-mis", "1", "--format", "csv")
    assert code == 0
    rows = list(csv.DictReader(io.StringIO(out)))
    assert len(rows) == 31
    for r in rows:
        assert float(r["bias"]) == proxy_bias(30, 0.27, 1, float(r["sigma_prox"]))


def test_simulate_single_replicate_and_replay(capsys, tmp_path):
    outs = []
    for k in range(2):
        stem = tmp_path / f"sim{k}"
        code, table, _ = _run(capsys, "simulate", "--scenario", "paper-fig3", "--reps", "1",
                              "--seed", "3", "--out", stem)
        assert code == 0 and "pattern" in table
        outs.append((stem.with_suffix(".csv").read_bytes(), stem.with_suffix(".json").read_bytes()))
    assert outs[0] == outs[1]
    summary = json.loads(outs[0][1])["summary"]
    assert all(row["sd"] is None for row in summary)


def test_simulate_from_spec_file(capsys, tmp_path):
    spec = tmp_path / "spec.json"
    spec.write_text(json.dumps({"mean": [1, 1], "cov": [[1, 0], [0, 1]], "beta": [1, 1],
                                "delta": [2, 0], "beta_s": [-0.5, 0], "target_size": 2000,
                                "obs_size": 2000}))
    code, out, _ = _run(capsys, "simulate", "--spec", spec, "--reps", "2", "--seed", "1",
                        "--patterns", "none,X1", "--estimators", "dm,gformula")
    assert code == 0
    assert json.loads(out)["scenario"] == "user-spec"


def test_simulate_errors(capsys):
    assert _run(capsys, "simulate", "--scenario", "nope", "--seed", "1")[0] == 2
    assert _run(capsys, "simulate", "--scenario", "paper-fig3")[0] == 2


def test_diagnose(capsys, files, tmp_path):
    code, out, _ = _run(capsys, "diagnose", "--data", files["combined"])
    assert code == 0
    payload = json.loads(out)
    assert 0 <= payload["box_m"]["p_value"] <= 1 and payload["box_m"]["dof"] == 15
    assert set(payload["variance_ratio_trial_over_obs"]) == {"X1", "X2", "X3", "X4", "X5"}
    code, out, _ = _run(capsys, "diagnose", "--data", files["combined"], "--covariates", "X2")
    assert json.loads(out)["box_m"]["dof"] == 1


def test_diagnose_identical_strata_and_singular(capsys, tmp_path):
    f = tmp_path / "same.csv"
    X = np.random.default_rng(0).normal(size=(30, 2))
    with open(f, "w") as fh:
        fh.write("S,A,Y,X1,X2\n")
        for i, x in enumerate(X):
            fh.write(f"1,{i % 2},1.0,{x[0]:.17g},{x[1]:.17g}\n")
        for x in X:
            fh.write(f"0,,,{x[0]:.17g},{x[1]:.17g}\n")
    code, out, _ = _run(capsys, "diagnose", "--data", f)
    assert code == 0 and json.loads(out)["box_m"]["p_value"] == 1.0
    g = tmp_path / "singular.csv"
    g.write_text("S,A,Y,X1,X2\n" + "".join(f"{s},{'1' if s else ''},{'1' if s else ''},{i},{2 * i}\n"
                                             for s in (1, 0) for i in range(6)))
    assert _run(capsys, "diagnose", "--data", g)[0] == 3


def test_config_hash_ignores_output_location(files):
    a = SimpleNamespace(seed=1, data=[str(files["combined"])], out="x", threads=1)
    b = SimpleNamespace(seed=1, data=[str(files["combined"])], out="y", threads=4)
    assert config_hash(a) == config_hash(b)
