"""Command-line interface: ``transport-ate {estimate,sensitivity,simulate,diagnose}``.

Exit codes: 0 success, 2 input error, 3 numerical failure, 4 pattern mismatch.
Log verbosity is read from ``TRANSPORT_ATE_LOG`` (error, info or debug).
"""

from __future__ import annotations

import argparse
import hashlib
import json
import logging
import math
import os
import re
import sys
from pathlib import Path

import numpy as np

from . import __version__
from .data import CombinedSample, Schema, detect_pattern, load_csv
from .estimators import EstimatorKind, bootstrap_ci, make_estimator
from .exceptions import InputError, NumericalError, PatternMismatch, TransportError
from .maps import render_grid
from .sensitivity import (
    SIGN_CONVENTION,
    box_m_observed,
    procedure_missing_in_obs,
    procedure_missing_in_rct,
    procedure_totally_missing,
    proxy_bias,
    proxy_bias_estimated,
    robinson_rlearner,
)
from .simulation import SCENARIOS, MissingPattern, ScenarioSpec, run_scenario

logger = logging.getLogger("transport_ate")

EXIT_OK, EXIT_INPUT, EXIT_NUMERIC, EXIT_PATTERN = 0, 2, 3, 4


# -- helpers -----------------------------------------------------------------


def parse_range(text: str) -> np.ndarray:
    """``lo:hi:steps`` with inclusive endpoints."""
    try:
        lo, hi, steps = text.split(":")
        lo, hi, steps = float(lo), float(hi), int(steps)
    except ValueError:
        raise InputError(f"range {text!r} must look like lo:hi:steps") from None
    if steps < 1 or lo > hi:
        raise InputError(f"range {text!r} needs steps >= 1 and lo <= hi")
    if steps == 1:
        return np.array([lo])
    return np.linspace(lo, hi, steps)


def _jsonable(obj):
    if isinstance(obj, dict):
        return {str(k): _jsonable(v) for k, v in obj.items()}
    if isinstance(obj, (list, tuple)):
        return [_jsonable(v) for v in obj]
    if isinstance(obj, np.ndarray):
        return _jsonable(obj.tolist())
    if isinstance(obj, (np.floating, float)):
        v = float(obj)
        return None if math.isnan(v) or math.isinf(v) else v
    if isinstance(obj, np.integer):
        return int(obj)
    if isinstance(obj, np.bool_):
        return bool(obj)
    if hasattr(obj, "value") and isinstance(getattr(obj, "value"), str):
        return obj.value
    return obj


def dumps(payload: dict) -> str:
    return json.dumps(_jsonable(payload), sort_keys=True, indent=2) + "\n"


def config_hash(args: argparse.Namespace) -> str:
    cfg = {k: v for k, v in vars(args).items() if k not in ("out", "threads", "func", "format")}
    h = hashlib.sha256(json.dumps(_jsonable(cfg), sort_keys=True, default=str).encode())
    for key in ("data", "rct", "obs"):
        for path in getattr(args, key, None) or []:
            h.update(Path(path).read_bytes())
    return h.hexdigest()[:16]


def provenance(args) -> dict:
    return {"tool_version": __version__, "seed": args.seed, "config_hash": config_hash(args)}


def _write(stem: str, suffix: str, content: str | bytes):
    path = Path(f"{stem}{suffix}")
    if path.parent and not path.parent.exists():
        path.parent.mkdir(parents=True)
    path.write_bytes(content if isinstance(content, bytes) else content.encode("utf-8"))
    logger.info("wrote %s", path)


def _emit(args, payload: dict, csv_text: str | None = None, svg: bytes | None = None):
    text = dumps(payload)
    if args.out:
        _write(args.out, ".json", text)
        if csv_text is not None:
            _write(args.out, ".csv", csv_text)
        if svg is not None and args.format == "svg":
            _write(args.out, ".svg", svg)
    fmt = args.format or "json"
    if fmt == "csv" and csv_text is not None:
        sys.stdout.write(csv_text)
    elif fmt == "svg" and svg is not None:
        sys.stdout.write(svg.decode("utf-8"))
    elif not args.out or fmt == "json":
        sys.stdout.write(text)


def load_inputs(args) -> CombinedSample:
    schema = Schema(
        study=args.study,
        treatment=args.treatment,
        outcome=args.outcome,
        covariates=tuple(args.covariates.split(",")) if getattr(args, "covariates", None) else None,
    )
    paths = list(args.data or []) + list(args.rct or []) + list(args.obs or [])
    if not paths:
        raise InputError("no input data: pass --data or --rct/--obs")
    for p in paths:
        if not Path(p).is_file():
            raise InputError(f"input file {p} does not exist")
    return load_csv(paths, schema)


def _need_seed(args, why: str):
    if args.seed is None:
        raise InputError(f"--seed is required {why}")


# -- subcommands ---------------------------------------------------------------


def cmd_estimate(args) -> int:
    sample = load_inputs(args)
    kind = EstimatorKind(args.estimator)
    if kind is EstimatorKind.AIPSW or args.bootstrap:
        _need_seed(args, f"for {'the bootstrap' if args.bootstrap else 'cross-fitting'}")
    params = dict(e1=args.e1, normalize=args.normalize, n_folds=args.folds,
                  seed=args.seed if args.seed is not None else 0,
                  outcome_model=args.outcome_model)
    est = make_estimator(kind, **params)
    result = est.fit(sample).estimate_
    if args.bootstrap:
        interval = bootstrap_ci(sample, lambda s: make_estimator(kind, **params).fit(s).ate_,
                                reps=args.bootstrap, seed=args.seed, threads=args.threads)
        result = result.with_ci(interval.low, interval.high, bootstrap_reps=interval.replicates,
                                bootstrap_failures=interval.failures)
    payload = result.to_dict(seed=args.seed)
    payload.update(provenance(args))
    payload["metadata"] = {"ignored_observational_columns": list(sample.metadata.get("ignored_observational_columns", [])),
                           "pattern": detect_pattern(sample).to_dict()}
    csv_text = "estimator,value,ci_low,ci_high\n{},{},{},{}\n".format(
        kind.value, format(result.value, ".17g"),
        "" if result.ci_low is None else format(result.ci_low, ".17g"),
        "" if result.ci_high is None else format(result.ci_high, ".17g"),
    )
    _emit(args, payload, csv_text)
    return EXIT_OK


def cmd_sensitivity(args) -> int:
    pattern_name = args.pattern
    meta = {"pattern": pattern_name, "sign_convention": SIGN_CONVENTION}
    if pattern_name == "totally-missing":
        grid = procedure_totally_missing(parse_range(args.delta_range), parse_range(args.shift_range),
                                         args.threshold)
    elif pattern_name == "missing-in-rct":
        sample = load_inputs(args)
        marker = None
        if args.marker:
            d, s = (float(v) for v in args.marker.split(","))
            marker = {"delta": d, "shift": s}
        grid = procedure_missing_in_rct(sample, detect_pattern(sample), parse_range(args.delta_range),
                                        parse_range(args.shift_range), args.threshold,
                                        args.missing, marker)
    elif pattern_name == "missing-in-obs":
        sample = load_inputs(args)
        ests = procedure_missing_in_obs(sample, None, parse_range(args.expectations), args.e1,
                                        args.stage1, args.missing)
        rows = [(e.diagnostics["hypothesized_mean"], e.value) for e in ests]
        csv_text = "expectation,ate\n" + "".join(
            f"{format(a, '.17g')},{format(b, '.17g')}\n" for a, b in rows)
        meta.update(estimates=[e.to_dict(seed=args.seed) for e in ests],
                    covariate=ests[0].diagnostics["covariate"])
        meta.update(provenance(args))
        _emit(args, meta, csv_text)
        return EXIT_OK
    elif pattern_name == "proxy":
        sigmas = parse_range(args.sigma_prox)
        if args.delta is not None:
            if args.shift is None or args.sigma_mis is None:
                raise InputError("--delta needs --shift and --sigma-mis")
            bias = [proxy_bias(args.delta, args.shift, args.sigma_mis, s) for s in sigmas]
            meta.update(formula="attenuation", delta_mis=args.delta, shift=args.shift,
                        sigma_mis=args.sigma_mis)
        else:
            if not args.proxy:
                raise InputError("pass either --delta/--shift or --proxy with data")
            sample = load_inputs(args)
            pat = detect_pattern(sample)
            pj = sample.index_of(args.proxy)[0]
            if pj not in pat.obs_idx:
                raise PatternMismatch(f"proxy '{args.proxy}' must be observed in both strata")
            fit = robinson_rlearner(sample, args.e1, args.stage1, covariates=list(pat.obs_idx))
            d_prox = fit.coefficient(args.proxy)
            x = sample.covariates[:, pj]
            shift_prox = float(x[sample.obs_mask].mean() - x[sample.trial_mask].mean())
            sigma_mis = args.sigma_mis
            if sigma_mis is None:
                if not args.missing:
                    raise InputError("pass --sigma-mis or --missing to estimate it")
                mj = sample.index_of(args.missing)[0]
                col = sample.covariates[:, mj]
                col = col[~np.isnan(col)]
                if col.size < 2:
                    raise PatternMismatch(f"'{args.missing}' is not observed in either stratum")
                sigma_mis = float(np.std(col, ddof=1))
            bias = [proxy_bias_estimated(d_prox, shift_prox, sigma_mis, s) for s in sigmas]
            meta.update(formula="estimated-attenuation", delta_prox_hat=d_prox,
                        shift_prox=shift_prox, sigma_mis=sigma_mis)
        csv_text = "sigma_prox,bias\n" + "".join(
            f"{format(s, '.17g')},{format(b, '.17g')}\n" for s, b in zip(sigmas, bias))
        meta.update(provenance(args))
        _emit(args, meta, csv_text)
        return EXIT_OK
    else:  # pragma: no cover - argparse restricts choices
        raise InputError(f"unknown pattern {pattern_name!r}")

    meta.update(grid.metadata)
    meta.update(threshold=grid.threshold, delta_steps=grid.delta_axis.size,
                shift_steps=grid.shift_axis.size, point_marker=grid.point_marker)
    meta.update(provenance(args))
    svg = render_grid(grid, "svg") if args.format == "svg" else None
    csv_text = render_grid(grid, "csv").decode("utf-8")
    if args.format in (None, "csv") and not args.out:
        sys.stdout.write(csv_text)
        return EXIT_OK
    _emit(args, meta, csv_text, svg)
    return EXIT_OK


def _summary_table(result) -> str:
    lines = [f"{'pattern':<28}{'estimator':<14}{'reps':>5}{'mean':>12}{'sd':>10}"]
    for row in result.summary():
        sd = "NA" if row["sd"] is None else f"{row['sd']:.4f}"
        lines.append(f"{row['pattern']:<28}{row['estimator']:<14}{row['reps']:>5}"
                     f"{row['mean']:>12.4f}{sd:>10}")
    return "\n".join(lines) + "\n"


def cmd_simulate(args) -> int:
    _need_seed(args, "for simulations")
    if args.spec:
        try:
            spec_dict = json.loads(Path(args.spec).read_text())
        except (OSError, json.JSONDecodeError) as exc:
            raise InputError(f"cannot read scenario file: {exc}") from None
        spec = ScenarioSpec.from_dict(dict(spec_dict, seed=args.seed,
                                           reps=args.reps or spec_dict.get("reps", 100)))
        patterns = [MissingPattern.parse(p) for p in args.patterns.split(",")]
        estimators = args.estimators.split(",")
        result = run_scenario(spec, patterns, estimators, threads=args.threads, name="user-spec")
    else:
        if args.scenario not in SCENARIOS:
            raise InputError(f"unknown scenario {args.scenario!r}; choose from {sorted(SCENARIOS)}")
        kwargs = dict(seed=args.seed, threads=args.threads)
        if args.reps:
            kwargs["reps"] = args.reps
        result = SCENARIOS[args.scenario](**kwargs)
    payload = result.to_dict()
    payload.update(provenance(args))
    if args.out:
        _write(args.out, ".json", dumps(payload))
        _write(args.out, ".csv", result.to_csv())
        sys.stdout.write(_summary_table(result))
    elif args.format == "csv":
        sys.stdout.write(result.to_csv())
    else:
        sys.stdout.write(dumps(payload))
    return EXIT_OK


def cmd_diagnose(args) -> int:
    sample = load_inputs(args)
    pattern = detect_pattern(sample)
    cols = list(pattern.obs_idx) if not args.covariates else sample.index_of(args.covariates.split(","))
    if any(j not in pattern.obs_idx for j in cols):
        raise PatternMismatch("diagnostics need covariates observed in both strata")
    names = [sample.covariate_names[j] for j in cols]
    box = box_m_observed(sample, cols)
    Xt, Xo = sample.trial_covariates(cols), sample.obs_covariates(cols)
    ct = np.atleast_2d(np.cov(Xt, rowvar=False))
    co = np.atleast_2d(np.cov(Xo, rowvar=False))
    ratios = {names[i]: float(ct[i, i] / co[i, i]) if co[i, i] > 0 else None for i in range(len(cols))}
    pairs = {}
    for i in range(len(cols)):
        for k in range(i + 1, len(cols)):
            corr = lambda c: float(c[i, k] / math.sqrt(c[i, i] * c[k, k]))
            pairs[f"{names[i]}:{names[k]}"] = {
                "trial_correlation": corr(ct), "observational_correlation": corr(co),
                "trial_covariance": float(ct[i, k]), "observational_covariance": float(co[i, k]),
            }
    payload = {"box_m": box, "covariates": names, "variance_ratio_trial_over_obs": ratios,
               "pairs": pairs, "n": sample.n, "m": sample.m}
    payload.update(provenance(args))
    _emit(args, payload)
    return EXIT_OK


# -- parser --------------------------------------------------------------------


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--seed", type=int, default=None, help="random seed (stochastic commands)")
    common.add_argument("--threads", type=int, default=os.cpu_count() or 1)
    common.add_argument("--out", default=None, help="output path stem; writes <stem>.json/.csv/.svg")
    common.add_argument("--format", choices=("json", "csv", "svg"), default=None)

    data = argparse.ArgumentParser(add_help=False)
    data.add_argument("--data", action="append", help="combined CSV with an S column")
    data.add_argument("--rct", action="append", help="trial CSV")
    data.add_argument("--obs", action="append", help="observational CSV")
    data.add_argument("--study", default="S")
    data.add_argument("--treatment", default="A")
    data.add_argument("--outcome", default="Y")
    data.add_argument("--covariates", default=None, help="comma-separated covariate columns")
    data.add_argument("--e1", type=float, default=0.5, help="trial treatment probability")

    p = argparse.ArgumentParser(prog="transport-ate", description=__doc__.splitlines()[0])
    p.add_argument("--version", action="version", version=__version__)
    sub = p.add_subparsers(dest="command", required=True)

    e = sub.add_parser("estimate", parents=[common, data], help="target-population ATE")
    e.add_argument("--estimator", choices=[k.value for k in EstimatorKind if k is not EstimatorKind.LINEAR_CATE],
                   default="gformula")
    e.add_argument("--folds", type=int, default=5)
    e.add_argument("--bootstrap", type=int, default=0, help="bootstrap replicates (0 = none)")
    e.add_argument("--normalize", action="store_true", help="ratio-form IPSW")
    e.add_argument("--outcome-model", default="linear", choices=("linear", "kernel", "constant"))
    e.set_defaults(func=cmd_estimate)

    s = sub.add_parser("sensitivity", parents=[common, data], help="bias grids and curves")
    s.add_argument("--pattern", required=True,
                   choices=("totally-missing", "missing-in-rct", "missing-in-obs", "proxy"))
    s.add_argument("--delta-range", default="-40:40:101")
    s.add_argument("--shift-range", default="-1:1:101")
    s.add_argument("--threshold", type=float, default=None)
    s.add_argument("--missing", default=None, help="name of the missing covariate")
    s.add_argument("--marker", default=None, help="delta,shift point to mark on the map")
    s.add_argument("--expectations", default="0.8:1.2:5")
    s.add_argument("--stage1", choices=("kernel", "linear"), default="kernel")
    s.add_argument("--sigma-prox", default="0:3:31")
    s.add_argument("--sigma-mis", type=float, default=None)
    s.add_argument("--delta", type=float, default=None)
    s.add_argument("--shift", type=float, default=None)
    s.add_argument("--proxy", default=None, help="proxy column name")
    s.set_defaults(func=cmd_sensitivity)

    m = sub.add_parser("simulate", parents=[common], help="Monte Carlo scenarios")
    m.add_argument("--scenario", default="paper-fig3", help=f"one of {', '.join(SCENARIOS)}")
    m.add_argument("--spec", default=None, help="JSON scenario file (overrides --scenario)")
    m.add_argument("--reps", type=int, default=None)
    m.add_argument("--patterns", default="none,X1")
    m.add_argument("--estimators", default="dm,gformula,ipsw,aipsw")
    m.set_defaults(func=cmd_simulate)

    d = sub.add_parser("diagnose", parents=[common, data], help="covariance homogeneity check")
    d.set_defaults(func=cmd_diagnose)
    return p


def _configure_logging():
    level = os.environ.get("TRANSPORT_ATE_LOG", "error").upper()
    logging.basicConfig(level=getattr(logging, level, logging.ERROR),
                        format="%(levelname)s %(name)s: %(message)s", stream=sys.stderr)


_NEGATIVE_VALUE = re.compile(r"^-[\d.]")


def _bind_negative_values(argv):
    """Rewrite ``--flag -1:1:5`` as ``--flag=-1:1:5`` so argparse keeps the value."""
    out = []
    for tok in argv:
        if out and out[-1].startswith("--") and "=" not in out[-1] and _NEGATIVE_VALUE.match(tok):
            out[-1] = f"{out[-1]}={tok}"
        else:
            out.append(tok)
    return out


def main(argv=None) -> int:
    _configure_logging()
    argv = sys.argv[1:] if argv is None else list(argv)
    args = build_parser().parse_args(_bind_negative_values(argv))
    try:
        return args.func(args)
    except PatternMismatch as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PATTERN
    except NumericalError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_NUMERIC
    except (InputError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT
    except TransportError as exc:  # pragma: no cover
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INPUT


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
