"""Combined trial + observational sample, covariate patterns and moments.

A :class:`CombinedSample` stacks the randomized trial rows (``S = 1``) on top
of the observational rows (``S = 0``).  Treatment and outcome exist only for
trial rows.  A covariate may be absent from a whole stratum, which is how the
missing-covariate patterns handled by :mod:`transport_ate.sensitivity` are
encoded; partial missingness inside a stratum is rejected.
"""

from __future__ import annotations

import csv
import enum
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from types import MappingProxyType
from typing import Iterable, Mapping, Sequence, Union

import numpy as np

from .exceptions import (
    EmptyStratum,
    InputError,
    InsufficientRows,
    MalformedRow,
    MissingBlock,
    PatternViolation,
)

logger = logging.getLogger(__name__)

ColumnKey = Union[int, str]
NA_TOKENS = frozenset({"", "NA"})


def _frozen(a, dtype=float) -> np.ndarray:
    out = np.array(a, dtype=dtype, copy=True)
    out.setflags(write=False)
    return out


@dataclass(frozen=True, eq=False)
class CombinedSample:
    """Unified trial and observational table.

    Parameters
    ----------
    covariates : array of shape (n + m, p)
        Covariate values, ``NaN`` where a covariate is absent.
    study : array of shape (n + m,)
        ``1`` for trial rows, ``0`` for observational rows.
    treatment, outcome : arrays of shape (n + m,)
        Defined (finite) exactly on trial rows, ``NaN`` elsewhere.
    covariate_names : sequence of str, optional
        Defaults to ``X1 .. Xp``.
    metadata : mapping, optional
        Free-form provenance flags (``imputed``, ignored columns, ...).
    """

    covariates: np.ndarray
    study: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    covariate_names: tuple = ()
    metadata: Mapping = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.covariates, dtype=float)
        if X.ndim == 1:
            X = X[:, None]
        if X.ndim != 2:
            raise InputError("covariates must be a 2-D array")
        N, p = X.shape
        names = tuple(self.covariate_names) or tuple(f"X{j + 1}" for j in range(p))
        if len(names) != p:
            raise InputError(f"{len(names)} covariate names for {p} columns")
        if len(set(names)) != p:
            raise InputError("covariate names must be unique")

        S = np.asarray(self.study)
        A = np.asarray(self.treatment, dtype=float)
        Y = np.asarray(self.outcome, dtype=float)
        for label, v in (("study", S), ("treatment", A), ("outcome", Y)):
            if v.shape != (N,):
                raise InputError(f"{label} has shape {v.shape}, expected ({N},)")
        if not np.all((S == 0) | (S == 1)):
            raise InputError("study indicator must be 0 or 1")
        S = S.astype(np.int8)
        trial = S == 1
        if np.any(np.isinf(X)):
            raise InputError("covariates contain infinite values")
        if not np.all(np.isfinite(A[trial])) or not np.all(np.isfinite(Y[trial])):
            raise InputError("treatment and outcome must be present on every trial row")
        if not np.all((A[trial] == 0) | (A[trial] == 1)):
            raise InputError("treatment must be 0 or 1 on trial rows")
        if np.any(~np.isnan(A[~trial])) or np.any(~np.isnan(Y[~trial])):
            raise InputError("treatment and outcome must be absent on observational rows")

        missing = np.isnan(X)
        for stratum, mask, label in ((1, trial, "trial"), (0, ~trial, "observational")):
            if not mask.any():
                continue
            frac = missing[mask].mean(axis=0)
            bad = np.flatnonzero((frac > 0) & (frac < 1))
            if bad.size:
                raise PatternViolation(
                    f"covariate '{names[bad[0]]}' is partially missing in the {label} "
                    f"stratum (S={stratum}); missingness must be whole-column per stratum"
                )

        object.__setattr__(self, "covariates", _frozen(X))
        object.__setattr__(self, "study", _frozen(S, np.int8))
        object.__setattr__(self, "treatment", _frozen(A))
        object.__setattr__(self, "outcome", _frozen(Y))
        object.__setattr__(self, "covariate_names", names)
        object.__setattr__(self, "metadata", MappingProxyType(dict(self.metadata)))

    # -- constructors ---------------------------------------------------
    @classmethod
    def from_strata(cls, X_trial, A, Y, X_obs, covariate_names=None, metadata=None):
        """Build a sample from separate trial and observational arrays."""
        X_trial = np.atleast_2d(np.asarray(X_trial, dtype=float))
        X_obs = np.atleast_2d(np.asarray(X_obs, dtype=float))
        if X_trial.shape[0] == 1 and np.ndim(A) == 1 and len(A) > 1:
            X_trial = X_trial.T
        if X_obs.shape[0] == 1 and X_trial.shape[1] == 1 and X_obs.shape[1] > 1:
            X_obs = X_obs.T
        n, m = X_trial.shape[0], X_obs.shape[0]
        return cls(
            covariates=np.vstack([X_trial, X_obs]),
            study=np.r_[np.ones(n, dtype=np.int8), np.zeros(m, dtype=np.int8)],
            treatment=np.r_[np.asarray(A, dtype=float), np.full(m, np.nan)],
            outcome=np.r_[np.asarray(Y, dtype=float), np.full(m, np.nan)],
            covariate_names=tuple(covariate_names or ()),
            metadata=metadata or {},
        )

    # -- basic accessors ------------------------------------------------
    @property
    def p(self) -> int:
        return self.covariates.shape[1]

    @property
    def trial_mask(self) -> np.ndarray:
        return self.study == 1

    @property
    def obs_mask(self) -> np.ndarray:
        return self.study == 0

    @property
    def n(self) -> int:
        return int(np.count_nonzero(self.study == 1))

    @property
    def m(self) -> int:
        return int(np.count_nonzero(self.study == 0))

    def __len__(self) -> int:
        return self.covariates.shape[0]

    def __repr__(self) -> str:
        return (
            f"CombinedSample(n={self.n}, m={self.m}, "
            f"covariates={list(self.covariate_names)})"
        )

    def index_of(self, keys: ColumnKey | Iterable[ColumnKey] | None) -> list[int]:
        """Resolve covariate names or positions to a sorted-as-given index list."""
        if keys is None:
            return list(range(self.p))
        if isinstance(keys, (str, int, np.integer)):
            keys = [keys]
        out = []
        for k in keys:
            if isinstance(k, (int, np.integer)):
                if not 0 <= k < self.p:
                    raise InputError(f"covariate index {k} out of range")
                out.append(int(k))
            else:
                try:
                    out.append(self.covariate_names.index(k))
                except ValueError:
                    raise InputError(f"column '{k}' not found") from None
        return out

    def trial_covariates(self, cols=None) -> np.ndarray:
        return self.covariates[np.ix_(self.trial_mask, self.index_of(cols))]

    def obs_covariates(self, cols=None) -> np.ndarray:
        return self.covariates[np.ix_(self.obs_mask, self.index_of(cols))]

    @property
    def trial_treatment(self) -> np.ndarray:
        return self.treatment[self.trial_mask]

    @property
    def trial_outcome(self) -> np.ndarray:
        return self.outcome[self.trial_mask]

    # -- derived samples -----------------------------------------------
    def replace(self, **changes) -> "CombinedSample":
        kwargs = dict(
            covariates=self.covariates,
            study=self.study,
            treatment=self.treatment,
            outcome=self.outcome,
            covariate_names=self.covariate_names,
            metadata=dict(self.metadata),
        )
        kwargs.update(changes)
        return CombinedSample(**kwargs)

    def take(self, rows) -> "CombinedSample":
        rows = np.asarray(rows)
        return self.replace(
            covariates=self.covariates[rows],
            study=self.study[rows],
            treatment=self.treatment[rows],
            outcome=self.outcome[rows],
        )

    def select(self, cols) -> "CombinedSample":
        idx = self.index_of(cols)
        return self.replace(
            covariates=self.covariates[:, idx],
            covariate_names=tuple(self.covariate_names[j] for j in idx),
        )

    def drop(self, cols) -> "CombinedSample":
        gone = set(self.index_of(cols))
        return self.select([j for j in range(self.p) if j not in gone])

    def mask(self, cols, where: str = "both") -> "CombinedSample":
        """Blank out covariates in ``"trial"``, ``"observational"`` or ``"both"`` strata."""
        rows = {
            "both": np.ones(len(self), dtype=bool),
            "trial": self.trial_mask,
            "observational": self.obs_mask,
        }[where]
        X = np.array(self.covariates)
        X[np.ix_(rows, self.index_of(cols))] = np.nan
        return self.replace(covariates=X)

    def with_column(self, name: str, values) -> "CombinedSample":
        values = np.asarray(values, dtype=float).reshape(-1, 1)
        return self.replace(
            covariates=np.hstack([self.covariates, values]),
            covariate_names=self.covariate_names + (name,),
        )

    def concat(self, other: "CombinedSample") -> "CombinedSample":
        if other.covariate_names != self.covariate_names:
            raise InputError("cannot concatenate samples with different covariates")
        order = lambda s: np.r_[np.flatnonzero(s.trial_mask), np.flatnonzero(s.obs_mask)]
        a, b = self.take(order(self)), other.take(order(other))
        # keep trial rows first
        S = np.r_[a.study, b.study]
        rows = np.r_[np.flatnonzero(S == 1), np.flatnonzero(S == 0)]
        stack = lambda u, v: np.concatenate([u, v])[rows]
        return self.replace(
            covariates=np.vstack([a.covariates, b.covariates])[rows],
            study=S[rows],
            treatment=stack(a.treatment, b.treatment),
            outcome=stack(a.outcome, b.outcome),
        )


class MissingLocation(str, enum.Enum):
    TOTALLY_MISSING = "totally-missing"
    MISSING_IN_TRIAL = "missing-in-trial"
    MISSING_IN_OBSERVATIONAL = "missing-in-observational"


@dataclass(frozen=True)
class CovariatePattern:
    """Which covariates are usable in both strata and where the others are absent."""

    covariate_names: tuple
    obs_idx: tuple
    mis_idx: tuple
    mis_location: Mapping

    def location(self, j: int) -> MissingLocation | None:
        return self.mis_location.get(j)

    @property
    def obs_names(self) -> list[str]:
        return [self.covariate_names[j] for j in self.obs_idx]

    @property
    def mis_names(self) -> list[str]:
        return [self.covariate_names[j] for j in self.mis_idx]

    def to_dict(self) -> dict:
        return {
            "observed": self.obs_names,
            "missing": {
                self.covariate_names[j]: loc.value for j, loc in self.mis_location.items()
            },
        }


def detect_pattern(sample: CombinedSample) -> CovariatePattern:
    """Classify each covariate as observed in both strata or missing somewhere."""
    missing = np.isnan(sample.covariates)
    gone_trial = missing[sample.trial_mask].all(axis=0) if sample.n else np.zeros(sample.p, bool)
    gone_obs = missing[sample.obs_mask].all(axis=0) if sample.m else np.zeros(sample.p, bool)
    obs_idx, mis_idx, where = [], [], {}
    for j in range(sample.p):
        if gone_trial[j] and gone_obs[j]:
            where[j] = MissingLocation.TOTALLY_MISSING
        elif gone_trial[j]:
            where[j] = MissingLocation.MISSING_IN_TRIAL
        elif gone_obs[j]:
            where[j] = MissingLocation.MISSING_IN_OBSERVATIONAL
        else:
            obs_idx.append(j)
            continue
        mis_idx.append(j)
    return CovariatePattern(
        covariate_names=sample.covariate_names,
        obs_idx=tuple(obs_idx),
        mis_idx=tuple(mis_idx),
        mis_location=MappingProxyType(where),
    )


class CovSource(str, enum.Enum):
    POOLED = "pooled"
    OBSERVATIONAL = "observational"
    TRIAL = "trial"


@dataclass(frozen=True, eq=False)
class MomentSummary:
    """Stratum means and a shared covariance matrix.

    Entries that cannot be estimated (covariate absent from the stratum that
    feeds them) are stored as ``NaN``; the block accessors raise
    :class:`~transport_ate.exceptions.MissingBlock` when such an entry is
    requested.
    """

    mean_target: np.ndarray
    mean_trial: np.ndarray
    cov: np.ndarray
    counts: tuple
    covariate_names: tuple
    cov_source: CovSource = CovSource.POOLED

    def _check(self, values, idx, what):
        bad = [self.covariate_names[j] for j, v in zip(idx, np.atleast_1d(values)) if np.isnan(v)]
        if bad:
            raise MissingBlock(f"{what} not estimable for covariate(s) {bad}")

    def target_mean(self, idx) -> np.ndarray:
        idx = list(np.atleast_1d(idx))
        out = self.mean_target[idx]
        self._check(out, idx, "target mean")
        return out

    def trial_mean(self, idx) -> np.ndarray:
        idx = list(np.atleast_1d(idx))
        out = self.mean_trial[idx]
        self._check(out, idx, "trial mean")
        return out

    def shift(self, idx) -> np.ndarray:
        """``E[X] - E[X | S=1]`` for the given covariates."""
        return self.target_mean(idx) - self.trial_mean(idx)

    def block(self, rows, cols) -> np.ndarray:
        rows, cols = list(np.atleast_1d(rows)), list(np.atleast_1d(cols))
        out = self.cov[np.ix_(rows, cols)]
        nan_rows = np.isnan(out).any(axis=1)
        nan_cols = np.isnan(out).any(axis=0)
        if nan_rows.any():
            bad = sorted({rows[i] for i in np.flatnonzero(nan_rows)}
                         | {cols[i] for i in np.flatnonzero(nan_cols)})
            bad = [self.covariate_names[j] for j in bad]
            raise MissingBlock(
                f"covariance block not estimable from the {self.cov_source.value} "
                f"stratum for covariate(s) {bad}"
            )
        return out


def default_cov_source(pattern: CovariatePattern) -> CovSource:
    locs = set(pattern.mis_location.values())
    if MissingLocation.MISSING_IN_TRIAL in locs:
        return CovSource.OBSERVATIONAL
    if MissingLocation.MISSING_IN_OBSERVATIONAL in locs:
        return CovSource.TRIAL
    return CovSource.POOLED


def _column_means(X: np.ndarray) -> np.ndarray:
    out = np.full(X.shape[1], np.nan)
    if X.shape[0] == 0:
        return out
    seen = ~np.isnan(X).any(axis=0)
    out[seen] = X[:, seen].mean(axis=0)
    return out


def _stratum_cov(X: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Unbiased covariance on the fully observed columns; NaN elsewhere."""
    p = X.shape[1]
    out = np.full((p, p), np.nan)
    seen = ~np.isnan(X).any(axis=0)
    if seen.any():
        out[np.ix_(seen, seen)] = np.atleast_2d(np.cov(X[:, seen], rowvar=False, ddof=1))
    return out, seen


def estimate_moments(
    sample: CombinedSample,
    pattern: CovariatePattern | None = None,
    cov_source: CovSource | str | None = None,
    covariates: Sequence[ColumnKey] | None = None,
) -> MomentSummary:
    """Per-stratum means and the covariance matrix used by the bias formulas.

    ``mean_target`` is computed on the observational rows, ``mean_trial`` on
    the trial rows.  The covariance uses the ``n - 1`` denominator on the rows
    selected by ``cov_source``; ``"pooled"`` is the within-stratum pooled
    covariance over covariates observed in both strata.

    When ``covariates`` is given, every one of them must have an estimable
    covariance entry, otherwise :class:`MissingBlock` is raised.
    """
    pattern = pattern or detect_pattern(sample)
    cov_source = CovSource(cov_source) if cov_source is not None else default_cov_source(pattern)
    Xt = sample.covariates[sample.trial_mask]
    Xo = sample.covariates[sample.obs_mask]
    n, m = len(Xt), len(Xo)

    if cov_source is CovSource.OBSERVATIONAL:
        if m < 2:
            raise InsufficientRows(f"need at least 2 observational rows, got {m}")
        cov, _ = _stratum_cov(Xo)
    elif cov_source is CovSource.TRIAL:
        if n < 2:
            raise InsufficientRows(f"need at least 2 trial rows, got {n}")
        cov, _ = _stratum_cov(Xt)
    else:
        if n < 2 or m < 2:
            raise InsufficientRows(f"pooled covariance needs 2 rows per stratum, got n={n}, m={m}")
        both = list(pattern.obs_idx)
        cov = np.full((sample.p, sample.p), np.nan)
        if both:
            ct = np.atleast_2d(np.cov(Xt[:, both], rowvar=False, ddof=1))
            co = np.atleast_2d(np.cov(Xo[:, both], rowvar=False, ddof=1))
            cov[np.ix_(both, both)] = ((n - 1) * ct + (m - 1) * co) / (n + m - 2)

    cov = 0.5 * (cov + cov.T)
    summary = MomentSummary(
        mean_target=_frozen(_column_means(Xo)),
        mean_trial=_frozen(_column_means(Xt)),
        cov=_frozen(cov),
        counts=(n, m),
        covariate_names=sample.covariate_names,
        cov_source=cov_source,
    )
    if covariates is not None:
        idx = sample.index_of(covariates)
        summary.block(idx, idx)
    return summary


# -- CSV ingestion ---------------------------------------------------------


@dataclass(frozen=True)
class Schema:
    """Column mapping for CSV ingestion.

    ``covariates=None`` takes every column that is not the study, treatment
    or outcome column.
    """

    study: str = "S"
    treatment: str = "A"
    outcome: str = "Y"
    covariates: tuple | None = None


def _parse_cell(token: str, path, line: int, column: str) -> float:
    token = token.strip()
    if token in NA_TOKENS:
        return math.nan
    try:
        value = float(token)
    except ValueError:
        raise MalformedRow(
            f"{path}:{line}: non-numeric value {token!r} in column '{column}'"
        ) from None
    if math.isnan(value):
        return math.nan
    return value


def _read_table(path, schema: Schema) -> tuple[list[str], dict[str, np.ndarray]]:
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise InputError(f"{path}: empty file") from None
        if schema.study not in header:
            raise InputError(f"{path}: column '{schema.study}' not found")
        if len(set(header)) != len(header):
            raise InputError(f"{path}: duplicated column names in header")
        rows = []
        for line, record in enumerate(reader, start=2):
            if not record or all(not c.strip() for c in record):
                continue
            if len(record) != len(header):
                raise MalformedRow(
                    f"{path}:{line}: expected {len(header)} fields, got {len(record)}"
                )
            rows.append([_parse_cell(c, path, line, col) for c, col in zip(record, header)])
    data = np.array(rows, dtype=float).reshape(len(rows), len(header))
    return header, {col: data[:, k] for k, col in enumerate(header)}


def load_csv(paths, schema: Schema | None = None) -> CombinedSample:
    """Read one or several CSV files into a validated :class:`CombinedSample`.

    Several files (e.g. a trial file and an observational file) are stacked.
    A covariate column absent from one file is treated as missing for that
    file's rows.  Absent cells are empty strings or ``NA``.  Treatment and
    outcome values supplied on observational rows are ignored; this is
    recorded under ``metadata["ignored_observational_columns"]``.
    """
    schema = schema or Schema()
    if isinstance(paths, (str, Path)):
        paths = [paths]
    reserved = {schema.study, schema.treatment, schema.outcome}
    tables = [_read_table(p, schema) for p in paths]

    if schema.covariates is not None:
        names = list(schema.covariates)
        for p, (header, _) in zip(paths, tables):
            if len(paths) == 1:
                absent = [c for c in names if c not in header]
                if absent:
                    raise InputError(f"{p}: column '{absent[0]}' not found")
    else:
        names = []
        for header, _ in tables:
            names += [c for c in header if c not in reserved and c not in names]
    if not names:
        raise InputError("no covariate columns")

    Xs, Ss, As, Ys = [], [], [], []
    for header, cols in tables:
        rows = len(cols[schema.study])
        nan = np.full(rows, np.nan)
        Xs.append(np.column_stack([cols.get(c, nan) for c in names]) if rows else np.empty((0, len(names))))
        Ss.append(cols[schema.study])
        As.append(cols.get(schema.treatment, nan))
        Ys.append(cols.get(schema.outcome, nan))
    X, S, A, Y = np.vstack(Xs), np.concatenate(Ss), np.concatenate(As), np.concatenate(Ys)

    if np.any(np.isnan(S)) or not np.all((S == 0) | (S == 1)):
        raise InputError(f"column '{schema.study}' must be 0 or 1 on every row")
    if not (S == 1).any():
        raise EmptyStratum("no trial rows (S=1)")
    if not (S == 0).any():
        raise EmptyStratum("no observational rows (S=0)")

    ignored = []
    obs = S == 0
    for label, v in ((schema.treatment, A), (schema.outcome, Y)):
        if np.any(~np.isnan(v[obs])):
            ignored.append(label)
            v[obs] = np.nan
    if ignored:
        logger.info("ignoring observational values of %s", ignored)

    trial = S == 1
    for label, v in ((schema.treatment, A), (schema.outcome, Y)):
        if np.isnan(v[trial]).any():
            raise InputError(f"column '{label}' must be present on every S=1 row")

    order = np.r_[np.flatnonzero(trial), np.flatnonzero(obs)]
    return CombinedSample(
        covariates=X[order],
        study=S[order],
        treatment=A[order],
        outcome=Y[order],
        covariate_names=tuple(names),
        metadata={"source": [str(p) for p in paths], "ignored_observational_columns": ignored},
    )


def _fmt(x: float) -> str:
    return "NA" if math.isnan(x) else format(float(x), ".17g")


def write_csv(sample: CombinedSample, path, schema: Schema | None = None) -> None:
    """Write ``sample`` in the ingestion format (17 significant digits)."""
    schema = schema or Schema()
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([schema.study, schema.treatment, schema.outcome, *sample.covariate_names])
        for i in range(len(sample)):
            a = sample.treatment[i]
            w.writerow(
                [
                    int(sample.study[i]),
                    "NA" if math.isnan(a) else int(a),
                    _fmt(sample.outcome[i]),
                    *(_fmt(v) for v in sample.covariates[i]),
                ]
            )
