"""Dataset container, CSV ingestion and the validation / extrapolation split.

Group ids for the two-factor rule are ``2 * g1 + g2``.  With the default
birth-weight x marital-status rule this gives::

    0 = LS (low, single)   1 = LM (low, married)
    2 = HS (high, single)  3 = HM (high, married)
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, replace
from pathlib import Path
from typing import Mapping, Sequence

import numpy as np

from .errors import ConfigError, ParseError, SchemaError, SupportError

GROUP_LABELS = ("LS", "LM", "HS", "HM")

# column names used when writing a Dataset back to CSV
TREATMENT_COL = "a"
OUTCOME_COL = "y"
GROUP_COL = "g"
SOURCE_COL = "d"


@dataclass(frozen=True)
class Dataset:
    covariates: np.ndarray
    treatment: np.ndarray
    outcome: np.ndarray
    group: np.ndarray
    source_id: int = 0
    n_groups: int = 4
    covariate_names: tuple[str, ...] = ()

    def __post_init__(self):
        X = np.asarray(self.covariates, dtype=float)
        n = len(self.treatment)
        if X.ndim == 1:
            X = X.reshape(n, -1) if n else X.reshape(0, 0)
        a = np.asarray(self.treatment)
        y = np.asarray(self.outcome, dtype=float)
        g = np.asarray(self.group)
        if n < 1:
            raise ConfigError("dataset must contain at least one row")
        if not (X.shape[0] == len(y) == len(g) == n):
            raise ConfigError(
                f"column lengths disagree: X={X.shape[0]}, a={n}, y={len(y)}, g={len(g)}"
            )
        if not np.all((a == 0) | (a == 1)):
            bad = int(np.flatnonzero((a != 0) & (a != 1))[0])
            raise ParseError(f"treatment must be 0 or 1, got {a[bad]!r}", row=bad)
        if np.any(g < 0) or np.any(g >= self.n_groups) or np.any(g != np.floor(g)):
            bad = int(np.flatnonzero((g < 0) | (g >= self.n_groups) | (g != np.floor(g)))[0])
            raise ParseError(
                f"group id {g[bad]!r} outside 0..{self.n_groups - 1}", row=bad
            )
        names = tuple(self.covariate_names) or tuple(f"x{j}" for j in range(X.shape[1]))
        if len(names) != X.shape[1]:
            raise ConfigError("covariate_names length does not match covariate columns")
        object.__setattr__(self, "covariates", X)
        object.__setattr__(self, "treatment", a.astype(np.int8))
        object.__setattr__(self, "outcome", y)
        object.__setattr__(self, "group", g.astype(np.int64))
        object.__setattr__(self, "covariate_names", names)
        for arr in (X, self.treatment, y, self.group):
            arr.setflags(write=False)

    @property
    def n(self) -> int:
        return len(self.outcome)

    @property
    def d(self) -> int:
        return self.covariates.shape[1]

    def group_counts(self) -> np.ndarray:
        return np.bincount(self.group, minlength=self.n_groups)

    def subset(self, mask) -> "Dataset":
        mask = np.asarray(mask)
        return replace(
            self,
            covariates=self.covariates[mask],
            treatment=self.treatment[mask],
            outcome=self.outcome[mask],
            group=self.group[mask],
        )

    def select_columns(self, names: Sequence[str]) -> "Dataset":
        idx = [self.column_index(c) for c in names]
        return replace(self, covariates=self.covariates[:, idx], covariate_names=tuple(names))

    def column_index(self, name: str) -> int:
        try:
            return self.covariate_names.index(name)
        except ValueError:
            raise SchemaError(f"covariate column {name!r} not present") from None


@dataclass(frozen=True)
class GroupSupport:
    validation_groups: frozenset[int]
    extrapolated_groups: frozenset[int]
    n_groups: int = 4

    def __post_init__(self):
        if self.validation_groups & self.extrapolated_groups:
            raise ConfigError("validation and extrapolated groups overlap")
        if self.validation_groups | self.extrapolated_groups != frozenset(range(self.n_groups)):
            raise ConfigError("group support does not partition 0..I-1")


# --------------------------------------------------------------------------- CSV


@dataclass
class Schema:
    """Column mapping for :func:`load_dataset`.

    ``covariates=None`` takes every column not claimed by another field.
    Either ``group`` or ``group_rule`` must be supplied; ``group_rule`` is
    forwarded to :func:`assign_groups`.
    """

    treatment: str = TREATMENT_COL
    outcome: str = OUTCOME_COL
    group: str | None = GROUP_COL
    source: str | None = None
    source_id: int = 0
    covariates: Sequence[str] | None = None
    group_rule: tuple | None = None
    n_groups: int = 4

    @classmethod
    def from_mapping(cls, m: Mapping) -> "Schema":
        known = {f for f in cls.__dataclass_fields__}
        extra = set(m) - known
        if extra:
            raise SchemaError(f"unknown schema keys: {sorted(extra)}")
        kw = dict(m)
        if kw.get("group_rule") is not None:
            kw["group_rule"] = tuple(tuple(r) for r in kw["group_rule"])
        return cls(**kw)


def _parse_float(text: str, row: int, col: str) -> float:
    try:
        v = float(text)
    except ValueError:
        raise ParseError(f"column {col!r}: cannot parse {text!r} as a number", row=row) from None
    if math.isnan(v):
        raise ParseError(f"column {col!r}: missing value", row=row)
    return v


def load_dataset(path, schema: Schema | Mapping | None = None) -> Dataset:
    """Read a headed UTF-8 CSV into a validated :class:`Dataset`.

    Row indices in errors are 0-based data rows (the header is not counted).
    Rows with an empty or NaN entry in any used column are rejected.
    """
    if schema is None:
        schema = Schema()
    elif not isinstance(schema, Schema):
        schema = Schema.from_mapping(schema)
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ParseError("empty file (header required)") from None
        header = [h.strip() for h in header]
        rows = list(reader)

    required = [schema.treatment, schema.outcome]
    if schema.group is not None and schema.group_rule is None:
        required.append(schema.group)
    if schema.source is not None:
        required.append(schema.source)
    for col in required:
        if col not in header:
            raise SchemaError(f"column {col!r} absent from {path.name}")
    claimed = set(required) | {schema.group}
    if schema.covariates is None:
        cov_names = [h for h in header if h not in claimed]
    else:
        cov_names = list(schema.covariates)
        for col in cov_names:
            if col not in header:
                raise SchemaError(f"covariate column {col!r} absent from {path.name}")
    pos = {h: j for j, h in enumerate(header)}

    n = len(rows)
    X = np.empty((n, len(cov_names)))
    a = np.empty(n)
    y = np.empty(n)
    g = np.zeros(n)
    src = None
    for i, row in enumerate(rows):
        if len(row) != len(header):
            raise ParseError(f"expected {len(header)} fields, found {len(row)}", row=i)
        for j, c in enumerate(cov_names):
            X[i, j] = _parse_float(row[pos[c]], i, c)
        a[i] = _parse_float(row[pos[schema.treatment]], i, schema.treatment)
        if a[i] not in (0.0, 1.0):
            raise ParseError(f"treatment must be 0 or 1, got {row[pos[schema.treatment]]!r}", row=i)
        y[i] = _parse_float(row[pos[schema.outcome]], i, schema.outcome)
        if schema.group_rule is None and schema.group is not None:
            g[i] = _parse_float(row[pos[schema.group]], i, schema.group)
        if schema.source is not None:
            s = int(_parse_float(row[pos[schema.source]], i, schema.source))
            if src is None:
                src = s
            elif s != src:
                raise ParseError(f"mixed source ids {src} and {s} in one file", row=i)

    ds = Dataset(
        covariates=X,
        treatment=a,
        outcome=y,
        group=g,
        source_id=schema.source_id if src is None else src,
        n_groups=schema.n_groups,
        covariate_names=tuple(cov_names),
    )
    if schema.group_rule is not None:
        ds = assign_groups(ds, schema.group_rule)
    return ds


def save_dataset(ds: Dataset, path) -> None:
    """Write ``ds`` with ``repr`` floats so a reload is bit-identical."""
    path = Path(path)
    header = list(ds.covariate_names) + [TREATMENT_COL, OUTCOME_COL, GROUP_COL, SOURCE_COL]
    with path.open("w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(header)
        for i in range(ds.n):
            w.writerow(
                [repr(float(v)) for v in ds.covariates[i]]
                + [int(ds.treatment[i]), repr(float(ds.outcome[i])), int(ds.group[i]), ds.source_id]
            )


# ------------------------------------------------------------------ group logic


def _binarize(ds: Dataset, col, threshold) -> np.ndarray:
    j = col if isinstance(col, (int, np.integer)) else ds.column_index(col)
    if not 0 <= j < ds.d:
        raise ConfigError(f"covariate index {j} out of range (d={ds.d})")
    x = ds.covariates[:, j]
    if threshold is None:
        if not np.all((x == 0) | (x == 1)):
            raise ConfigError(
                f"covariate {ds.covariate_names[j]!r} is not binary; supply a threshold"
            )
        return x.astype(np.int64)
    # ties at the threshold count as "high"
    return (x >= threshold).astype(np.int64)


def assign_groups(ds: Dataset, rule) -> Dataset:
    """Cross two binarized covariates into four groups, id ``2*g1 + g2``.

    ``rule`` is ``((col1, thr1), (col2, thr2))``; a column is a name or an
    index, and a ``None`` threshold means the column must already be 0/1.
    """
    try:
        (c1, t1), (c2, t2) = rule
    except (TypeError, ValueError):
        raise ConfigError(f"group rule must be two (column, threshold) pairs, got {rule!r}") from None
    g = 2 * _binarize(ds, c1, t1) + _binarize(ds, c2, t2)
    return replace(ds, group=g, n_groups=4)


def split_support(rct: Dataset, obs: Sequence[Dataset]) -> GroupSupport:
    n_groups = rct.n_groups
    for k, o in enumerate(obs):
        if o.n_groups != n_groups:
            raise ConfigError(
                f"observational dataset {k} has {o.n_groups} groups, RCT has {n_groups}"
            )
        missing = np.flatnonzero(o.group_counts() == 0)
        if missing.size:
            raise SupportError(
                f"observational dataset {k} (source {o.source_id}) has no rows in groups "
                f"{missing.tolist()}"
            )
    counts = rct.group_counts()
    i_r = frozenset(int(i) for i in np.flatnonzero(counts > 0))
    i_o = frozenset(range(n_groups)) - i_r
    return GroupSupport(i_r, i_o, n_groups)
