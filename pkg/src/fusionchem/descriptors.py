"""Precomputed descriptor tables: loading, imputation, standardisation.

Tables are immutable; every operation returns a new one.  Statistics used
for imputation and standardisation are fitted on training rows and carried
as frozen objects so that test-time application cannot update them.
"""

from __future__ import annotations

import csv
import io
import math
from dataclasses import dataclass, field

import numpy as np

from .errors import AlignmentError, LoadError, ValidationError

CONSTANT_STD = 1e-12


@dataclass(frozen=True)
class ImputationStats:
    feature_names: tuple
    medians: tuple

    def to_dict(self):
        return {"feature_names": list(self.feature_names), "medians": list(self.medians)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["feature_names"]), tuple(d["medians"]))


@dataclass(frozen=True)
class StandardizationStats:
    """Per-feature mean and population stddev over the fitted rows.

    ``feature_names`` lists every input column; ``dropped`` the constant
    ones removed on application.
    """

    feature_names: tuple
    mean: tuple
    std: tuple
    dropped: tuple

    def to_dict(self):
        return {"feature_names": list(self.feature_names), "mean": list(self.mean),
                "std": list(self.std), "dropped": list(self.dropped)}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["feature_names"]), tuple(d["mean"]), tuple(d["std"]), tuple(d["dropped"]))


@dataclass(frozen=True, eq=False)
class DescriptorTable:
    sample_ids: tuple
    feature_names: tuple
    values: np.ndarray
    missing: np.ndarray = None
    standardization: StandardizationStats | None = None
    imputation: ImputationStats | None = field(default=None)

    def __post_init__(self):
        ids, names = tuple(self.sample_ids), tuple(self.feature_names)
        object.__setattr__(self, "sample_ids", ids)
        object.__setattr__(self, "feature_names", names)
        values = np.array(self.values, dtype=float).reshape(len(ids), len(names))
        missing = (np.isnan(values) if self.missing is None
                   else np.array(self.missing, dtype=bool).reshape(values.shape))
        values.setflags(write=False)
        missing.setflags(write=False)
        object.__setattr__(self, "values", values)
        object.__setattr__(self, "missing", missing)
        _check_unique(ids, "sample id")
        _check_unique(names, "feature name")

    @property
    def shape(self):
        return self.values.shape

    def column(self, name):
        return self.values[:, self.feature_names.index(name)]

    def rows(self, ids):
        """Sub-table with rows in the order of ``ids``; unknown ids raise."""
        index = {sid: i for i, sid in enumerate(self.sample_ids)}
        try:
            idx = [index[sid] for sid in ids]
        except KeyError as exc:
            raise AlignmentError(f"sample id {exc.args[0]!r} has no descriptor row") from None
        return DescriptorTable(tuple(ids), self.feature_names, self.values[idx], self.missing[idx],
                               self.standardization, self.imputation)


def _check_unique(items, what):
    seen = set()
    for item in items:
        if item in seen:
            raise LoadError(f"duplicate {what} {item!r}")
        seen.add(item)


def load_descriptor_table(data):
    """Read CSV text/bytes: header row of feature names, first column ids.

    Empty cells become missing values (NaN, flagged in ``missing``).
    """
    if isinstance(data, (bytes, bytearray)):
        data = data.decode("utf-8")
    reader = csv.reader(io.StringIO(data))
    try:
        header = next(reader)
    except StopIteration:
        raise LoadError("empty descriptor CSV") from None
    names = [h.strip() for h in header[1:]]
    _check_unique(names, "feature name")
    ids, rows = [], []
    for lineno, row in enumerate(reader, start=2):
        if not row or all(not cell.strip() for cell in row):
            continue
        if len(row) != len(header):
            raise LoadError(f"row {lineno}: expected {len(header)} cells, found {len(row)}")
        values = []
        for col, cell in enumerate(row[1:], start=2):
            cell = cell.strip()
            if cell == "":
                values.append(math.nan)
                continue
            try:
                v = float(cell)
            except ValueError:
                raise LoadError(f"row {lineno}, column {col} ({names[col - 2]}): "
                                f"non-numeric cell {cell!r}") from None
            if not math.isfinite(v):
                raise LoadError(f"row {lineno}, column {col}: non-finite value {cell!r}")
            values.append(v)
        ids.append(row[0].strip())
        rows.append(values)
    _check_unique(ids, "sample id")
    values = np.array(rows, dtype=float).reshape(len(ids), len(names))
    return DescriptorTable(tuple(ids), tuple(names), values, np.isnan(values))


def read_descriptor_table(path):
    with open(path, "rb") as fp:
        return load_descriptor_table(fp.read())


def table_to_csv(table):
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(["id", *table.feature_names])
    for sid, row, miss in zip(table.sample_ids, table.values, table.missing):
        writer.writerow([sid, *("" if m else repr(float(v)) for v, m in zip(row, miss))])
    return buf.getvalue()


def fit_imputation(table):
    """Per-feature median over the rows of ``table`` (pass training rows)."""
    medians = []
    for j, name in enumerate(table.feature_names):
        col = table.values[~table.missing[:, j], j]
        if col.size == 0:
            raise ValidationError(f"feature {name!r} is missing in every training row")
        medians.append(float(np.median(col)))
    return ImputationStats(table.feature_names, tuple(medians))


def impute_missing(table, stats=None):
    """Fill missing cells with training medians.

    Without ``stats`` the medians are fitted on ``table`` itself, which must
    then contain training rows only.
    """
    if stats is None:
        stats = fit_imputation(table)
    if tuple(stats.feature_names) != table.feature_names:
        _mismatch(stats.feature_names, table.feature_names)
    if not table.missing.any():
        return DescriptorTable(table.sample_ids, table.feature_names, table.values, table.missing,
                               table.standardization, stats)
    values = np.where(table.missing, np.asarray(stats.medians)[None, :], table.values)
    return DescriptorTable(table.sample_ids, table.feature_names, values,
                           np.zeros_like(table.missing), table.standardization, stats)


def fit_standardization(table):
    if table.missing.any():
        raise ValidationError("impute missing values before standardising")
    mean = table.values.mean(axis=0)
    std = table.values.std(axis=0)
    # an all-equal column can still show a roundoff std above the cutoff
    flat = np.ptp(table.values, axis=0) == 0 if len(table.values) else np.ones(len(std), bool)
    dropped = tuple(n for n, s, f in zip(table.feature_names, std, flat) if s < CONSTANT_STD or f)
    return StandardizationStats(table.feature_names, tuple(float(m) for m in mean),
                                tuple(float(s) for s in std), dropped)


def _mismatch(expected, got):
    diff = sorted(set(expected) ^ set(got))
    if not diff:
        raise ValidationError("feature order differs from the fitted statistics")
    raise ValidationError(f"feature names differ from fitted statistics: {diff}")


def standardize(table, stats=None):
    """Z-score each feature and drop constant ones.

    With ``stats`` (test-time path) the supplied training statistics are
    applied unchanged; feature names must match them exactly.
    """
    if stats is None:
        stats = fit_standardization(table)
    elif tuple(stats.feature_names) != table.feature_names:
        _mismatch(stats.feature_names, table.feature_names)
    if table.missing.any():
        raise ValidationError("impute missing values before standardising")
    keep = [j for j, n in enumerate(stats.feature_names) if n not in set(stats.dropped)]
    mean = np.asarray(stats.mean)[keep]
    std = np.asarray(stats.std)[keep]
    values = (table.values[:, keep] - mean) / std
    names = tuple(stats.feature_names[j] for j in keep)
    return DescriptorTable(table.sample_ids, names, values, None, stats, table.imputation)


def select_features(table, names):
    names = list(names)
    if not names:
        raise ValidationError("cannot select zero features")
    unknown = [n for n in names if n not in table.feature_names]
    if unknown:
        raise ValidationError(f"unknown feature name(s): {unknown}")
    _check_unique(names, "feature name")
    idx = [table.feature_names.index(n) for n in names]
    return DescriptorTable(table.sample_ids, tuple(names), table.values[:, idx], table.missing[:, idx],
                           None, None)


def hstack(left, right):
    """Join two tables column-wise; rows must carry identical ids in order."""
    if left.sample_ids != right.sample_ids:
        raise AlignmentError("row ids of the tables to join differ")
    return DescriptorTable(left.sample_ids, left.feature_names + right.feature_names,
                           np.hstack([left.values, right.values]),
                           np.hstack([left.missing, right.missing]))


@dataclass(frozen=True)
class DescriptorPipeline:
    """Column selection, median imputation and z-scoring fitted on training rows."""

    features: tuple
    imputation: ImputationStats
    standardization: StandardizationStats

    @classmethod
    def fit(cls, train_table, features=None):
        table = train_table if features is None else select_features(train_table, features)
        imputed = impute_missing(table)
        stats = fit_standardization(imputed)
        if len(stats.dropped) == len(stats.feature_names):
            raise ValidationError("every feature is constant on the training rows")
        return cls(table.feature_names, imputed.imputation, stats)

    def transform(self, table):
        table = select_features(table, self.features)
        return standardize(impute_missing(table, self.imputation), self.standardization)

    @property
    def output_names(self):
        dropped = set(self.standardization.dropped)
        return tuple(n for n in self.features if n not in dropped)

    def to_dict(self):
        return {"features": list(self.features), "imputation": self.imputation.to_dict(),
                "standardization": self.standardization.to_dict()}

    @classmethod
    def from_dict(cls, d):
        return cls(tuple(d["features"]), ImputationStats.from_dict(d["imputation"]),
                   StandardizationStats.from_dict(d["standardization"]))
