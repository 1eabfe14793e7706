"""Domain types and CSV ingestion for treatment-response datasets.

A dataset holds per-individual features, the assigned treatment index and
the observed factual revenue/cost pair. Group counts and propensities are
computed once at construction and the backing arrays are frozen.
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

COST_FLOOR = 1e-6


class ValidationError(ValueError):
    """Input violates a documented contract."""


class ParseError(ValueError):
    """File content could not be parsed; message names the offending line."""


class DataSource(Enum):
    RCT = "RCT"
    OBS = "OBS"


@dataclass(frozen=True)
class Sample:
    features: np.ndarray
    treatment: int
    revenue: float
    cost: float


class Dataset:
    """Immutable collection of samples with cached group statistics."""

    def __init__(self, features, treatments, revenues, costs, num_treatments,
                 source=DataSource.RCT):
        features = np.ascontiguousarray(features, dtype=np.float64)
        treatments = np.asarray(treatments, dtype=np.int64)
        revenues = np.asarray(revenues, dtype=np.float64)
        costs = np.asarray(costs, dtype=np.float64)
        if features.ndim != 2:
            raise ValidationError("features must be a 2-D array")
        n = features.shape[0]
        if n == 0:
            raise ValidationError("empty dataset")
        if not (treatments.shape == revenues.shape == costs.shape == (n,)):
            raise ValidationError("column lengths disagree")
        if num_treatments < 1:
            raise ValidationError("num_treatments must be >= 1")
        if treatments.min() < 0 or treatments.max() >= num_treatments:
            bad = int(np.argmax((treatments < 0) | (treatments >= num_treatments)))
            raise ValidationError(
                f"treatment {treatments[bad]} out of range [0, {num_treatments}) at row {bad}"
            )
        if np.min(revenues) < 0 or np.min(costs) < 0:
            raise ValidationError("revenue and cost must be non-negative")
        if not (np.all(np.isfinite(features)) and np.all(np.isfinite(revenues))
                and np.all(np.isfinite(costs))):
            raise ValidationError("non-finite values in dataset")

        for arr in (features, treatments, revenues, costs):
            arr.setflags(write=False)
        self.features = features
        self.treatments = treatments
        self.revenues = revenues
        self.costs = costs
        self.num_treatments = int(num_treatments)
        self.source = source
        self.group_counts = np.bincount(treatments, minlength=num_treatments)
        self.group_counts.setflags(write=False)
        self.propensities = self.group_counts / n
        self.propensities.setflags(write=False)

    @property
    def n(self) -> int:
        return self.features.shape[0]

    def __len__(self) -> int:
        return self.n

    @property
    def feature_dim(self) -> int:
        return self.features.shape[1]

    def sample(self, i: int) -> Sample:
        return Sample(self.features[i], int(self.treatments[i]),
                      float(self.revenues[i]), float(self.costs[i]))

    def samples(self):
        return (self.sample(i) for i in range(self.n))

    def subset(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.treatments[idx], self.revenues[idx],
                       self.costs[idx], self.num_treatments, self.source)

    def require_full_support(self):
        """All treatment arms present; needed by inverse-propensity estimators."""
        if np.any(self.group_counts == 0):
            empty = int(np.argmax(self.group_counts == 0))
            raise ValidationError(f"empty treatment group {empty}")


def concat_datasets(parts, source=DataSource.OBS) -> Dataset:
    if not parts:
        raise ValidationError("empty dataset")
    m = parts[0].num_treatments
    if any(p.num_treatments != m for p in parts):
        raise ValidationError("num_treatments disagree across parts")
    return Dataset(
        np.concatenate([p.features for p in parts]),
        np.concatenate([p.treatments for p in parts]),
        np.concatenate([p.revenues for p in parts]),
        np.concatenate([p.costs for p in parts]),
        m,
        source,
    )


@dataclass
class PredictionMatrix:
    """Predicted revenue and cost for every (individual, treatment) pair.

    Plain-array inputs are validated and the cost entries floored at
    ``COST_FLOOR``; graph-tensor entries are passed through untouched (the
    consumers floor costs where it matters).
    """

    revenues: object
    costs: object

    def __post_init__(self):
        if isinstance(self.revenues, np.ndarray) or np.isscalar(self.revenues):
            r = np.asarray(self.revenues, dtype=np.float64)
            c = np.asarray(self.costs, dtype=np.float64)
            if r.shape != c.shape or r.ndim != 2:
                raise ValidationError("revenues and costs must be equal-shape 2-D arrays")
            if not (np.all(np.isfinite(r)) and np.all(np.isfinite(c))):
                raise ValidationError("predictions must be finite")
            self.revenues = r
            self.costs = np.maximum(c, COST_FLOOR)

    @property
    def shape(self):
        data = getattr(self.revenues, "data", self.revenues)
        return data.shape


@dataclass(frozen=True)
class FullOutcomeTable:
    """True potential revenue/cost surfaces; only synthetic data has these."""

    revenues: np.ndarray
    costs: np.ndarray

    def __post_init__(self):
        if self.revenues.shape != self.costs.shape or self.revenues.ndim != 2:
            raise ValidationError("outcome table must hold equal-shape N x M arrays")


HEADER_EXTRA = ("treatment", "revenue", "cost")


def load_dataset(path, num_treatments=None, source=DataSource.RCT) -> Dataset:
    """Read a dataset CSV with header ``f0..f{d-1},treatment,revenue,cost``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError("empty dataset") from None
        d = len(header) - len(HEADER_EXTRA)
        expected = [f"f{i}" for i in range(d)] + list(HEADER_EXTRA)
        if d < 0 or header != expected:
            raise ParseError(f"line 1: unexpected header {header!r}")
        feats, ts, rs, cs = [], [], [], []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            if len(row) != len(header):
                raise ParseError(f"line {lineno}: expected {len(header)} fields, got {len(row)}")
            try:
                feats.append([float(v) for v in row[:d]])
                ts.append(int(row[d]))
                rs.append(float(row[d + 1]))
                cs.append(float(row[d + 2]))
            except ValueError as e:
                raise ParseError(f"line {lineno}: {e}") from None
    if not ts:
        raise ValidationError("empty dataset")
    m = num_treatments if num_treatments is not None else max(ts) + 1
    return Dataset(np.array(feats, dtype=np.float64).reshape(len(ts), d),
                   ts, rs, cs, m, source)


def save_dataset(ds: Dataset, path):
    """Write a dataset CSV; floats use shortest round-trip formatting."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"f{i}" for i in range(ds.feature_dim)] + list(HEADER_EXTRA))
        for i in range(ds.n):
            w.writerow([repr(float(v)) for v in ds.features[i]]
                       + [int(ds.treatments[i]), repr(float(ds.revenues[i])),
                          repr(float(ds.costs[i]))])


def load_outcome_table(path) -> FullOutcomeTable:
    """Read the sidecar CSV with header ``r0..r{M-1},c0..c{M-1}``."""
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = next(reader)
        except StopIteration:
            raise ValidationError("empty outcome table") from None
        m = len(header) // 2
        expected = [f"r{j}" for j in range(m)] + [f"c{j}" for j in range(m)]
        if header != expected:
            raise ParseError(f"line 1: unexpected header {header!r}")
        rows = []
        for lineno, row in enumerate(reader, start=2):
            if not row:
                continue
            try:
                rows.append([float(v) for v in row])
            except ValueError as e:
                raise ParseError(f"line {lineno}: {e}") from None
    arr = np.array(rows, dtype=np.float64)
    return FullOutcomeTable(arr[:, :m].copy(), arr[:, m:].copy())


def save_outcome_table(table: FullOutcomeTable, path):
    m = table.revenues.shape[1]
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow([f"r{j}" for j in range(m)] + [f"c{j}" for j in range(m)])
        for i in range(table.revenues.shape[0]):
            w.writerow([repr(float(v)) for v in table.revenues[i]]
                       + [repr(float(v)) for v in table.costs[i]])


def split_dataset(ds: Dataset, fractions, seed: int):
    """Disjoint partition by a seeded permutation; fractions must sum to 1."""
    fractions = np.asarray(fractions, dtype=np.float64)
    if fractions.ndim != 1 or fractions.size == 0:
        raise ValidationError("fractions must be a non-empty vector")
    if abs(fractions.sum() - 1.0) > 1e-9:
        raise ValidationError(f"fractions sum to {fractions.sum()}, expected 1")
    if np.any(fractions < 0):
        raise ValidationError("fractions must be non-negative")
    rng = np.random.default_rng(seed)
    perm = rng.permutation(ds.n)
    bounds = np.round(np.cumsum(fractions) * ds.n).astype(int)
    out, start = [], 0
    for stop in bounds:
        out.append(ds.subset(perm[start:stop]))
        start = stop
    return out
