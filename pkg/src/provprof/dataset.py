"""Profiling data: loading, validation, provider filtering, folds and outcome scaling.

Provider ids are stored as contiguous integer codes ``0..m-1``; the original
labels are kept in :attr:`Dataset.labels` so that outputs can be reported in
the user's own provider naming.
"""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

logger = logging.getLogger(__name__)

BINARY = "binary"
CONTINUOUS = "continuous"


class DataError(ValueError):
    """Raised for any validation failure while building a dataset."""


class MissingColumnError(DataError):
    pass


class MissingValueError(DataError):
    pass


class NonNumericError(DataError):
    pass


class EmptyDatasetError(DataError):
    pass


@dataclass(frozen=True)
class Dataset:
    covariates: np.ndarray
    providers: np.ndarray
    outcomes: np.ndarray
    outcome_kind: str
    labels: tuple

    def __post_init__(self):
        W = np.asarray(self.covariates, dtype=float)
        if W.ndim == 1:
            W = W[:, None]
        A = np.asarray(self.providers, dtype=np.int64)
        Y = np.asarray(self.outcomes, dtype=float)
        n = len(Y)
        if W.shape[0] != n or A.shape != (n,):
            raise DataError("covariates, providers and outcomes must have matching lengths")
        if n == 0:
            raise EmptyDatasetError("dataset has no observations")
        if not (np.all(np.isfinite(W)) and np.all(np.isfinite(Y))):
            raise MissingValueError("dataset contains missing or non-finite values")
        m = len(self.labels)
        counts = np.bincount(A, minlength=m) if A.min() >= 0 else None
        if counts is None or len(counts) != m or np.any(counts == 0):
            raise DataError("provider codes must be contiguous 0..m-1, each observed at least once")
        if self.outcome_kind not in (BINARY, CONTINUOUS):
            raise DataError(f"unknown outcome kind {self.outcome_kind!r}")
        if self.outcome_kind == BINARY and not np.all((Y == 0) | (Y == 1)):
            raise DataError("binary outcome contains values other than 0 and 1")
        for arr in (W, A, Y):
            arr.setflags(write=False)
        object.__setattr__(self, "covariates", W)
        object.__setattr__(self, "providers", A)
        object.__setattr__(self, "outcomes", Y)
        object.__setattr__(self, "labels", tuple(self.labels))

    @property
    def n(self) -> int:
        return len(self.outcomes)

    @property
    def m(self) -> int:
        return len(self.labels)

    @property
    def k(self) -> int:
        return self.covariates.shape[1]

    @property
    def provider_index(self) -> dict:
        return {lab: i for i, lab in enumerate(self.labels)}

    def counts(self) -> np.ndarray:
        return np.bincount(self.providers, minlength=self.m)

    def subset(self, rows) -> "Dataset":
        """Rows ``rows`` with provider codes re-indexed contiguously."""
        rows = np.asarray(rows)
        A = self.providers[rows]
        keep = np.unique(A)
        remap = np.full(self.m, -1)
        remap[keep] = np.arange(len(keep))
        return Dataset(self.covariates[rows], remap[A], self.outcomes[rows],
                       self.outcome_kind, tuple(self.labels[i] for i in keep))

    def with_outcomes(self, y, outcome_kind=None) -> "Dataset":
        return Dataset(self.covariates, self.providers, y,
                       outcome_kind or self.outcome_kind, self.labels)


def from_arrays(W, A, Y, outcome_kind=None) -> Dataset:
    """Build a dataset from raw arrays; provider labels may be any hashable values.

    Labels are ordered by sorted value, so integer providers ``1..m`` map to
    codes ``0..m-1``.
    """
    A = np.asarray(A)
    labels, codes = np.unique(A, return_inverse=True)
    Y = np.asarray(Y, dtype=float)
    if outcome_kind is None:
        outcome_kind = infer_outcome_kind(Y)
    return Dataset(np.asarray(W, dtype=float), codes, Y, outcome_kind,
                   tuple(lab.item() if hasattr(lab, "item") else lab for lab in labels))


def infer_outcome_kind(y) -> str:
    y = np.asarray(y, dtype=float)
    return BINARY if np.all((y == 0) | (y == 1)) else CONTINUOUS


@dataclass
class ColumnSchema:
    outcome: str = "y"
    provider: str = "provider"
    covariates: list | None = None  # None: every column named w<digits>, in file order
    outcome_kind: str | None = None  # None: infer


def _parse_float(text: str, row: int, col: str) -> float:
    if text.strip() == "":
        raise MissingValueError(f"missing value at row {row}, column {col!r}")
    try:
        val = float(text)
    except ValueError:
        raise NonNumericError(f"non-numeric value {text!r} at row {row}, column {col!r}") from None
    if math.isnan(val):
        raise MissingValueError(f"missing value at row {row}, column {col!r}")
    if math.isinf(val):
        raise NonNumericError(f"non-finite value {text!r} at row {row}, column {col!r}")
    return val


def load_csv(path, schema: ColumnSchema | None = None) -> Dataset:
    """Read a profiling CSV file.

    Rows are numbered from 1 (the first data row after the header) in error
    messages. Row order is preserved: data row ``i`` becomes observation
    ``i - 1``.
    """
    schema = schema or ColumnSchema()
    path = Path(path)
    if not path.exists():
        raise DataError(f"input file {str(path)!r} does not exist")
    with path.open(newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyDatasetError(f"{path} is empty") from None
        cov_cols = schema.covariates
        if cov_cols is None:
            cov_cols = [h for h in header if len(h) > 1 and h[0] == "w" and h[1:].isdigit()]
        for col in [schema.outcome, schema.provider, *cov_cols]:
            if col not in header:
                raise MissingColumnError(f"column {col!r} not found in {path}")
        iy = header.index(schema.outcome)
        ia = header.index(schema.provider)
        iw = [header.index(c) for c in cov_cols]
        ys, provs, ws = [], [], []
        for rownum, rec in enumerate(reader, start=1):
            if not rec or all(c.strip() == "" for c in rec):
                continue
            if len(rec) < len(header):
                rec = rec + [""] * (len(header) - len(rec))
            ys.append(_parse_float(rec[iy], rownum, schema.outcome))
            prov = rec[ia].strip()
            if prov == "":
                raise MissingValueError(f"missing value at row {rownum}, column {schema.provider!r}")
            provs.append(prov)
            ws.append([_parse_float(rec[j], rownum, c) for j, c in zip(iw, cov_cols)])
    if not ys:
        raise EmptyDatasetError(f"{path} contains no data rows")
    # integer-valued provider columns sort numerically
    try:
        keys = [int(p) for p in provs]
    except ValueError:
        keys = provs
    W = np.array(ws, dtype=float).reshape(len(ys), len(cov_cols))
    kind = schema.outcome_kind or infer_outcome_kind(ys)
    return from_arrays(W, np.array(keys, dtype=object if keys is provs else np.int64), ys, kind)


@dataclass(frozen=True)
class VolumeFilterResult:
    dataset: Dataset
    dropped: tuple


def filter_min_volume(d: Dataset, min_n: int) -> VolumeFilterResult:
    """Drop every provider with fewer than ``min_n`` observations."""
    if min_n < 1:
        raise ValueError("min_n must be at least 1")
    counts = d.counts()
    small = counts < min_n
    if not small.any():
        return VolumeFilterResult(d, ())
    if small.all():
        raise EmptyDatasetError(f"no provider has at least {min_n} observations")
    dropped = tuple(d.labels[i] for i in np.flatnonzero(small))
    logger.info("dropping %d providers below volume %d", len(dropped), min_n)
    rows = np.flatnonzero(~small[d.providers])
    return VolumeFilterResult(d.subset(rows), dropped)


@dataclass(frozen=True)
class FoldAssignment:
    fold_of: np.ndarray
    J: int
    seed: int
    unstratified: tuple = ()

    def validation(self, j: int) -> np.ndarray:
        return np.flatnonzero(self.fold_of == j)

    def training(self, j: int) -> np.ndarray:
        if self.J == 1:
            return np.arange(len(self.fold_of))
        return np.flatnonzero(self.fold_of != j)

    @property
    def debug(self) -> bool:
        return self.J == 1


def make_folds(d: Dataset, J: int, seed: int) -> FoldAssignment:
    """Provider-stratified random partition into ``J`` folds.

    Each provider's rows are shuffled and dealt round-robin, continuing the
    deal where the previous provider stopped, so fold sizes differ by at most
    one both overall and within every provider. ``J == 1`` is the
    no-cross-fitting debug mode: every model is trained and evaluated on all
    rows.
    """
    if J < 1:
        raise ValueError("J must be positive")
    n = d.n
    if J == 1:
        return FoldAssignment(np.zeros(n, dtype=np.int64), 1, seed)
    if J > n:
        raise ValueError(f"cannot split {n} observations into {J} folds")
    rng = np.random.default_rng(seed)
    counts = d.counts()
    small = tuple(d.labels[a] for a in np.flatnonzero(counts < J))
    if small:
        logger.warning("providers %s have fewer than %d observations; folds unstratified there",
                       list(small), J)
    order = []
    for a in range(d.m):
        rows = np.flatnonzero(d.providers == a)
        order.append(rng.permutation(rows))
    order = np.concatenate(order)
    fold_of = np.empty(n, dtype=np.int64)
    fold_of[order] = np.arange(n) % J
    fold_of.setflags(write=False)
    return FoldAssignment(fold_of, J, seed, small)


@dataclass(frozen=True)
class OutcomeScale:
    lo: float
    hi: float
    delta: float = 0.0

    def __post_init__(self):
        if not self.lo < self.hi:
            raise ValueError("outcome scale needs lo < hi")

    @property
    def width(self) -> float:
        """Original-units length of one scaled-unit."""
        return (self.hi - self.lo) / (1.0 - 2.0 * self.delta)

    def scale(self, y):
        return self.delta + (np.asarray(y, dtype=float) - self.lo) / self.width

    def unscale(self, s):
        return self.lo + (np.asarray(s, dtype=float) - self.delta) * self.width


IDENTITY_SCALE = OutcomeScale(0.0, 1.0, 0.0)


def scale_outcomes(d: Dataset, delta: float = 0.005) -> tuple[Dataset, OutcomeScale]:
    """Map outcomes into ``[delta, 1 - delta]`` (continuous) or leave binary ones alone."""
    if not 0.0 < delta < 0.5:
        raise ValueError("delta must lie in (0, 0.5)")
    if d.outcome_kind == BINARY:
        return d, IDENTITY_SCALE
    lo, hi = float(d.outcomes.min()), float(d.outcomes.max())
    if not lo < hi:
        raise DataError("continuous outcome is constant; cannot build a scale")
    sc = OutcomeScale(lo, hi, delta)
    return d.with_outcomes(sc.scale(d.outcomes)), sc
