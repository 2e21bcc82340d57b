"""Labeled feature tables: CSV ingestion and a synthetic stand-in generator."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np

log = logging.getLogger(__name__)

GAME_CLASSES = ("LOL", "TFT", "VAL")
# Class shares from the reported counts (~40k LOL, ~15k TFT, ~17k VAL).
GAME_PROPORTIONS = (0.55, 0.21, 0.24)
DEFAULT_LABEL_COLUMN = "game"


class DatasetError(ValueError):
    pass


class MissingLabelColumn(DatasetError):
    pass


class EmptyAfterCleaning(DatasetError):
    pass


@dataclass
class Dataset:
    features: np.ndarray
    labels: np.ndarray
    class_names: list[str]
    feature_names: list[str]
    # column -> {category string: code}, for categorical CSV columns only
    encodings: dict[str, dict[str, int]] = field(default_factory=dict)
    dropped_rows: int = 0

    def __post_init__(self):
        self.features = np.ascontiguousarray(self.features, dtype=np.float64)
        self.labels = np.ascontiguousarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2 or self.features.shape[0] != self.labels.shape[0]:
            raise DatasetError("features must be n x d with one label per row")
        if self.features.shape[0] == 0:
            raise EmptyAfterCleaning("dataset has no rows")
        if self.labels.min() < 0 or self.labels.max() >= len(self.class_names):
            raise DatasetError("label index out of range for class_names")
        if np.isnan(self.features).any():
            raise DatasetError("NaN in features")
        if len(self.feature_names) != self.features.shape[1]:
            raise DatasetError("feature_names length does not match feature count")

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    def subset(self, rows: np.ndarray) -> "Dataset":
        return Dataset(
            self.features[rows],
            self.labels[rows],
            list(self.class_names),
            list(self.feature_names),
            self.encodings,
        )

    def class_counts(self) -> np.ndarray:
        return np.bincount(self.labels, minlength=len(self.class_names))


def _as_float(cell: str) -> Optional[float]:
    try:
        v = float(cell)
    except ValueError:
        return None
    return v if math.isfinite(v) else None


def load_dataset(
    csv_path,
    label_column: str = DEFAULT_LABEL_COLUMN,
    class_names: Optional[Sequence[str]] = None,
    categorical: Optional[Sequence[str]] = None,
) -> Dataset:
    """Read a header-row CSV into a :class:`Dataset`.

    A column is categorical when listed in ``categorical`` or, failing that,
    when most of its non-empty cells are not numbers. Categories get integer
    codes in order of first appearance among the kept rows. Rows with an
    empty cell, a non-numeric cell in a numeric column, or a label outside
    ``class_names`` are dropped and counted.
    """
    with open(csv_path, newline="") as fh:
        reader = csv.reader(fh)
        try:
            header = [h.strip() for h in next(reader)]
        except StopIteration:
            raise EmptyAfterCleaning(f"{csv_path}: empty file") from None
        rows = [r for r in reader if r]
    if label_column not in header:
        raise MissingLabelColumn(f"{csv_path}: no column named {label_column!r}")
    li = header.index(label_column)
    feature_cols = [i for i in range(len(header)) if i != li]

    if categorical is not None:
        cat_cols = {header.index(c) for c in categorical}
    else:
        cat_cols = set()
        for i in feature_cols:
            cells = [r[i].strip() for r in rows if i < len(r) and r[i].strip()]
            non_numeric = sum(_as_float(c) is None for c in cells)
            if cells and non_numeric * 2 > len(cells):
                cat_cols.add(i)

    known = list(class_names) if class_names is not None else None
    kept: list[tuple[list, str]] = []
    dropped = 0
    for r in rows:
        if len(r) != len(header):
            dropped += 1
            continue
        label = r[li].strip()
        if not label or (known is not None and label not in known):
            dropped += 1
            continue
        values = []
        for i in feature_cols:
            cell = r[i].strip()
            if not cell:
                break
            if i in cat_cols:
                values.append(cell)
            else:
                v = _as_float(cell)
                if v is None:
                    break
                values.append(v)
        else:
            kept.append((values, label))
            continue
        dropped += 1

    if not kept:
        raise EmptyAfterCleaning(f"{csv_path}: no usable rows ({dropped} dropped)")
    if dropped:
        log.info("%s: dropped %d malformed rows", csv_path, dropped)

    encodings: dict[str, dict[str, int]] = {header[i]: {} for i in feature_cols if i in cat_cols}
    X = np.empty((len(kept), len(feature_cols)))
    for row_i, (values, _) in enumerate(kept):
        for j, i in enumerate(feature_cols):
            v = values[j]
            if i in cat_cols:
                codes = encodings[header[i]]
                v = codes.setdefault(v, len(codes))
            X[row_i, j] = v

    labels = [lab for _, lab in kept]
    if known is None:
        seen = set(labels)
        known = list(GAME_CLASSES) if seen <= set(GAME_CLASSES) else sorted(seen)
    index = {name: k for k, name in enumerate(known)}
    y = np.array([index[lab] for lab in labels], dtype=np.int64)
    return Dataset(X, y, known, [header[i] for i in feature_cols], encodings, dropped)


def allocate_counts(n: int, proportions: Sequence[float]) -> np.ndarray:
    """Split ``n`` into integer class sizes by largest remainder."""
    p = np.asarray(proportions, dtype=float)
    p = p / p.sum()
    raw = p * n
    counts = np.floor(raw).astype(np.int64)
    short = n - int(counts.sum())
    order = np.argsort(-(raw - counts), kind="stable")
    counts[order[:short]] += 1
    return counts


def class_centroids(class_count: int, d: int, separation: float) -> np.ndarray:
    """Centroids on scaled basis vectors: every pair sits ``separation`` apart.

    With more classes than dimensions the extra classes take the negative
    basis directions; pairwise distances then stay >= separation / sqrt(2).
    More than ``2 * d`` classes cannot all be placed this way.
    """
    if class_count > 2 * d:
        raise ValueError(f"{class_count} classes need d >= {(class_count + 1) // 2}")
    C = np.zeros((class_count, d))
    scale = separation / math.sqrt(2.0)
    for c in range(class_count):
        C[c, c % d] = scale if (c // d) % 2 == 0 else -scale
    return C


def synth_dataset(
    n: int = 10_000,
    d: int = 16,
    class_count: int = 3,
    separation: float = 4.0,
    seed: int = 0,
    proportions: Optional[Sequence[float]] = None,
    class_names: Optional[Sequence[str]] = None,
) -> Dataset:
    """Gaussian blobs, unit covariance, one per class, shuffled.

    Class sizes follow ``proportions`` exactly (largest remainder); the
    default for three classes is the LOL/TFT/VAL imbalance.
    """
    if n < class_count or d < 1 or separation < 0 or class_count > 2 * d:
        raise ValueError("need n >= class_count, 1 <= d, class_count <= 2 * d, separation >= 0")
    if class_names is None:
        class_names = GAME_CLASSES if class_count == 3 else [f"C{k}" for k in range(class_count)]
    if proportions is None:
        proportions = GAME_PROPORTIONS if class_count == 3 else [1.0] * class_count
    counts = allocate_counts(n, proportions)
    rng = np.random.default_rng(seed)
    centroids = class_centroids(class_count, d, separation)
    labels = np.repeat(np.arange(class_count), counts)
    X = rng.standard_normal((n, d)) + centroids[labels]
    perm = rng.permutation(n)
    return Dataset(X[perm], labels[perm], list(class_names), [f"f{j}" for j in range(d)])


def stratified_split(labels: np.ndarray, test_fraction: float, seed: int, stratified: bool = True):
    """Return (train_rows, test_rows), both sorted ascending."""
    rng = np.random.default_rng(seed)
    labels = np.asarray(labels)
    if not stratified:
        perm = rng.permutation(labels.size)
        n_test = int(round(test_fraction * labels.size))
        return np.sort(perm[n_test:]), np.sort(perm[:n_test])
    train, test = [], []
    for c in np.unique(labels):
        rows = np.flatnonzero(labels == c)
        rows = rows[rng.permutation(rows.size)]
        n_test = int(round(test_fraction * rows.size))
        if rows.size > 1:
            n_test = min(max(n_test, 1), rows.size - 1)
        test.append(rows[:n_test])
        train.append(rows[n_test:])
    return np.sort(np.concatenate(train)), np.sort(np.concatenate(test))
