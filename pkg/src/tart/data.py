"""Tabular data: CSV loading, z-score standardization, stratified splits."""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from pathlib import Path

import numpy as np


class DataError(ValueError):
    pass


@dataclass
class Dataset:
    features: np.ndarray  # (n, d)
    labels: np.ndarray  # (n,) int
    class_count: int
    feature_means: np.ndarray | None = None
    feature_stds: np.ndarray | None = None
    class_names: list[str] | None = None

    def __post_init__(self):
        self.features = np.asarray(self.features, dtype=np.float64)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        if self.features.ndim != 2:
            raise DataError("features must be a 2-d matrix")
        if self.labels.shape != (self.features.shape[0],):
            raise DataError("one label per row is required")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.class_count):
            raise DataError(f"labels must lie in [0, {self.class_count})")

    def __len__(self):
        return self.features.shape[0]

    @property
    def n_features(self) -> int:
        return self.features.shape[1]

    def subset(self, idx) -> "Dataset":
        return replace(self, features=self.features[idx], labels=self.labels[idx])


@dataclass
class Standardizer:
    means: np.ndarray
    stds: np.ndarray

    def transform(self, x):
        x = np.asarray(x, dtype=np.float64)
        safe = np.where(self.stds > 0, self.stds, 1.0)
        return np.where(self.stds > 0, (x - self.means) / safe, 0.0)


def _encode_labels(raw: list[str]) -> tuple[np.ndarray, list[str]]:
    # Integer-valued labels keep their numeric order; anything else is
    # indexed by first appearance.
    try:
        values = [int(v) for v in raw]
    except ValueError:
        names: dict[str, int] = {}
        labels = [names.setdefault(v, len(names)) for v in raw]
        return np.array(labels, dtype=np.int64), list(names)
    uniq = sorted(set(values))
    index = {v: k for k, v in enumerate(uniq)}
    return np.array([index[v] for v in values], dtype=np.int64), [str(v) for v in uniq]


def load_csv(path, label_column: int = -1, has_header: bool = False) -> Dataset:
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = [(k + 1, row) for k, row in enumerate(csv.reader(fh)) if row]
    if has_header and rows:
        rows = rows[1:]
    if not rows:
        raise DataError(f"{path}: no data rows")

    width = len(rows[0][1])
    if width < 2:
        raise DataError(f"{path}: need at least one feature and a label column")
    col = label_column % width if -width <= label_column < width else None
    if col is None:
        raise DataError(f"{path}: label column {label_column} out of range for {width} columns")

    feats, raw_labels = [], []
    for line, row in rows:
        if len(row) != width:
            raise DataError(f"{path}: line {line} has {len(row)} fields, expected {width}")
        raw_labels.append(row[col].strip())
        try:
            feats.append([float(v) for k, v in enumerate(row) if k != col])
        except ValueError as exc:
            raise DataError(f"{path}: line {line}: {exc}") from None
    labels, names = _encode_labels(raw_labels)
    return Dataset(np.array(feats), labels, len(names), class_names=names)


def standardize(train: Dataset) -> Standardizer:
    """Fit per-column mean and population std on ``train``."""
    if len(train) == 0:
        raise DataError("cannot standardize an empty dataset")
    return Standardizer(train.features.mean(axis=0), train.features.std(axis=0))


def apply(stats: Standardizer, data: Dataset) -> Dataset:
    return replace(
        data,
        features=stats.transform(data.features),
        feature_means=stats.means,
        feature_stds=stats.stds,
    )


def split(data: Dataset, test_fraction: float, seed: int) -> tuple[Dataset, Dataset]:
    """Seeded train/test split, stratified over classes with two or more examples.

    Each such class contributes round(fraction * count) test rows, clamped so
    both sides keep at least one. Singleton classes stay in the training split.
    """
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must lie strictly between 0 and 1")
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in range(data.class_count):
        idx = np.flatnonzero(data.labels == c)
        idx = idx[rng.permutation(idx.size)]
        if idx.size < 2:
            train_idx.extend(idx)
            continue
        n_test = min(max(int(round(test_fraction * idx.size)), 1), idx.size - 1)
        test_idx.extend(idx[:n_test])
        train_idx.extend(idx[n_test:])
    train_idx = np.sort(np.array(train_idx, dtype=np.int64))
    test_idx = np.sort(np.array(test_idx, dtype=np.int64))
    return data.subset(train_idx), data.subset(test_idx)


def one_hot(label: int, class_count: int) -> np.ndarray:
    if not 0 <= label < class_count:
        raise ValueError(f"label {label} out of range for {class_count} classes")
    v = np.zeros(class_count)
    v[label] = 1.0
    return v
