"""Datasets, test points, and the on-disk formats they are read from.

Two text formats are supported:

* dense CSV: UTF-8, comma separated, one header row, exactly one column named
  ``label``; an optional column named ``weight`` supplies per-point base
  weights; every other column is a numeric feature.
* sparse: one point per line, ``<label> <idx>:<val> <idx>:<val> ...`` with
  1-based, strictly ascending indices.  Missing entries are zero.

Labels are stored as class ids ``0..K-1``.  Binary files may use ``{0, 1}``
or ``{-1, +1}``; both map to ids ``{0, 1}`` and the ``±1`` margin view is
derived on demand.
"""

from __future__ import annotations

import csv
import hashlib
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Optional, Sequence

import numpy as np


class DataFormatError(ValueError):
    """Raised when an input file or array violates the dataset invariants."""


def _frozen(a: np.ndarray) -> np.ndarray:
    a = np.array(a, copy=True)
    a.setflags(write=False)
    return a


@dataclass(frozen=True, eq=False)
class Dataset:
    """Immutable training set.

    ``labels`` are class ids, ``base_weights`` are per-point masses that every
    downstream computation multiplies in (fractional duplication is expressed
    this way).
    """

    features: np.ndarray
    labels: np.ndarray
    base_weights: np.ndarray
    n_classes: int
    feature_names: Optional[tuple] = None
    _fingerprint: str = field(default="", repr=False)

    def __post_init__(self):
        X = np.asarray(self.features, dtype=np.float64)
        if X.ndim != 2:
            raise DataFormatError("features must be a 2-D array")
        n, d = X.shape
        if n < 1:
            raise DataFormatError("empty dataset")
        if d < 1:
            raise DataFormatError("no feature columns")
        bad = np.argwhere(~np.isfinite(X))
        if bad.size:
            i, j = bad[0]
            raise DataFormatError(f"non-finite feature at row {i}, column {j}")
        y = np.asarray(self.labels)
        if y.shape != (n,):
            raise DataFormatError("labels must have one entry per row")
        if not np.all(np.equal(np.mod(y, 1), 0)):
            raise DataFormatError("labels must be integer class ids")
        y = y.astype(np.int64)
        K = int(self.n_classes)
        if K < 2:
            raise DataFormatError("need at least two classes")
        if y.min() < 0 or y.max() >= K:
            raise DataFormatError(f"labels must lie in 0..{K - 1}")
        b = np.asarray(self.base_weights, dtype=np.float64)
        if b.shape != (n,):
            raise DataFormatError("base_weights must have one entry per row")
        if not np.all(np.isfinite(b)) or b.min() < 0 or not (b > 0).any():
            raise DataFormatError("base_weights must be finite, >= 0, and not all zero")
        if self.feature_names is not None and len(self.feature_names) != d:
            raise DataFormatError("feature_names length does not match d")
        object.__setattr__(self, "features", _frozen(X))
        object.__setattr__(self, "labels", _frozen(y))
        object.__setattr__(self, "base_weights", _frozen(b))
        object.__setattr__(self, "n_classes", K)
        if self.feature_names is not None:
            object.__setattr__(self, "feature_names", tuple(self.feature_names))
        h = hashlib.sha256()
        for a in (self.features, self.labels, self.base_weights):
            h.update(np.ascontiguousarray(a).tobytes())
        h.update(str(K).encode())
        object.__setattr__(self, "_fingerprint", h.hexdigest()[:16])

    @property
    def n(self) -> int:
        return self.features.shape[0]

    @property
    def d(self) -> int:
        return self.features.shape[1]

    @property
    def K(self) -> int:
        return self.n_classes

    @property
    def fingerprint(self) -> str:
        return self._fingerprint

    @property
    def signs(self) -> np.ndarray:
        """Labels as ``±1`` (binary datasets only)."""
        if self.n_classes != 2:
            raise ValueError("±1 label view is only defined for binary datasets")
        return 2.0 * self.labels - 1.0

    @property
    def total_mass(self) -> float:
        return float(self.base_weights.sum())

    def with_base_weights(self, base_weights) -> "Dataset":
        return Dataset(self.features, self.labels, base_weights, self.n_classes, self.feature_names)

    def take(self, idx) -> "Dataset":
        idx = np.asarray(idx)
        return Dataset(self.features[idx], self.labels[idx], self.base_weights[idx],
                       self.n_classes, self.feature_names)


@dataclass(frozen=True)
class TestPoint:
    x: np.ndarray
    y: Optional[int] = None
    name: str = "t0"

    __test__ = False  # keep pytest from collecting this class

    def __post_init__(self):
        x = np.asarray(self.x, dtype=np.float64)
        if x.ndim != 1:
            raise ValueError("test point must be a vector")
        object.__setattr__(self, "x", _frozen(x))
        if self.y is not None:
            object.__setattr__(self, "y", int(self.y))

    def check(self, dataset: Dataset, need_label: bool = False) -> None:
        if self.x.shape[0] != dataset.d:
            raise ValueError(f"test point has dimension {self.x.shape[0]}, dataset has {dataset.d}")
        if need_label and self.y is None:
            raise ValueError("test loss needs a test label")
        if self.y is not None and not 0 <= self.y < dataset.n_classes:
            raise ValueError("test label out of range")


def _label_ids(raw: Sequence[float], where: Sequence[str]) -> tuple[np.ndarray, int]:
    vals = np.asarray(raw, dtype=np.float64)
    for v, loc in zip(vals, where):
        if not math.isfinite(v) or v != round(v):
            raise DataFormatError(f"label must be an integer ({loc})")
    uniq = set(np.unique(vals).tolist())
    if uniq <= {-1.0, 1.0}:
        return (vals > 0).astype(np.int64), 2
    for v, loc in zip(vals, where):
        if v < 0:
            raise DataFormatError(f"negative class id {int(v)} ({loc})")
    ids = vals.astype(np.int64)
    return ids, max(2, int(ids.max()) + 1)


def load_dense_csv(path) -> Dataset:
    """Read a dense CSV file (see module docstring for the format)."""
    path = Path(path)
    with path.open(newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows:
        raise DataFormatError("empty file: no header row")
    header = [h.strip() for h in rows[0]]
    if "label" not in header:
        raise DataFormatError("missing 'label' column")
    if header.count("label") > 1:
        raise DataFormatError("duplicate 'label' column")
    li = header.index("label")
    wi = header.index("weight") if "weight" in header else None
    feat_cols = [j for j in range(len(header)) if j != li and j != wi]
    if not feat_cols:
        raise DataFormatError("no feature columns")
    body = [r for r in rows[1:] if r and any(c.strip() for c in r)]
    if not body:
        raise DataFormatError("empty dataset")
    X = np.empty((len(body), len(feat_cols)))
    raw_labels, where = [], []
    weights = np.ones(len(body))
    for i, r in enumerate(body):
        if len(r) != len(header):
            raise DataFormatError(f"row {i + 1}: expected {len(header)} cells, found {len(r)}")
        for k, j in enumerate(feat_cols):
            try:
                v = float(r[j])
            except ValueError:
                raise DataFormatError(f"row {i + 1}, column {j} ({header[j]!r}): non-numeric cell {r[j]!r}")
            if not math.isfinite(v):
                raise DataFormatError(f"row {i + 1}, column {j} ({header[j]!r}): non-finite value {r[j]!r}")
            X[i, k] = v
        try:
            raw_labels.append(float(r[li]))
        except ValueError:
            raise DataFormatError(f"row {i + 1}, column {li} ('label'): non-numeric label {r[li]!r}")
        where.append(f"row {i + 1}, column {li}")
        if wi is not None:
            try:
                weights[i] = float(r[wi])
            except ValueError:
                raise DataFormatError(f"row {i + 1}, column {wi} ('weight'): non-numeric weight {r[wi]!r}")
    ids, K = _label_ids(raw_labels, where)
    names = tuple(header[j] for j in feat_cols)
    return Dataset(X, ids, weights, K, names)


def write_dense_csv(dataset: Dataset, path, write_weights: Optional[bool] = None) -> None:
    """Write ``dataset`` as dense CSV with 17 significant digits.

    The weight column is written when base weights are not all one, unless
    ``write_weights`` says otherwise.
    """
    if write_weights is None:
        write_weights = not np.all(dataset.base_weights == 1.0)
    names = list(dataset.feature_names or [f"x{j}" for j in range(dataset.d)])
    header = names + ["label"] + (["weight"] if write_weights else [])
    with Path(path).open("w", newline="", encoding="utf-8") as fh:
        wr = csv.writer(fh, lineterminator="\n")
        wr.writerow(header)
        for i in range(dataset.n):
            row = [format(v, ".17g") for v in dataset.features[i]]
            row.append(str(int(dataset.labels[i])))
            if write_weights:
                row.append(format(dataset.base_weights[i], ".17g"))
            wr.writerow(row)


def load_sparse(path) -> Dataset:
    """Read a libsvm/svmlight style sparse file into a dense Dataset."""
    entries, raw_labels, where = [], [], []
    d = 0
    with Path(path).open(encoding="utf-8") as fh:
        for lineno, line in enumerate(fh, start=1):
            line = line.split("#", 1)[0].strip()
            if not line:
                continue
            tokens = line.split()
            try:
                raw_labels.append(float(tokens[0]))
            except ValueError:
                raise DataFormatError(f"line {lineno}: unparseable label {tokens[0]!r}")
            where.append(f"line {lineno}")
            row, prev = [], 0
            for tok in tokens[1:]:
                idx, sep, val = tok.partition(":")
                try:
                    j, v = int(idx), float(val)
                except ValueError:
                    raise DataFormatError(f"line {lineno}: unparseable token {tok!r}")
                if not sep:
                    raise DataFormatError(f"line {lineno}: unparseable token {tok!r}")
                if j < 1:
                    raise DataFormatError(f"line {lineno}: index {j} < 1")
                if j <= prev:
                    raise DataFormatError(f"line {lineno}: indices not ascending ({prev} then {j})")
                if not math.isfinite(v):
                    raise DataFormatError(f"line {lineno}: non-finite value in {tok!r}")
                row.append((j - 1, v))
                prev = j
            d = max(d, prev)
            entries.append(row)
    if not entries:
        raise DataFormatError("empty dataset")
    if d == 0:
        raise DataFormatError("no feature columns")
    X = np.zeros((len(entries), d))
    for i, row in enumerate(entries):
        for j, v in row:
            X[i, j] = v
    ids, K = _label_ids(raw_labels, where)
    return Dataset(X, ids, np.ones(len(entries)), K)


def synth_gaussian_binary(n_per_class: int, d: int, mean_offset: float, seed: int) -> Dataset:
    """Equal mixture of two identity-covariance Gaussians in ``R^d``.

    Class ``+1`` (id 1) is centred at ``(+mean_offset, 0, ..., 0)`` and class
    ``-1`` (id 0) at ``(-mean_offset, 0, ..., 0)``.  Rows are ordered class
    ``-1`` first, then ``+1``.
    """
    if n_per_class < 1 or d < 1:
        raise ValueError("n_per_class and d must be >= 1")
    rng = np.random.default_rng(seed)
    X = rng.standard_normal((2 * n_per_class, d))
    sign = np.repeat([-1.0, 1.0], n_per_class)
    X[:, 0] += sign * mean_offset
    labels = (sign > 0).astype(np.int64)
    return Dataset(X, labels, np.ones(2 * n_per_class), 2)


def synth_test_points(n: int, d: int, mean_offset: float, seed: int) -> list[TestPoint]:
    """Held-out points from the same mixture as :func:`synth_gaussian_binary`."""
    rng = np.random.default_rng(seed)
    y = rng.integers(0, 2, size=n)
    X = rng.standard_normal((n, d))
    X[:, 0] += (2.0 * y - 1.0) * mean_offset
    return [TestPoint(X[i], int(y[i]), name=f"t{i}") for i in range(n)]
