"""Dataset ingestion, min-max normalization, masking, and splitting.

Everything here is a pure function of its inputs (and a seed where
randomness is involved). Datasets are treated as immutable: every
operation returns a new :class:`Dataset`.
"""
from __future__ import annotations

import csv
import json
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Dict, List, Optional, Sequence, Tuple

import numpy as np
from sklearn.base import BaseEstimator, TransformerMixin
from sklearn.utils.validation import check_array, check_is_fitted


class DataError(ValueError):
    """Raised for malformed input data (bad rows, unknown labels, ...)."""


BENIGN_NAMES = ("normal", "benign")


@dataclass(frozen=True)
class FeatureSchema:
    feature_names: Tuple[str, ...]
    label_map: Dict[str, int]
    categorical_maps: Dict[str, Dict[str, int]] = field(default_factory=dict)
    positive_class: int = 1

    def __post_init__(self):
        object.__setattr__(self, "feature_names", tuple(self.feature_names))
        if len(set(self.feature_names)) != len(self.feature_names):
            raise DataError("feature names must be unique")
        if len(self.label_map) < 2:
            raise DataError("label_map needs at least 2 classes")
        _check_bijection("label_map", self.label_map)
        for name, table in self.categorical_maps.items():
            if name not in self.feature_names:
                raise DataError(f"categorical map for unknown feature {name!r}")
            _check_bijection(f"categorical map {name!r}", table)
        if self.positive_class not in self.label_map.values():
            raise DataError(f"positive_class {self.positive_class} not in label_map")

    @property
    def n_features(self) -> int:
        return len(self.feature_names)

    @property
    def n_classes(self) -> int:
        return len(self.label_map)

    @property
    def class_names(self) -> List[str]:
        inv = {v: k for k, v in self.label_map.items()}
        return [inv[i] for i in range(self.n_classes)]

    @property
    def benign_class(self) -> int:
        """Class index of legitimate traffic.

        For binary schemas this is the non-positive class; otherwise the
        class named ``normal`` or ``benign``.
        """
        if self.n_classes == 2:
            return 1 - self.positive_class
        for name in BENIGN_NAMES:
            if name in self.label_map:
                return self.label_map[name]
        raise DataError("multiclass schema has no 'normal'/'benign' label")

    def project(self, keep: Sequence[int]) -> "FeatureSchema":
        names = tuple(self.feature_names[i] for i in keep)
        cats = {k: v for k, v in self.categorical_maps.items() if k in names}
        return replace(self, feature_names=names, categorical_maps=cats)

    def to_dict(self) -> dict:
        return {
            "feature_names": list(self.feature_names),
            "categorical_maps": self.categorical_maps,
            "label_map": self.label_map,
            "positive_class": self.positive_class,
        }

    @classmethod
    def from_dict(cls, obj: dict) -> "FeatureSchema":
        try:
            return cls(
                feature_names=tuple(obj["feature_names"]),
                label_map={str(k): int(v) for k, v in obj["label_map"].items()},
                categorical_maps={
                    str(f): {str(k): int(v) for k, v in t.items()}
                    for f, t in obj.get("categorical_maps", {}).items()
                },
                positive_class=int(obj.get("positive_class", 1)),
            )
        except KeyError as exc:
            raise DataError(f"schema missing key {exc.args[0]!r}") from None

    @classmethod
    def load(cls, path) -> "FeatureSchema":
        with open(path, encoding="utf-8") as fh:
            return cls.from_dict(json.load(fh))

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True) + "\n",
                              encoding="utf-8")


def _check_bijection(what, table):
    if sorted(table.values()) != list(range(len(table))):
        raise DataError(f"{what} must map onto 0..{len(table) - 1}")


@dataclass(frozen=True, eq=False)
class Dataset:
    """Numeric feature matrix with integer class labels.

    ``feature_min``/``feature_max`` are the per-column ranges used by
    :func:`normalize`; they default to the ranges of ``X``.
    """

    schema: FeatureSchema
    X: np.ndarray
    y: np.ndarray
    feature_min: Optional[np.ndarray] = None
    feature_max: Optional[np.ndarray] = None
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        X = np.asarray(self.X, dtype=np.float64)
        if X.ndim != 2:
            X = X.reshape(len(X), -1)
        y = np.asarray(self.y, dtype=np.int64)
        if X.shape[0] != y.shape[0]:
            raise DataError(f"{X.shape[0]} rows but {y.shape[0]} labels")
        if X.shape[1] != self.schema.n_features:
            raise DataError(f"rows have {X.shape[1]} features, schema has {self.schema.n_features}")
        lo, hi = self.feature_min, self.feature_max
        if lo is None or hi is None:
            if len(X):
                lo, hi = X.min(axis=0), X.max(axis=0)
            else:
                lo = hi = np.zeros(X.shape[1])
        lo = np.asarray(lo, dtype=np.float64)
        hi = np.asarray(hi, dtype=np.float64)
        if np.any(lo > hi):
            raise DataError("feature_min exceeds feature_max")
        X.setflags(write=False)
        y.setflags(write=False)
        object.__setattr__(self, "X", X)
        object.__setattr__(self, "y", y)
        object.__setattr__(self, "feature_min", lo)
        object.__setattr__(self, "feature_max", hi)

    def __len__(self):
        return self.X.shape[0]

    @property
    def n_features(self) -> int:
        return self.X.shape[1]

    def subset(self, idx) -> "Dataset":
        """Row subset that keeps the parent's min/max (so normalization agrees)."""
        idx = np.asarray(idx, dtype=np.int64)
        return Dataset(self.schema, self.X[idx], self.y[idx], self.feature_min,
                       self.feature_max, dict(self.meta))

    def equals(self, other: "Dataset") -> bool:
        return (self.schema == other.schema
                and np.array_equal(self.X, other.X)
                and np.array_equal(self.y, other.y)
                and np.array_equal(self.feature_min, other.feature_min)
                and np.array_equal(self.feature_max, other.feature_max))


@dataclass(frozen=True, eq=False)
class FeatureMask:
    """Binary selection over feature indices. Never empty.

    An all-zero vector is repaired on construction by setting bit 0;
    callers that want a random repair (see ``woa.binarize``) do it first.
    """

    bits: np.ndarray

    def __post_init__(self):
        bits = (np.asarray(self.bits).astype(np.int64) != 0).astype(np.int8)
        if bits.ndim != 1 or bits.size == 0:
            raise ValueError("mask must be a non-empty 1-D vector")
        if not bits.any():
            bits[0] = 1
        bits.setflags(write=False)
        object.__setattr__(self, "bits", bits)

    def __len__(self):
        return self.bits.size

    def __eq__(self, other):
        return isinstance(other, FeatureMask) and np.array_equal(self.bits, other.bits)

    def __hash__(self):
        return hash(self.bits.tobytes())

    @property
    def indices(self) -> np.ndarray:
        return np.flatnonzero(self.bits)

    @property
    def count(self) -> int:
        return int(self.bits.sum())

    @classmethod
    def all_ones(cls, n: int) -> "FeatureMask":
        return cls(np.ones(n, dtype=np.int8))

    def to_list(self) -> List[int]:
        return [int(b) for b in self.bits]


# --------------------------------------------------------------------- CSV

def load_csv(path, schema: FeatureSchema, header: bool = False) -> Dataset:
    """Parse a CSV whose last column is the class label.

    Categorical columns are coded through ``schema.categorical_maps``.
    Errors name the 1-based file line and the offending column.
    """
    n_cols = schema.n_features + 1
    rows, labels = [], []
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.reader(fh)
        for lineno, rec in enumerate(reader, start=1):
            if header and lineno == 1:
                continue
            if not rec or (len(rec) == 1 and not rec[0].strip()):
                continue
            if len(rec) != n_cols:
                raise DataError(f"row {lineno}: expected {n_cols} columns, got {len(rec)}")
            values = []
            for j, (name, raw) in enumerate(zip(schema.feature_names, rec)):
                raw = raw.strip()
                table = schema.categorical_maps.get(name)
                if table is not None:
                    if raw not in table:
                        raise DataError(f"unknown category {raw!r} at row {lineno}, column {name!r}")
                    values.append(float(table[raw]))
                    continue
                try:
                    values.append(float(raw))
                except ValueError:
                    raise DataError(f"row {lineno}, column {j + 1} ({name!r}): "
                                    f"cannot parse {raw!r} as a number") from None
            label = rec[-1].strip()
            if label not in schema.label_map:
                raise DataError(f"unknown label {label!r} at row {lineno}")
            rows.append(values)
            labels.append(schema.label_map[label])
    X = np.array(rows, dtype=np.float64).reshape(len(rows), schema.n_features)
    return Dataset(schema, X, np.array(labels, dtype=np.int64))


def save_csv(d: Dataset, path, header: bool = False) -> None:
    """Inverse of :func:`load_csv`; floats are written with ``repr`` so they round-trip."""
    inv_cats = {name: {v: k for k, v in t.items()} for name, t in d.schema.categorical_maps.items()}
    names = d.schema.class_names
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        if header:
            w.writerow(list(d.schema.feature_names) + ["label"])
        for row, label in zip(d.X, d.y):
            out = []
            for name, v in zip(d.schema.feature_names, row):
                table = inv_cats.get(name)
                out.append(table[int(v)] if table is not None else repr(float(v)))
            out.append(names[label])
            w.writerow(out)


# ---------------------------------------------------------- transforms

def minmax_scale(X, lo, hi) -> np.ndarray:
    """(x - min) / (max - min); zero-width columns map to 0."""
    X = np.asarray(X, dtype=np.float64)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    out = (X - lo) / safe
    out[:, span <= 0] = 0.0
    return out


def normalize(d: Dataset) -> Dataset:
    X = minmax_scale(d.X, d.feature_min, d.feature_max)
    X = np.clip(X, 0.0, 1.0)
    n = d.n_features
    meta = dict(d.meta, source_min=d.feature_min.tolist(), source_max=d.feature_max.tolist())
    return Dataset(d.schema, X, d.y, np.zeros(n), np.where(d.feature_max > d.feature_min, 1.0, 0.0), meta)


def apply_mask(d: Dataset, m: FeatureMask) -> Dataset:
    if len(m) != d.n_features:
        raise DataError(f"mask length {len(m)} != feature count {d.n_features}")
    keep = m.indices
    return Dataset(d.schema.project(keep), d.X[:, keep], d.y,
                   d.feature_min[keep], d.feature_max[keep], dict(d.meta))


def stratified_split_indices(y, test_fraction: float, seed: int) -> Tuple[np.ndarray, np.ndarray]:
    """Per-class shuffled split; each class keeps at least one row on each side."""
    if not 0.0 < test_fraction < 1.0:
        raise DataError("test_fraction must be in (0, 1)")
    y = np.asarray(y)
    rng = np.random.default_rng(seed)
    train_idx, test_idx = [], []
    for c in np.unique(y):
        members = np.flatnonzero(y == c)
        if members.size < 2:
            raise DataError(f"class {int(c)} has fewer than 2 rows")
        members = rng.permutation(members)
        n_test = int(round(members.size * test_fraction))
        n_test = min(max(n_test, 1), members.size - 1)
        test_idx.append(members[:n_test])
        train_idx.append(members[n_test:])
    return np.sort(np.concatenate(train_idx)), np.sort(np.concatenate(test_idx))


def stratified_split(d: Dataset, test_fraction: float, seed: int) -> Tuple[Dataset, Dataset]:
    train_idx, test_idx = stratified_split_indices(d.y, test_fraction, seed)
    return d.subset(train_idx), d.subset(test_idx)


def kfold_indices(y, k: int, seed: int) -> List[np.ndarray]:
    """Stratified fold assignment; returns the test indices of each fold."""
    y = np.asarray(y)
    if k < 2:
        raise DataError("k must be at least 2")
    if k > y.size:
        raise DataError(f"k={k} exceeds the number of rows ({y.size})")
    rng = np.random.default_rng(seed)
    order = np.concatenate([rng.permutation(np.flatnonzero(y == c)) for c in np.unique(y)])
    # deal class-grouped rows round-robin: sizes differ by <= 1, per class too
    return [np.sort(order[i::k]) for i in range(k)]


def kfold_split(d: Dataset, k: int, seed: int) -> List[Tuple[Dataset, Dataset]]:
    folds = kfold_indices(d.y, k, seed)
    everything = np.arange(len(d))
    out = []
    for test_idx in folds:
        train_idx = np.setdiff1d(everything, test_idx, assume_unique=True)
        out.append((d.subset(train_idx), d.subset(test_idx)))
    return out


# ------------------------------------------------------------ synthetic

def synth_generate(n_rows: int, n_informative: int, n_noise: int, n_classes: int = 2,
                   seed: int = 0, separation: float = 4.0) -> Dataset:
    """Class-conditional Gaussian features followed by uniform noise.

    Class 0 ("normal") is centred at the origin. Informative column ``j``
    belongs to attack class ``1 + j % (n_classes - 1)``, whose mean on
    that column sits ``separation`` standard deviations away; with two
    classes every informative column separates them. Noise columns are
    uniform over the same span regardless of class. Informative indices
    (always ``0..n_informative-1``) are recorded in ``meta["informative"]``.
    """
    if min(n_rows, n_informative, n_noise, n_classes) <= 0:
        raise DataError("all counts must be positive")
    if n_classes < 2:
        raise DataError("need at least 2 classes")
    if n_classes - 1 > n_informative:
        raise DataError("each attack class needs at least one informative feature")
    if separation < 3.0:
        raise DataError("separation must be at least 3 standard deviations")
    rng = np.random.default_rng(seed)
    per_class = [n_rows // n_classes + (1 if c < n_rows % n_classes else 0) for c in range(n_classes)]
    y = np.repeat(np.arange(n_classes), per_class)
    owner = 1 + np.arange(n_informative) % (n_classes - 1)
    means = (np.arange(n_classes)[:, None] == owner[None, :]) * separation
    informative = means[y] + rng.standard_normal((n_rows, n_informative))
    noise = rng.uniform(-2.0, separation + 2.0, size=(n_rows, n_noise))
    X = np.hstack([informative, noise])
    order = rng.permutation(n_rows)
    X, y = X[order], y[order]

    names = [f"inf{i}" for i in range(n_informative)] + [f"noise{i}" for i in range(n_noise)]
    if n_classes == 2:
        labels = {"normal": 0, "attack": 1}
    else:
        labels = {"normal": 0, **{f"attack{c}": c for c in range(1, n_classes)}}
    schema = FeatureSchema(tuple(names), labels, positive_class=1)
    return Dataset(schema, X, y, meta={"informative": list(range(n_informative))})


# ---------------------------------------------------- estimator facade

class MinMaxNormalizer(TransformerMixin, BaseEstimator):
    """Column-wise min-max scaling fitted on training data.

    Constant columns map to 0. With ``clip=True`` (default) values outside
    the fitted range are clipped to [0, 1].
    """

    def __init__(self, clip=True):
        self.clip = clip

    def fit(self, X, y=None):
        X = check_array(X, dtype=np.float64)
        self.data_min_ = X.min(axis=0)
        self.data_max_ = X.max(axis=0)
        self.n_features_in_ = X.shape[1]
        return self

    def transform(self, X):
        check_is_fitted(self, ["data_min_", "data_max_"])
        X = check_array(X, dtype=np.float64)
        if X.shape[1] != self.n_features_in_:
            raise ValueError(f"X has {X.shape[1]} features, expected {self.n_features_in_}")
        out = minmax_scale(X, self.data_min_, self.data_max_)
        return np.clip(out, 0.0, 1.0) if self.clip else out
