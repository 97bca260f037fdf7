"""Store of known traffic patterns with exact nearest-neighbour lookup.

Distances are Euclidean over [0, 1]-normalized features divided by
sqrt(C), so they also lie in [0, 1]. A query is *recognized* when its
nearest stored pattern is within ``theta``.
"""
from __future__ import annotations

import enum
import json
import math
import threading
from dataclasses import dataclass, field
from typing import Callable, Dict, List, Optional, Tuple

import numpy as np

DEFAULT_THETA = 0.05
DEFAULT_K = 5


class SecurityLevel(str, enum.Enum):
    SAFE = "safe"
    LOW = "low"
    MEDIUM = "medium"
    HIGH = "high"
    CRITICAL = "critical"


class PatternSource(str, enum.Enum):
    SEEDED = "seeded"
    LEARNED = "learned-from-classifier"


class PatternError(ValueError):
    pass


@dataclass(frozen=True)
class Pattern:
    id: int
    features: Tuple[float, ...]
    label: int
    security_level: SecurityLevel
    source: PatternSource = PatternSource.SEEDED

    def to_json(self) -> dict:
        return {"id": self.id, "features": list(self.features), "label": self.label,
                "security_level": self.security_level.value, "source": self.source.value}


@dataclass(frozen=True)
class Recognized:
    pattern_id: int
    label: int
    security_level: SecurityLevel
    distance: float

    recognized = True


@dataclass(frozen=True)
class Unrecognized:
    nearest: List[Tuple[int, int, float]] = field(default_factory=list)  # (id, label, distance)

    recognized = False


def default_severity(label: int) -> SecurityLevel:
    return SecurityLevel.HIGH


class PatternStore:
    """Linear-scan index over a growing array of patterns.

    Readers take a snapshot (array view + count) under the lock, so a
    concurrent insert is either fully visible or not at all.
    """

    def __init__(self, dim: int, benign_class: int = 0, model_path: Optional[str] = None):
        if dim < 1:
            raise PatternError("dimension must be >= 1")
        self.dim = dim
        self.benign_class = benign_class
        self.model_path = model_path
        self._X = np.empty((16, dim))
        self._labels: List[int] = []
        self._patterns: List[Pattern] = []
        self._lock = threading.Lock()

    def __len__(self):
        return len(self._patterns)

    def __getitem__(self, pattern_id: int) -> Pattern:
        return self._patterns[pattern_id]

    @property
    def patterns(self) -> List[Pattern]:
        return list(self._patterns)

    def _check_vector(self, features) -> np.ndarray:
        x = np.asarray(features, dtype=np.float64).ravel()
        if x.size != self.dim:
            raise PatternError(f"pattern has {x.size} features, store expects {self.dim}")
        if not np.all(np.isfinite(x)) or x.min() < 0.0 or x.max() > 1.0:
            raise PatternError("feature out of [0,1]")
        return x

    def insert(self, features, label: int, security_level=None,
               source: PatternSource = PatternSource.SEEDED) -> int:
        x = self._check_vector(features)
        label = int(label)
        if security_level is None:
            security_level = SecurityLevel.SAFE if label == self.benign_class else default_severity(label)
        security_level = SecurityLevel(security_level)
        if label == self.benign_class and security_level is not SecurityLevel.SAFE:
            raise PatternError("benign patterns must have security level 'safe'")
        with self._lock:
            n = len(self._patterns)
            if n == self._X.shape[0]:
                grown = np.empty((2 * n, self.dim))
                grown[:n] = self._X[:n]
                self._X = grown
            self._X[n] = x
            pattern = Pattern(n, tuple(float(v) for v in x), label, security_level, PatternSource(source))
            self._labels.append(label)
            self._patterns.append(pattern)
        return n

    def _snapshot(self):
        with self._lock:
            n = len(self._patterns)
            return self._X[:n], np.array(self._labels[:n], dtype=np.int64)

    def distances(self, query) -> np.ndarray:
        q = self._check_vector(query)
        X, _ = self._snapshot()
        return np.sqrt(np.sum((X - q) ** 2, axis=1)) / math.sqrt(self.dim)

    def match(self, query, theta: float = DEFAULT_THETA, k: int = DEFAULT_K):
        """Recognized if the nearest pattern is within ``theta``, else the ``k`` nearest.

        Exact ties go to the lower pattern id.
        """
        if theta <= 0:
            raise PatternError("theta must be > 0")
        if k < 1:
            raise PatternError("k must be >= 1")
        q = self._check_vector(query)
        X, labels = self._snapshot()
        if X.shape[0] == 0:
            return Unrecognized([])
        dist = np.sqrt(np.sum((X - q) ** 2, axis=1)) / math.sqrt(self.dim)
        if k < dist.size:
            cand = np.argpartition(dist, k - 1)[:k]
            kth = dist[cand].max()
            cand = np.flatnonzero(dist <= kth)  # keep every tie at the boundary
        else:
            cand = np.arange(dist.size)
        order = cand[np.lexsort((cand, dist[cand]))][:k]
        best = int(order[0])
        if dist[best] <= theta:
            p = self._patterns[best]
            return Recognized(best, p.label, p.security_level, float(dist[best]))
        return Unrecognized([(int(i), int(labels[i]), float(dist[i])) for i in order])

    def record_attack(self, features, predicted_label: int,
                      severity_rule: Callable[[int], SecurityLevel] = default_severity) -> Pattern:
        predicted_label = int(predicted_label)
        if predicted_label == self.benign_class:
            raise PatternError("refusing to record a benign label as an attack")
        pid = self.insert(features, predicted_label, severity_rule(predicted_label),
                          PatternSource.LEARNED)
        return self._patterns[pid]

    # -- persistence

    def export_jsonl(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            header = {"dim": self.dim, "benign_class": self.benign_class, "model_path": self.model_path}
            fh.write(json.dumps({"store": header}, sort_keys=True) + "\n")
            for p in self._patterns:
                fh.write(json.dumps(p.to_json(), sort_keys=True) + "\n")

    @classmethod
    def import_jsonl(cls, path) -> "PatternStore":
        store = None
        with open(path, encoding="utf-8") as fh:
            for lineno, line in enumerate(fh, start=1):
                if not line.strip():
                    continue
                obj = json.loads(line)
                if "store" in obj:
                    h = obj["store"]
                    store = cls(int(h["dim"]), int(h.get("benign_class", 0)), h.get("model_path"))
                    continue
                if store is None:
                    store = cls(len(obj["features"]))
                try:
                    store.insert(obj["features"], obj["label"], obj["security_level"],
                                 obj.get("source", PatternSource.SEEDED.value))
                except (KeyError, ValueError) as exc:
                    raise PatternError(f"line {lineno}: {exc}") from None
        if store is None:
            raise PatternError(f"{path}: empty pattern file")
        return store
