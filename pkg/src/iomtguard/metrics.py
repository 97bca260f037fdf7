"""Confusion-matrix metrics, paired significance tests, k-fold aggregation.

Recall is TP / (TP + FN), the same quantity as the detection rate.
Zero-denominator ratios evaluate to 0 and are listed in ``undefined``.
"""
from __future__ import annotations

import csv
import json
import math
from dataclasses import asdict, dataclass, field
from typing import Callable, Dict, List, Optional, Sequence, Union

import numpy as np
from scipy.special import betainc, ndtr
from sklearn.base import clone

from .data import Dataset, kfold_split

ALPHA = 0.05
METRIC_NAMES = ("precision", "recall", "f1", "accuracy", "detection_rate", "false_alarm_rate")
EXACT_WILCOXON_MAX = 20


@dataclass(frozen=True)
class ConfusionCounts:
    tp: int
    tn: int
    fp: int
    fn: int

    @property
    def total(self) -> int:
        return self.tp + self.tn + self.fp + self.fn


def confusion(y_true, y_pred, positive_class=1) -> ConfusionCounts:
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    if y_true.shape != y_pred.shape:
        raise ValueError(f"length mismatch: {y_true.size} true vs {y_pred.size} predicted")
    t = y_true == positive_class
    p = y_pred == positive_class
    return ConfusionCounts(int(np.sum(t & p)), int(np.sum(~t & ~p)),
                           int(np.sum(~t & p)), int(np.sum(t & ~p)))


def _ratio(num, den):
    return (num / den, True) if den else (0.0, False)


def precision(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fp)[0]


def recall(c: ConfusionCounts) -> float:
    return _ratio(c.tp, c.tp + c.fn)[0]


detection_rate = recall


def f1(c: ConfusionCounts) -> float:
    p, r = precision(c), recall(c)
    return 2 * p * r / (p + r) if p + r > 0 else 0.0


def accuracy(c: ConfusionCounts) -> float:
    return _ratio(c.tp + c.tn, c.total)[0]


def false_alarm_rate(c: ConfusionCounts) -> float:
    return _ratio(c.fp, c.fp + c.tn)[0]


def undefined_metrics(c: ConfusionCounts) -> List[str]:
    out = []
    if c.tp + c.fp == 0:
        out.append("precision")
    if c.tp + c.fn == 0:
        out += ["recall", "detection_rate"]
    if "precision" in out or "recall" in out or precision(c) + recall(c) == 0:
        out.append("f1")
    if c.total == 0:
        out.append("accuracy")
    if c.fp + c.tn == 0:
        out.append("false_alarm_rate")
    return out


@dataclass
class MetricsReport:
    precision: float
    recall: float
    f1: float
    accuracy: float
    detection_rate: float
    false_alarm_rate: float
    counts: ConfusionCounts
    undefined: List[str] = field(default_factory=list)
    per_class: Dict[str, dict] = field(default_factory=dict)
    macro: Dict[str, float] = field(default_factory=dict)

    @classmethod
    def from_counts(cls, c: ConfusionCounts) -> "MetricsReport":
        return cls(precision(c), recall(c), f1(c), accuracy(c), detection_rate(c),
                   false_alarm_rate(c), c, undefined_metrics(c))

    def values(self) -> Dict[str, float]:
        return {name: getattr(self, name) for name in METRIC_NAMES}

    def to_dict(self) -> dict:
        out = self.values()
        out.update(counts=asdict(self.counts), undefined=self.undefined,
                   per_class=self.per_class, macro=self.macro)
        return out

    def write_csv(self, path) -> None:
        """Rows = classes (plus Average), columns = metrics."""
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", *METRIC_NAMES])
            for name, row in self.per_class.items():
                w.writerow([name, *(repr(row[m]) for m in METRIC_NAMES)])
            avg = self.macro or self.values()
            w.writerow(["Average", *(repr(avg[m]) for m in METRIC_NAMES)])


def evaluate(y_true, y_pred, positive_class=1, class_names: Optional[Sequence[str]] = None) -> MetricsReport:
    """Headline metrics for ``positive_class`` plus one-vs-rest rows and their macro average."""
    y_true = np.asarray(y_true)
    y_pred = np.asarray(y_pred)
    report = MetricsReport.from_counts(confusion(y_true, y_pred, positive_class))
    classes = range(len(class_names)) if class_names is not None else np.union1d(y_true, y_pred)
    for c in classes:
        name = class_names[c] if class_names is not None else str(int(c))
        r = MetricsReport.from_counts(confusion(y_true, y_pred, c))
        report.per_class[name] = dict(r.values(), support=int(np.sum(y_true == c)))
    if report.per_class:
        report.macro = {m: float(np.mean([row[m] for row in report.per_class.values()]))
                        for m in METRIC_NAMES}
    return report


# ------------------------------------------------------------- tests

@dataclass(frozen=True)
class StatTestResult:
    statistic: float
    p_value: float
    n_pairs: int
    note: str = ""

    @property
    def significant(self) -> bool:
        return self.p_value < ALPHA

    def to_dict(self) -> dict:
        return {"statistic": self.statistic, "p_value": self.p_value,
                "significant": self.significant, "n_pairs": self.n_pairs, "note": self.note}


def student_t_sf2(t: float, df: float) -> float:
    """Two-sided tail P(|T| >= |t|) via the regularized incomplete beta function."""
    return float(betainc(df / 2.0, 0.5, df / (df + t * t)))


def paired_t_test(a, b) -> StatTestResult:
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    if a.shape != b.shape or a.ndim != 1:
        raise ValueError("paired samples must be 1-D and the same length")
    n = a.size
    if n < 2:
        raise ValueError("need at least 2 pairs")
    d = a - b
    mean = float(d.mean())
    sd = float(d.std(ddof=1))
    if sd == 0.0:
        if mean == 0.0:
            return StatTestResult(0.0, 1.0, n, "zero variance, zero mean")
        return StatTestResult(math.copysign(math.inf, mean), 0.0, n, "zero variance, infinite statistic")
    t = mean * math.sqrt(n) / sd
    return StatTestResult(t, student_t_sf2(t, n - 1), n)


def signed_ranks(d) -> np.ndarray:
    """Ranks of |d| (1-based, ties averaged), carrying the sign of d."""
    d = np.asarray(d, dtype=float)
    absd = np.abs(d)
    order = np.argsort(absd, kind="mergesort")
    ranks = np.empty(d.size)
    i = 0
    while i < d.size:
        j = i
        while j + 1 < d.size and absd[order[j + 1]] == absd[order[i]]:
            j += 1
        ranks[order[i:j + 1]] = (i + j) / 2.0 + 1.0
        i = j + 1
    return np.sign(d) * ranks


def _exact_lower_tail(ranks2: List[int], w2: int) -> float:
    """P(W+ <= w) under random signs; ranks and w are doubled to stay integral."""
    total = sum(ranks2)
    counts = np.zeros(total + 1, dtype=np.int64)
    counts[0] = 1
    for r in ranks2:
        counts[r:] = counts[r:] + counts[:-r].copy() if r else counts[r:] * 2
    return float(counts[: w2 + 1].sum()) / float(2 ** len(ranks2))


def wilcoxon_signed_rank(a, b=None) -> StatTestResult:
    """Two-sided signed-rank test on a - b (or on ``a`` alone as differences).

    Zero differences are dropped; W = min(W+, W-). Exact null
    distribution for up to 20 pairs, otherwise a normal approximation
    with continuity and tie corrections.
    """
    d = np.asarray(a, dtype=float) if b is None else np.asarray(a, dtype=float) - np.asarray(b, dtype=float)
    d = d[d != 0]
    m = d.size
    if m == 0:
        raise ValueError("test undefined: all differences are zero")
    sr = signed_ranks(d)
    w_plus = float(sr[sr > 0].sum())
    w_minus = float(np.abs(sr[sr < 0]).sum())
    w = min(w_plus, w_minus)
    if m <= EXACT_WILCOXON_MAX:
        ranks2 = [int(round(2 * r)) for r in np.abs(sr)]
        p = min(1.0, 2.0 * _exact_lower_tail(ranks2, int(round(2 * w))))
        return StatTestResult(w, p, m, "exact")
    mu = m * (m + 1) / 4.0
    _, tie_counts = np.unique(np.abs(sr), return_counts=True)
    var = m * (m + 1) * (2 * m + 1) / 24.0 - float(np.sum(tie_counts ** 3 - tie_counts)) / 48.0
    z = (w - mu + 0.5) / math.sqrt(var)
    p = min(1.0, 2.0 * float(ndtr(z)))
    return StatTestResult(w, p, m, "normal approximation")


# ----------------------------------------------------- cross-validation

Pipeline = Union[Callable[[Dataset, Dataset], np.ndarray], object]


@dataclass
class CrossValReport:
    folds: List[MetricsReport]
    mean: Dict[str, float]
    sd: Dict[str, float]

    def metric(self, name: str) -> List[float]:
        return [getattr(f, name) for f in self.folds]

    def to_dict(self) -> dict:
        return {"k": len(self.folds), "mean": self.mean, "sd": self.sd,
                "folds": [f.to_dict() for f in self.folds]}

    def save(self, path) -> None:
        with open(path, "w", encoding="utf-8") as fh:
            json.dump(self.to_dict(), fh, indent=2, sort_keys=True)
            fh.write("\n")


def _run_fold(pipeline, train: Dataset, test: Dataset) -> np.ndarray:
    if hasattr(pipeline, "fit") and hasattr(pipeline, "predict"):
        est = clone(pipeline)
        est.fit(train.X, train.y)
        return np.asarray(est.predict(test.X))
    return np.asarray(pipeline(train, test))


def crossval_report(d: Dataset, pipeline: Pipeline, k: int = 10, seed: int = 0) -> CrossValReport:
    """Stratified k-fold evaluation.

    ``pipeline`` is either a scikit-learn estimator (cloned per fold) or a
    callable ``(train, test) -> predicted labels``.
    """
    folds = []
    for train, test in kfold_split(d, k, seed):
        y_pred = _run_fold(pipeline, train, test)
        folds.append(evaluate(test.y, y_pred, d.schema.positive_class, d.schema.class_names))
    mean = {m: float(np.mean([getattr(f, m) for f in folds])) for m in METRIC_NAMES}
    sd = {m: float(np.std([getattr(f, m) for f in folds], ddof=1)) if len(folds) > 1 else 0.0
          for m in METRIC_NAMES}
    return CrossValReport(folds, mean, sd)


def compare_methods(a: CrossValReport, b: CrossValReport, metrics: Sequence[str] = METRIC_NAMES) -> dict:
    """Per metric: paired t-test and Wilcoxon signed-rank over matched folds."""
    out = {}
    for m in metrics:
        xa, xb = a.metric(m), b.metric(m)
        try:
            wil = wilcoxon_signed_rank(xa, xb).to_dict()
        except ValueError as exc:
            wil = {"statistic": 0.0, "p_value": 1.0, "significant": False,
                   "n_pairs": 0, "note": str(exc)}
        out[m] = {"paired_t": paired_t_test(xa, xb).to_dict(), "wilcoxon": wil}
    return out
