"""Confusion matrices and classification metrics.

Rates are computed exactly as fractions and rounded half-up to two decimals of a
percent only at the end. Binary schemes report positive-class (class 1) precision,
recall and F1; multiclass schemes report macro averages, with F1 taken as the harmonic
mean of macro precision and macro recall so that ``F1 = 2PR / (P + R)`` always holds.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction
from typing import Sequence

import numpy as np


def confusion_matrix(truth: Sequence[int], pred: Sequence[int], num_classes: int) -> np.ndarray:
    """Rows are true classes, columns predictions."""
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (np.asarray(truth, dtype=np.int64), np.asarray(pred, dtype=np.int64)), 1)
    return cm


def to_percent(value: Fraction) -> float:
    """Round half-up to two decimals of a percent."""
    hundredths = value * 10000
    return float(Fraction(int((hundredths + Fraction(1, 2)) // 1), 100))


def _ratio(num: int, den: int, flag: str, flags: list[str]) -> Fraction:
    if den == 0:
        flags.append(flag)
        return Fraction(0)
    return Fraction(num, den)


def _f1(p: Fraction, r: Fraction) -> Fraction:
    return 2 * p * r / (p + r) if p + r > 0 else Fraction(0)


@dataclass(frozen=True)
class ExactMetrics:
    accuracy: Fraction
    precision: Fraction
    recall: Fraction
    f1: Fraction
    per_class: tuple[dict, ...]
    flags: tuple[str, ...]


def exact_metrics(confusion, kind: str) -> ExactMetrics:
    cm = np.asarray(confusion)
    if cm.ndim != 2 or cm.shape[0] != cm.shape[1]:
        raise ValueError(f"confusion matrix must be square, got shape {cm.shape}")
    if (cm < 0).any():
        raise ValueError("confusion matrix entries must be nonnegative")
    if kind == "binary" and cm.shape[0] != 2:
        raise ValueError("binary metrics need a 2 x 2 confusion matrix")
    cm = [[int(v) for v in row] for row in cm]
    k = len(cm)
    total = sum(map(sum, cm))
    flags: list[str] = []
    accuracy = _ratio(sum(cm[i][i] for i in range(k)), total, "accuracy:empty", flags)

    per_class = []
    for c in range(k):
        tp = cm[c][c]
        predicted = sum(cm[r][c] for r in range(k))
        actual = sum(cm[c])
        p = _ratio(tp, predicted, f"precision:class{c}", flags)
        r = _ratio(tp, actual, f"recall:class{c}", flags)
        per_class.append({"class": c, "precision": p, "recall": r, "f1": _f1(p, r), "support": actual})

    if kind == "binary":
        precision, recall = per_class[1]["precision"], per_class[1]["recall"]
        flags = [f for f in flags if not f.endswith("class0")]
    elif kind == "multiclass":
        precision = sum((pc["precision"] for pc in per_class), Fraction(0)) / k
        recall = sum((pc["recall"] for pc in per_class), Fraction(0)) / k
    else:
        raise ValueError(f"unknown scheme kind {kind!r}")
    return ExactMetrics(accuracy, precision, recall, _f1(precision, recall), tuple(per_class), tuple(flags))


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    precision: float
    recall: float
    f1: float
    flags: tuple[str, ...] = ()

    def as_row(self) -> tuple[float, float, float, float]:
        return (self.accuracy, self.precision, self.recall, self.f1)


def compute_metrics(confusion, scheme) -> Metrics:
    """Percent metrics with two decimals. ``scheme`` is a LabelScheme or its kind string.

    Zero denominators produce 0 and a flag naming the quantity, never an exception.
    """
    kind = scheme if isinstance(scheme, str) else scheme.kind
    e = exact_metrics(confusion, kind)
    return Metrics(to_percent(e.accuracy), to_percent(e.precision), to_percent(e.recall), to_percent(e.f1), e.flags)


@dataclass
class MetricsReport:
    confusion: np.ndarray
    accuracy: float
    precision: float
    recall: float
    f1: float
    per_class: list[dict]
    sample_count: int
    dataset: str = ""
    task: str = ""
    fraction: float = 1.0
    flags: tuple[str, ...] = field(default_factory=tuple)

    @classmethod
    def from_confusion(cls, confusion, scheme, dataset: str = "", fraction: float = 1.0) -> "MetricsReport":
        kind = scheme if isinstance(scheme, str) else scheme.kind
        cm = np.asarray(confusion, dtype=np.int64)
        e = exact_metrics(cm, kind)
        per_class = [
            {"class": pc["class"], "precision": to_percent(pc["precision"]), "recall": to_percent(pc["recall"]),
             "f1": to_percent(pc["f1"]), "support": pc["support"]}
            for pc in e.per_class
        ]
        return cls(cm, to_percent(e.accuracy), to_percent(e.precision), to_percent(e.recall), to_percent(e.f1),
                   per_class, int(cm.sum()), dataset, kind, fraction, e.flags)

    def to_dict(self) -> dict:
        return {
            "dataset": self.dataset, "task": self.task, "fraction": self.fraction,
            "accuracy": self.accuracy, "precision": self.precision, "recall": self.recall, "f1": self.f1,
            "sample_count": self.sample_count, "confusion": self.confusion.tolist(),
            "per_class": self.per_class, "flags": list(self.flags),
        }
