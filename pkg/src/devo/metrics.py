"""Confusion-matrix metrics.

Ratios are evaluated with :class:`fractions.Fraction` from integer counts and
rounded once, so each reported value is the correctly rounded float of its
exact definition.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from fractions import Fraction

import numpy as np


@dataclass(frozen=True)
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    support: int


@dataclass
class Metrics:
    per_class: list[ClassMetrics]
    macro_f1: float
    accuracy: float
    confusion: np.ndarray
    zero_support: list[int] = field(default_factory=list)

    def to_dict(self) -> dict:
        return {
            "per_class": [
                {"precision": c.precision, "recall": c.recall, "f1": c.f1, "support": c.support}
                for c in self.per_class
            ],
            "macro_f1": self.macro_f1,
            "accuracy": self.accuracy,
            "confusion": self.confusion.tolist(),
            "zero_support": list(self.zero_support),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Metrics":
        return cls(
            [ClassMetrics(c["precision"], c["recall"], c["f1"], c["support"]) for c in d["per_class"]],
            d["macro_f1"],
            d["accuracy"],
            np.asarray(d["confusion"], dtype=np.int64),
            list(d.get("zero_support", [])),
        )


def _ratio(num: int, den: int) -> Fraction:
    return Fraction(num, den) if den else Fraction(0)


def confusion_matrix(y_true, y_pred, num_classes: int) -> np.ndarray:
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((num_classes, num_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def metrics_from_confusion(cm) -> Metrics:
    """Rows are true classes, columns predicted classes.

    Classes without support score F1 = 0, count toward the macro average and
    are listed in ``zero_support``.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise ValueError("empty confusion matrix")
    per_class, f1s, zero = [], [], []
    for k in range(cm.shape[0]):
        tp = int(cm[k, k])
        fp = int(cm[:, k].sum()) - tp
        fn = int(cm[k, :].sum()) - tp
        support = tp + fn
        if support == 0:
            zero.append(k)
        f1 = _ratio(2 * tp, 2 * tp + fp + fn)
        f1s.append(f1)
        per_class.append(ClassMetrics(float(_ratio(tp, tp + fp)), float(_ratio(tp, support)), float(f1), support))
    macro = sum(f1s, Fraction(0)) / len(f1s)
    return Metrics(per_class, float(macro), float(Fraction(int(np.trace(cm)), total)), cm, zero)


def metrics_from_predictions(y_true, y_pred, num_classes: int) -> Metrics:
    return metrics_from_confusion(confusion_matrix(y_true, y_pred, num_classes))
