"""Confusion-matrix metrics with a fixed four-class label space."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .data import N_CLASSES


def confusion_matrix(y_true, y_pred, n_classes=N_CLASSES) -> np.ndarray:
    """Counts with true classes on rows and predictions on columns."""
    y_true = np.asarray(y_true, dtype=np.int64)
    y_pred = np.asarray(y_pred, dtype=np.int64)
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    np.add.at(cm, (y_true, y_pred), 1)
    return cm


def per_class_f1(cm) -> np.ndarray:
    """F1 = 2TP / (2TP + FP + FN); classes with no support and no predictions score 0."""
    cm = np.asarray(cm)
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - np.diag(cm)
    fn = cm.sum(axis=1) - np.diag(cm)
    denom = 2 * tp + fp + fn
    return np.divide(2 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def accuracy(cm) -> float:
    cm = np.asarray(cm)
    total = cm.sum()
    return float(np.trace(cm) / total) if total else 0.0


def macro_f1(cm) -> float:
    f1 = per_class_f1(cm)
    return float(sum(float(x) for x in f1) / len(f1))


@dataclass
class MetricsReport:
    macro_f1: float
    accuracy: float
    per_class_f1: list
    confusion: list
    fold_id: int | None = None
    condition: str = "clean"
    extra: dict = field(default_factory=dict)

    @classmethod
    def from_predictions(cls, y_true, y_pred, **kw):
        cm = confusion_matrix(y_true, y_pred)
        return cls(macro_f1(cm), accuracy(cm), [float(x) for x in per_class_f1(cm)], cm.tolist(), **kw)

    def row(self):
        out = {"fold": self.fold_id, "condition": self.condition,
               "macro_f1": self.macro_f1, "accuracy": self.accuracy}
        for c, f in enumerate(self.per_class_f1):
            out[f"f1_sat{c + 1}"] = f
        out["confusion"] = ";".join(",".join(str(v) for v in r) for r in self.confusion)
        out.update(self.extra)
        return out


def summarize(values):
    """Mean and population standard deviation."""
    arr = np.asarray(values, dtype=np.float64)
    return float(arr.mean()), float(arr.std())
