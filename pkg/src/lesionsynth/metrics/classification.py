"""Confusion matrices and macro-averaged classification scores."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels


@dataclass(frozen=True)
class ConfusionMatrix:
    """``counts[t, p]`` = number of samples with truth ``t`` predicted as ``p``."""

    counts: np.ndarray

    def __post_init__(self):
        c = np.asarray(self.counts)
        if c.ndim != 2 or c.shape[0] != c.shape[1]:
            raise ValueError(f"confusion matrix must be square, got {c.shape}")
        if (c < 0).any() or not np.issubdtype(c.dtype, np.integer):
            raise ValueError("confusion matrix must hold non-negative integers")
        object.__setattr__(self, "counts", c.astype(np.int64))

    @property
    def K(self) -> int:
        return self.counts.shape[0]

    @property
    def total(self) -> int:
        return int(self.counts.sum())

    def tp(self) -> np.ndarray:
        return np.diag(self.counts).copy()

    def fn(self) -> np.ndarray:
        return self.counts.sum(axis=1) - self.tp()

    def fp(self) -> np.ndarray:
        return self.counts.sum(axis=0) - self.tp()

    def tn(self) -> np.ndarray:
        return self.total - self.tp() - self.fn() - self.fp()

    def __add__(self, other: "ConfusionMatrix") -> "ConfusionMatrix":
        return ConfusionMatrix(self.counts + other.counts)


def confusion_matrix(preds, truth, K: int) -> ConfusionMatrix:
    preds, truth = np.asarray(preds), np.asarray(truth)
    if preds.shape != truth.shape:
        raise ValueError(f"preds and truth lengths differ: {preds.shape} vs {truth.shape}")
    return ConfusionMatrix(kernels.confusion_counts(truth, preds, K))


def _safe_div(a: np.ndarray, b: np.ndarray) -> np.ndarray:
    a, b = np.asarray(a, dtype=np.float64), np.asarray(b, dtype=np.float64)
    return np.divide(a, b, out=np.zeros_like(a), where=b != 0)


def classification_report(cm: ConfusionMatrix) -> dict:
    """Accuracy plus macro sensitivity, precision and F1.

    Per-class ratios with a zero denominator count as 0. F1 is computed per
    class and then averaged.
    """
    if cm.total == 0:
        raise ValueError("empty confusion matrix")
    tp, fn, fp = cm.tp(), cm.fn(), cm.fp()
    sens = _safe_div(tp, tp + fn)
    prec = _safe_div(tp, tp + fp)
    f1 = _safe_div(2 * prec * sens, prec + sens)
    return {
        "accuracy": float(tp.sum() / cm.total),
        "sensitivity": float(sens.mean()),
        "precision": float(prec.mean()),
        "f1": float(f1.mean()),
        "per_class": {"sensitivity": sens.tolist(), "precision": prec.tolist(), "f1": f1.tolist()},
    }
