"""Confusion matrices and macro-averaged F1."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import UsageError


def confusion_matrix(labels: np.ndarray, predictions: np.ndarray, num_classes: int) -> np.ndarray:
    """Counts with true class on rows, predicted class on columns."""
    labels = np.asarray(labels, dtype=np.int64)
    predictions = np.asarray(predictions, dtype=np.int64)
    flat = np.bincount(labels * num_classes + predictions, minlength=num_classes * num_classes)
    return flat.reshape(num_classes, num_classes)


def per_class_f1(confusion: np.ndarray) -> np.ndarray:
    """F1 = 2TP / (2TP + FP + FN) per class, 0 where the denominator is 0."""
    confusion = np.asarray(confusion)
    tp = np.diag(confusion).astype(np.float64)
    fp = confusion.sum(axis=0) - tp
    fn = confusion.sum(axis=1) - tp
    denom = 2.0 * tp + fp + fn
    return np.divide(2.0 * tp, denom, out=np.zeros_like(tp), where=denom > 0)


def macro_f1(confusion: np.ndarray) -> float:
    """Unweighted mean of per-class F1 over classes present in the test labels.

    Classes with no true instances (empty confusion row) are left out of the
    mean, so a test set covering only some classes is scored on those.
    """
    confusion = np.asarray(confusion)
    if confusion.ndim != 2 or confusion.shape[0] != confusion.shape[1] or confusion.size == 0:
        raise UsageError("confusion must be a non-empty square matrix")
    support = confusion.sum(axis=1)
    if not (support > 0).any():
        raise UsageError("confusion matrix has no samples")
    return float(per_class_f1(confusion)[support > 0].mean())


@dataclass(frozen=True)
class MetricsRecord:
    agent_id: int
    epoch: int
    macro_f1: float
    per_class_f1: np.ndarray
    confusion: np.ndarray
    mean_loss: float

    def same_as(self, other: "MetricsRecord") -> bool:
        return (self.agent_id == other.agent_id and self.epoch == other.epoch
                and self.macro_f1 == other.macro_f1 and self.mean_loss == other.mean_loss
                and np.array_equal(self.per_class_f1, other.per_class_f1)
                and np.array_equal(self.confusion, other.confusion))
