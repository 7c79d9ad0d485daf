"""Confusion-matrix based IoU / mIoU."""
from __future__ import annotations

import json
from dataclasses import dataclass

import numpy as np

from .core import IGNORE


@dataclass
class ConfusionMatrix:
    """Rows are ground truth, columns are predictions."""

    counts: np.ndarray

    @classmethod
    def empty(cls, num_classes: int) -> ConfusionMatrix:
        return cls(np.zeros((num_classes, num_classes), dtype=np.int64))

    @property
    def num_classes(self) -> int:
        return self.counts.shape[0]

    def __add__(self, other: ConfusionMatrix) -> ConfusionMatrix:
        if self.counts.shape != other.counts.shape:
            raise ValueError("cannot merge confusion matrices of different sizes")
        return ConfusionMatrix(self.counts + other.counts)


def accumulate(cm: ConfusionMatrix, pred: np.ndarray, truth: np.ndarray) -> ConfusionMatrix:
    """Return ``cm`` plus the counts of one prediction/truth pair (IGNORE truth skipped)."""
    pred = np.asarray(pred)
    truth = np.asarray(truth)
    if pred.shape != truth.shape:
        raise ValueError(f"shape mismatch: pred {pred.shape} vs truth {truth.shape}")
    C = cm.num_classes
    keep = truth != IGNORE
    t = truth[keep].astype(np.int64)
    p = pred[keep].astype(np.int64)
    if t.size and (t.max() >= C or p.max() >= C or min(t.min(), p.min()) < 0):
        raise ValueError(f"class index out of range for {C} classes")
    counts = np.bincount(t * C + p, minlength=C * C).reshape(C, C)
    return ConfusionMatrix(cm.counts + counts)


def miou(cm: ConfusionMatrix) -> tuple[np.ndarray, float]:
    """Per-class IoU (NaN where a class is absent from both truth and prediction) and their mean."""
    tp = np.diag(cm.counts).astype(np.float64)
    denom = cm.counts.sum(0) + cm.counts.sum(1) - tp
    per_class = np.full(cm.num_classes, np.nan)
    defined = denom > 0
    if not defined.any():
        raise ValueError("mIoU undefined: no class has any truth or predicted pixel")
    per_class[defined] = tp[defined] / denom[defined]
    return per_class, float(per_class[defined].mean())


def metrics_report(cm: ConfusionMatrix, domain_id: int, step: int, **extra) -> dict:
    per_class, mean = miou(cm)
    return {"domain_id": domain_id,
            "per_class_iou": [None if np.isnan(v) else float(v) for v in per_class],
            "miou": mean, "step": step, **extra}


def dumps_report(report: dict) -> str:
    return json.dumps(report)
