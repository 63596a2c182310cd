"""Confusion matrix and precision / recall / F1 summaries."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import DataError


def _ratio(num, den):
    num = np.asarray(num, dtype=np.float64)
    den = np.asarray(den, dtype=np.float64)
    return np.divide(num, den, out=np.zeros_like(num), where=den > 0)


def _f1(tp, fp, fn):
    # count form of the harmonic mean; exact for hand-checkable counts
    tp2 = 2 * np.asarray(tp, dtype=np.float64)
    return _ratio(tp2, tp2 + fp + fn)


@dataclass
class MetricsReport:
    confusion: np.ndarray  # rows = true class, cols = predicted class
    accuracy: float
    precision: np.ndarray
    recall: np.ndarray
    f1: np.ndarray
    macro_precision: float
    macro_recall: float
    macro_f1: float
    micro_precision: float
    micro_recall: float
    micro_f1: float
    class_names: list | None = None

    @property
    def total(self) -> int:
        return int(self.confusion.sum())

    def to_dict(self) -> dict:
        return {
            "class_names": self.class_names,
            "confusion": self.confusion.astype(int).tolist(),
            "accuracy": self.accuracy,
            "precision": self.precision.tolist(),
            "recall": self.recall.tolist(),
            "f1": self.f1.tolist(),
            "macro": {"precision": self.macro_precision, "recall": self.macro_recall,
                      "f1": self.macro_f1},
            "micro": {"precision": self.micro_precision, "recall": self.micro_recall,
                      "f1": self.micro_f1},
        }


def confusion_matrix(labels, preds, k: int) -> np.ndarray:
    cm = np.zeros((k, k), dtype=np.int64)
    np.add.at(cm, (np.asarray(labels, dtype=np.int64), np.asarray(preds, dtype=np.int64)), 1)
    return cm


def report_from_confusion(cm: np.ndarray, class_names=None) -> MetricsReport:
    """Per-class one-vs-rest scores, their unweighted mean (macro) and the
    scores from globally summed counts (micro). Zero denominators give 0."""
    cm = np.asarray(cm, dtype=np.int64)
    total = cm.sum()
    if total == 0:
        raise DataError("cannot score an empty evaluation set")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    precision = _ratio(tp, tp + fp)
    recall = _ratio(tp, tp + fn)
    f1 = _f1(tp, fp, fn)
    micro_p = float(_ratio(tp.sum(), tp.sum() + fp.sum()))
    micro_r = float(_ratio(tp.sum(), tp.sum() + fn.sum()))
    return MetricsReport(
        confusion=cm,
        accuracy=float(tp.sum() / total),
        precision=precision, recall=recall, f1=f1,
        macro_precision=float(precision.mean()),
        macro_recall=float(recall.mean()),
        macro_f1=float(f1.mean()),
        micro_precision=micro_p, micro_recall=micro_r,
        micro_f1=float(_f1(tp.sum(), fp.sum(), fn.sum())),
        class_names=list(class_names) if class_names is not None else None,
    )


def compute_metrics(labels, preds, k: int, class_names=None) -> MetricsReport:
    if len(labels) == 0:
        raise DataError("cannot score an empty evaluation set")
    return report_from_confusion(confusion_matrix(labels, preds, k), class_names)


def binary_scores(tp: int, fp: int, fn: int):
    """(precision, recall, f1) from raw one-vs-rest counts."""
    p = float(_ratio(tp, tp + fp))
    r = float(_ratio(tp, tp + fn))
    return p, r, float(_f1(tp, fp, fn))
