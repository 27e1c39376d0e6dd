"""Rank-based ROC AUC and thresholded confusion metrics."""

from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Optional

import numpy as np

from .errors import DataError, ShapeError


def _check(scores, labels):
    s = np.asarray(scores, dtype=np.float64).reshape(-1)
    y = np.asarray(labels).reshape(-1)
    if s.shape != y.shape:
        raise ShapeError("scores and labels differ in length", s.shape, y.shape)
    if not np.all((y == 0) | (y == 1)):
        raise DataError("labels must be 0 or 1")
    return s, y.astype(bool)


def midranks(values) -> np.ndarray:
    """1-based ranks where tied values share the mean of their positions."""
    v = np.asarray(values, dtype=np.float64)
    order = np.argsort(v, kind="mergesort")
    sorted_v = v[order]
    # start index of each run of equal values
    starts = np.flatnonzero(np.r_[True, sorted_v[1:] != sorted_v[:-1]])
    ends = np.r_[starts[1:], len(v)]
    run_rank = (starts + ends + 1) / 2.0
    ranks = np.empty(len(v))
    ranks[order] = np.repeat(run_rank, ends - starts)
    return ranks


def roc_auc(scores, labels) -> float:
    """Area under the ROC curve with half credit for ties.

    Equals P(score_pos > score_neg) + 0.5 * P(score_pos == score_neg), computed
    from midranks (the Mann-Whitney statistic).
    """
    s, y = _check(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise DataError("AUC undefined: scores cover a single class")
    r = midranks(s)
    u = r[y].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


@dataclass
class MetricsReport:
    auc: Optional[float]
    accuracy: float
    precision: float
    recall: float
    tp: int
    fp: int
    tn: int
    fn: int
    fold: Optional[int] = None
    repetition: Optional[int] = None
    model: str = ""
    loss: str = ""
    heads: Optional[int] = None
    pooling: str = ""
    config_digest: str = ""

    def to_dict(self) -> dict:
        return asdict(self)


def confusion_metrics(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Threshold at ``score >= threshold``; empty denominators give 0."""
    s, y = _check(scores, labels)
    pred = s >= threshold
    tp = int(np.sum(pred & y))
    fp = int(np.sum(pred & ~y))
    tn = int(np.sum(~pred & ~y))
    fn = int(np.sum(~pred & y))
    n = tp + fp + tn + fn
    return MetricsReport(
        auc=None,
        accuracy=(tp + tn) / n if n else 0.0,
        precision=tp / (tp + fp) if tp + fp else 0.0,
        recall=tp / (tp + fn) if tp + fn else 0.0,
        tp=tp,
        fp=fp,
        tn=tn,
        fn=fn,
    )


def evaluate(scores, labels, threshold: float = 0.5) -> MetricsReport:
    """Confusion metrics plus AUC (left as None when only one class is present)."""
    report = confusion_metrics(scores, labels, threshold)
    y = np.asarray(labels)
    if 0 < y.sum() < len(y):
        report.auc = roc_auc(scores, labels)
    return report
