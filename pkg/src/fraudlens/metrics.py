"""Evaluation metrics for imbalanced binary classification.

Accuracy alone is misleading at ~2% fraud prevalence, so ranking metrics
(average precision and ROC-AUC) carry the signal. Both are implemented
rank-based so they can be checked exactly against brute-force pairwise
oracles in the tests.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np

from .errors import MetricError

__all__ = ["Metrics", "accuracy", "mean_cross_entropy", "average_precision", "roc_auc", "compute_metrics"]


@dataclass(frozen=True)
class Metrics:
    accuracy: float
    loss: float
    average_precision: float
    roc_auc: float

    def to_dict(self) -> dict:
        return asdict(self)


def _validate(scores, labels):
    s = np.asarray(scores, dtype=np.float64)
    y = np.asarray(labels, dtype=np.int64)
    if s.ndim != 1 or y.shape != s.shape:
        raise ValueError("scores and labels must be 1-D and aligned")
    if not np.all((y == 0) | (y == 1)):
        raise ValueError("labels must be 0/1")
    return s, y


def accuracy(scores, labels, threshold: float = 0.5) -> float:
    s, y = _validate(scores, labels)
    return float(np.mean((s >= threshold).astype(np.int64) == y))


def mean_cross_entropy(scores, labels, eps: float = 1e-12) -> float:
    """Mean negative log-likelihood of the true class, scores = p(class 1)."""
    s, y = _validate(scores, labels)
    p = np.clip(np.where(y == 1, s, 1.0 - s), eps, 1.0)
    return float(-np.mean(np.log(p)))


def average_precision(scores, labels) -> float:
    """Mean of precision evaluated at the rank of each positive.

    Ties are broken by input position (stable sort on descending score).
    """
    s, y = _validate(scores, labels)
    if y.sum() == 0 or y.sum() == len(y):
        raise MetricError("average precision needs both classes present")
    order = np.argsort(-s, kind="stable")
    ranked = y[order]
    hits = np.cumsum(ranked)
    ranks = np.arange(1, len(y) + 1)
    precision_at_pos = hits[ranked == 1] / ranks[ranked == 1]
    return float(precision_at_pos.mean())


def roc_auc(scores, labels) -> float:
    """Probability a random positive outranks a random negative, ties 1/2."""
    s, y = _validate(scores, labels)
    n_pos = int(y.sum())
    n_neg = len(y) - n_pos
    if n_pos == 0 or n_neg == 0:
        raise MetricError("ROC-AUC needs both classes present")
    order = np.argsort(s, kind="mergesort")
    sorted_scores = s[order]
    ranks = np.empty(len(s), dtype=np.float64)
    # midranks for tied scores
    i = 0
    while i < len(s):
        j = i
        while j + 1 < len(s) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0
        i = j + 1
    rank_sum_pos = ranks[y == 1].sum()
    return float((rank_sum_pos - n_pos * (n_pos + 1) / 2.0) / (n_pos * n_neg))


def compute_metrics(scores, labels) -> Metrics:
    return Metrics(
        accuracy=accuracy(scores, labels),
        loss=mean_cross_entropy(scores, labels),
        average_precision=average_precision(scores, labels),
        roc_auc=roc_auc(scores, labels),
    )
