"""Exact ranking metrics for binary scores.

Both metrics treat tied scores as a single threshold group: AUROC is the
Mann-Whitney statistic with half credit for ties, AUPRC is average
precision accumulated over distinct thresholds.  No interpolation anywhere.
"""

from __future__ import annotations

import numpy as np


def _checked(scores, labels) -> tuple[np.ndarray, np.ndarray]:
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    if scores.ndim != 1 or scores.shape != labels.shape:
        raise ValueError(f"scores/labels must be matching 1-D arrays, "
                         f"got {scores.shape} and {labels.shape}")
    if not np.isfinite(scores).all():
        raise ValueError("scores contain non-finite values")
    uniq = np.unique(labels)
    if not np.isin(uniq, (0, 1)).all():
        raise ValueError(f"labels must be 0/1, got values {uniq.tolist()}")
    if uniq.size < 2:
        counts = np.bincount(labels.astype(np.int64), minlength=2)
        raise ValueError(f"need both classes present to rank scores, "
                         f"got class counts {counts.tolist()}")
    return scores, labels.astype(np.int64)


def auroc(scores, labels) -> float:
    """P(score+ > score-) + 0.5 * P(score+ = score-), via midranks."""
    scores, labels = _checked(scores, labels)
    order = np.argsort(scores, kind="stable")
    ranks = np.empty(len(scores))
    sorted_scores = scores[order]
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        ranks[order[i:j + 1]] = 0.5 * (i + j) + 1.0   # midrank, 1-based
        i = j + 1
    n_pos = int(labels.sum())
    n_neg = len(labels) - n_pos
    u = ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def auprc(scores, labels) -> float:
    """Average precision over descending-score threshold groups."""
    scores, labels = _checked(scores, labels)
    order = np.argsort(-scores, kind="stable")
    sorted_scores = scores[order]
    sorted_labels = labels[order]
    n_pos = int(labels.sum())

    ap = 0.0
    tp = 0
    seen = 0
    i = 0
    while i < len(scores):
        j = i
        while j + 1 < len(scores) and sorted_scores[j + 1] == sorted_scores[i]:
            j += 1
        group_pos = int(sorted_labels[i:j + 1].sum())
        tp += group_pos
        seen += j + 1 - i
        if group_pos:
            ap += group_pos * (tp / seen)
        i = j + 1
    return float(ap / n_pos)
