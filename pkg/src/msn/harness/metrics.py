"""Loss and ranking metrics."""
from __future__ import annotations

import numpy as np
from scipy.special import expit
from scipy.stats import rankdata


class UndefinedMetricError(ValueError):
    pass


def _softplus(z):
    return np.maximum(z, 0.0) + np.log1p(np.exp(-np.abs(z)))


def bce_loss(logit, y):
    """Binary cross-entropy on a logit; returns ``(loss, d_loss/d_logit)``.

    Written as ``y * softplus(-z) + (1 - y) * softplus(z)`` so neither large
    logits nor saturated probabilities lose precision. Works element-wise.
    """
    logit = np.asarray(logit, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    loss = y * _softplus(-logit) + (1.0 - y) * _softplus(logit)
    grad = (1.0 - y) * expit(logit) - y * expit(-logit)
    if loss.ndim == 0:
        return float(loss), float(grad)
    return loss, grad


def auc(scores, labels) -> float:
    """ROC-AUC from the Mann-Whitney rank statistic; tied scores count 0.5."""
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    n_pos = int(np.count_nonzero(labels == 1))
    n_neg = labels.size - n_pos
    if n_pos == 0 or n_neg == 0:
        raise UndefinedMetricError("AUC needs both classes")
    ranks = rankdata(scores)
    return float((ranks[labels == 1].sum() - n_pos * (n_pos + 1) / 2) / (n_pos * n_neg))


def qauc(query_ids, scores, labels) -> float:
    """Mean per-query AUC over queries that contain both labels (unweighted)."""
    query_ids = np.asarray(query_ids)
    scores = np.asarray(scores, dtype=np.float64)
    labels = np.asarray(labels)
    order = np.argsort(query_ids, kind="stable")
    q_sorted = query_ids[order]
    bounds = np.flatnonzero(np.diff(q_sorted)) + 1
    values = []
    for grp in np.split(order, bounds):
        lab = labels[grp]
        if lab.min() == lab.max():
            continue
        values.append(auc(scores[grp], lab))
    if not values:
        raise UndefinedMetricError("no query group contains both labels")
    return float(np.mean(values))
