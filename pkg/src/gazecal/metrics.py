"""Error and agreement metrics."""
from __future__ import annotations

import numpy as np


def euclidean_distances(preds, truths):
    p = np.asarray(preds, dtype=np.float64).reshape(-1, 2)
    y = np.asarray(truths, dtype=np.float64).reshape(-1, 2)
    if len(p) != len(y):
        raise ValueError(f"length mismatch: {len(p)} predictions vs {len(y)} targets")
    if len(p) == 0:
        raise ValueError("need at least one prediction")
    return np.hypot(p[:, 0] - y[:, 0], p[:, 1] - y[:, 1])


def euclidean_error(preds, truths):
    """Mean and population std of point-wise Euclidean distances (cm)."""
    d = euclidean_distances(preds, truths)
    return float(d.mean()), float(d.std())


def _codes(x):
    _, inv = np.unique(np.asarray(x, dtype=object).astype(str), return_inverse=True)
    return inv


def nmi(labels, clusters):
    """Normalised mutual information ``2 I(Y;C) / (H(Y) + H(C))``, natural log.

    Zero when both partitions are a single block.
    """
    y, c = _codes(labels), _codes(clusters)
    if len(y) != len(c):
        raise ValueError("labels and clusters differ in length")
    if len(y) == 0:
        raise ValueError("need at least one element")
    n = len(y)
    table = np.zeros((y.max() + 1, c.max() + 1))
    np.add.at(table, (y, c), 1.0)
    pxy = table / n
    px, py = pxy.sum(axis=1), pxy.sum(axis=0)
    nz = pxy > 0
    mi = float(np.sum(pxy[nz] * np.log(pxy[nz] / np.outer(px, py)[nz])))
    hy = float(-np.sum(px * np.log(px)))
    hc = float(-np.sum(py * np.log(py)))
    if hy + hc == 0:
        return 0.0
    return float(min(1.0, max(0.0, 2.0 * mi / (hy + hc))))


def macro_f1(labels, preds):
    """Unweighted mean of per-class F1 over classes seen in either input."""
    y = np.asarray(labels, dtype=object).astype(str)
    p = np.asarray(preds, dtype=object).astype(str)
    if len(y) != len(p):
        raise ValueError("labels and preds differ in length")
    classes = np.union1d(y, p)
    if len(classes) == 0:
        return 0.0
    scores = []
    for k in classes:
        tp = np.sum((y == k) & (p == k))
        fp = np.sum((y != k) & (p == k))
        fn = np.sum((y == k) & (p != k))
        denom = 2 * tp + fp + fn
        scores.append(2 * tp / denom if denom else 0.0)
    return float(np.mean(scores))


def accuracy(labels, preds):
    y = np.asarray(labels, dtype=object).astype(str)
    p = np.asarray(preds, dtype=object).astype(str)
    return float(np.mean(y == p)) if len(y) else 0.0
