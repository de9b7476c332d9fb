"""Evaluation metrics for adapted features."""

from __future__ import annotations

import numpy as np
from scipy.spatial.distance import cdist

from .core import DimensionMismatch, InvalidArgument

# Fixed hyperplanes (w, c) in the target frame of the two-circles scenario.
UP_VS_DOWN = (np.array([0.0, 1.0]), 1.0)
LEFT_VS_RIGHT = (np.array([1.0, 0.0]), 0.0)


def rmse(adapted, oracle) -> float:
    a = np.asarray(adapted, dtype=float)
    b = np.asarray(oracle, dtype=float)
    if a.shape != b.shape:
        raise DimensionMismatch(f"adapted {a.shape} vs oracle {b.shape}")
    return float(np.sqrt(np.mean((a - b) ** 2)))


def silhouette(features, labels) -> float:
    """Mean Euclidean silhouette; samples in singleton clusters score 0."""
    x = np.asarray(features, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    labels = np.asarray(labels)
    if labels.shape[0] != x.shape[0]:
        raise DimensionMismatch(f"{labels.shape[0]} labels for {x.shape[0]} samples")
    uniq, ids = np.unique(labels, return_inverse=True)
    if uniq.size < 2:
        raise InvalidArgument("silhouette needs at least two distinct labels")
    dist = cdist(x, x)
    counts = np.bincount(ids)
    # per-sample sum of distances to each cluster
    sums = np.zeros((x.shape[0], uniq.size))
    for k in range(uniq.size):
        sums[:, k] = dist[:, ids == k].sum(axis=1)
    own = counts[ids]
    rows = np.arange(x.shape[0])
    with np.errstate(invalid="ignore", divide="ignore"):
        a = sums[rows, ids] / (own - 1)
        other = sums / counts
    other[rows, ids] = np.inf
    b = other.min(axis=1)
    denom = np.maximum(a, b)
    s = np.where(denom > 0, (b - a) / np.where(denom > 0, denom, 1.0), 0.0)
    s[own == 1] = 0.0
    return float(s.mean())


def fixed_classifier_accuracy(features, labels, hyperplane) -> float:
    """Fraction of samples where ``sign(w.x - c)`` matches ``labels``.

    Labels are +1 / -1 (0 and False count as -1); points on the hyperplane
    are assigned -1.
    """
    x = np.asarray(features, dtype=float)
    w, c = hyperplane
    w = np.asarray(w, dtype=float)
    if x.ndim != 2 or x.shape[1] != w.size:
        raise DimensionMismatch(f"features {x.shape} do not match hyperplane of dimension {w.size}")
    labels = np.where(np.asarray(labels) > 0, 1, -1)
    pred = np.where(x @ w - c > 0, 1, -1)
    return float(np.mean(pred == labels))
