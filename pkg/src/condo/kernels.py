"""Feature-space and confounder-space kernels.

The feature kernel is an ARD radial basis function whose per-dimension
bandwidths are recomputed for every batch from the residual between the
target batch and the currently adapted source batch.

The confounder kernel multiplies one kernel per confounder entry (RBF for
continuous entries, a white kernel with background similarity 1e-8 for
categorical ones) and adds a zero-mean heteroscedastic noise term. The noise
level is predicted by kernel regression over KMeans prototypes.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
from scipy.spatial.distance import cdist, pdist
from scipy.special import softmax

from .core import (
    CONTINUOUS,
    AffineMap,
    DimensionMismatch,
    InvalidArgument,
    apply_map,
    validate_value,
)

WHITE_BACKGROUND = 1e-8
DEFAULT_BANDWIDTH_FLOOR = 1e-6
KMEANS_MAX_ITER = 100
_MEDIAN_MAX_POINTS = 2000


# --------------------------------------------------------------------------
# Feature-space RBF
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class RbfKernel:
    bandwidths: np.ndarray
    floor: float = DEFAULT_BANDWIDTH_FLOOR

    def __post_init__(self):
        bw = np.maximum(np.asarray(self.bandwidths, dtype=float).reshape(-1), self.floor)
        object.__setattr__(self, "bandwidths", bw)

    def gram(self, x: np.ndarray, z: np.ndarray) -> np.ndarray:
        return rbf_gram(self, x, z)


def rbf_eval(kernel: RbfKernel, x, x_prime) -> float:
    """``exp(-sum_i (x_i - x'_i)^2 / (2 sigma_i^2))``."""
    d = (np.asarray(x, dtype=float) - np.asarray(x_prime, dtype=float)) / kernel.bandwidths
    return float(np.exp(-0.5 * np.dot(d, d)))


def rbf_gram(kernel: RbfKernel, x: np.ndarray, z: np.ndarray) -> np.ndarray:
    s = kernel.bandwidths
    return np.exp(-0.5 * cdist(np.atleast_2d(x) / s, np.atleast_2d(z) / s, "sqeuclidean"))


def dynamic_bandwidth(
    target_batch: np.ndarray,
    source_batch: np.ndarray,
    g: AffineMap,
    floor: float = DEFAULT_BANDWIDTH_FLOOR,
) -> np.ndarray:
    """Per-dimension RMS residual between target rows and adapted source rows.

    Rows are paired in the order they were sampled.
    """
    xt = np.atleast_2d(np.asarray(target_batch, dtype=float))
    xs = np.atleast_2d(np.asarray(source_batch, dtype=float))
    if xt.shape != xs.shape:
        raise DimensionMismatch(f"target batch {xt.shape} vs source batch {xs.shape}")
    if xt.shape[1] != g.m:
        raise DimensionMismatch(f"batches have {xt.shape[1]} columns, map expects {g.m}")
    resid = xt - apply_map(g, xs)
    return np.maximum(np.sqrt(np.mean(resid**2, axis=0)), floor)


# --------------------------------------------------------------------------
# KMeans
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class KMeansResult:
    centroids: np.ndarray
    labels: np.ndarray
    sse_trace: tuple  # SSE after each assignment step

    @property
    def sse(self) -> float:
        return self.sse_trace[-1]


def _kmeans_pp(points: np.ndarray, k: int, rng: np.random.Generator) -> np.ndarray:
    n = points.shape[0]
    centers = [points[rng.integers(n)]]
    d2 = np.sum((points - centers[0]) ** 2, axis=1)
    for _ in range(1, k):
        total = d2.sum()
        idx = rng.integers(n) if total <= 0 else rng.choice(n, p=d2 / total)
        centers.append(points[idx])
        d2 = np.minimum(d2, np.sum((points - points[idx]) ** 2, axis=1))
    return np.array(centers)


def kmeans(points, k: int, seed=0) -> KMeansResult:
    """Lloyd's algorithm from k-means++ seeding.

    Stops at an assignment fixpoint or after 100 iterations. Clusters that
    lose all their points keep their previous centroid.
    """
    x = np.asarray(points, dtype=float)
    if x.ndim == 1:
        x = x[:, None]
    n = x.shape[0]
    if k < 1 or k > n:
        raise InvalidArgument(f"k must satisfy 1 <= k <= N, got k={k}, N={n}")
    rng = np.random.default_rng(seed)
    centroids = _kmeans_pp(x, k, rng)
    labels = None
    trace = []
    for _ in range(KMEANS_MAX_ITER):
        d2 = cdist(x, centroids, "sqeuclidean")
        new_labels = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(n), new_labels].sum()))
        if labels is not None and np.array_equal(labels, new_labels):
            break
        labels = new_labels
        for j in range(k):
            members = labels == j
            if members.any():
                centroids[j] = x[members].mean(axis=0)
    else:
        d2 = cdist(x, centroids, "sqeuclidean")
        labels = np.argmin(d2, axis=1)
        trace.append(float(d2[np.arange(n), labels].sum()))
    return KMeansResult(centroids, labels, tuple(trace))


# --------------------------------------------------------------------------
# Confounder kernel
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConfounderKernel:
    """Product of per-entry kernels plus a heteroscedastic diagonal.

    ``lengthscales[e]`` is the RBF length-scale of continuous entry ``e``
    (``nan`` for categorical entries). ``vocab[e]`` lists the category tokens
    of categorical entry ``e`` seen at fit time; it only drives the one-hot
    coordinates used to place prototypes.
    """

    schema: tuple
    lengthscales: np.ndarray
    vocab: tuple
    prototypes: np.ndarray
    prototype_noise: np.ndarray
    smoothing: float
    amplitude: float = 1.0

    def encode(self, values) -> np.ndarray:
        """Embed confounder records for prototype regression."""
        cols = []
        for e, (_, kind) in enumerate(self.schema):
            if kind == CONTINUOUS:
                cols.append(np.array([[v[e] for v in values]], dtype=float).T / self.lengthscales[e])
            else:
                lookup = {t: i for i, t in enumerate(self.vocab[e])}
                onehot = np.zeros((len(values), len(self.vocab[e])))
                for n, v in enumerate(values):
                    i = lookup.get(v[e])
                    if i is not None:
                        onehot[n, i] = 1.0
                cols.append(onehot)
        if not cols:
            return np.zeros((len(values), 0))
        return np.hstack(cols)

    def noise(self, values) -> np.ndarray:
        """Kernel-smoothed noise level at each confounder record."""
        if not np.any(self.prototype_noise):
            return np.zeros(len(values))
        d2 = cdist(self.encode(values), self.prototypes, "sqeuclidean")
        w = softmax(-0.5 * d2 / self.smoothing**2, axis=1)
        return w @ self.prototype_noise

    def base_gram(self, y1, y2) -> np.ndarray:
        """Product of the per-entry RBF / white kernels (no noise, no amplitude)."""
        k = np.ones((len(y1), len(y2)))
        for e, (_, kind) in enumerate(self.schema):
            if kind == CONTINUOUS:
                a = np.array([v[e] for v in y1], dtype=float)
                b = np.array([v[e] for v in y2], dtype=float)
                k *= np.exp(-0.5 * ((a[:, None] - b[None, :]) / self.lengthscales[e]) ** 2)
            else:
                a = np.array([v[e] for v in y1], dtype=object)
                b = np.array([v[e] for v in y2], dtype=object)
                k *= np.where(a[:, None] == b[None, :], 1.0, WHITE_BACKGROUND)
        return k

    def gram(self, y1, y2=None) -> np.ndarray:
        """Kernel matrix; with ``y2`` omitted the noise lands on the diagonal."""
        if y2 is None:
            k = self.amplitude * self.base_gram(y1, y1)
            k[np.diag_indices_from(k)] += self.noise(y1)
            return k
        return self.amplitude * self.base_gram(y1, y2)


def _median_heuristic(column: np.ndarray) -> float:
    col = column[:_MEDIAN_MAX_POINTS].reshape(-1, 1)
    if col.shape[0] < 2:
        return 1.0
    med = float(np.median(pdist(col)))
    return med if med > 0 else 1.0


def fit_confounder_kernel(
    values,
    schema,
    residual_targets=None,
    k: int = 10,
    seed=0,
    amplitude: float = 1.0,
) -> ConfounderKernel:
    """Build a confounder kernel for ``values``.

    Continuous entries get a median-heuristic RBF length-scale. KMeans
    (``k`` clamped to the number of distinct encoded points) places the
    prototypes; each prototype's noise level is the mean of the
    ``residual_targets`` (squared residuals) of its members. Omitting
    ``residual_targets`` yields a kernel without noise.
    """
    values = [validate_value(v, schema) for v in values]
    schema = tuple((str(n), str(kd)) for n, kd in schema)
    if not values:
        raise InvalidArgument("cannot fit a confounder kernel on zero samples")
    n = len(values)
    targets = np.zeros(n) if residual_targets is None else np.asarray(residual_targets, dtype=float)
    if targets.shape != (n,):
        raise DimensionMismatch(f"{targets.shape[0]} residual targets for {n} samples")

    lengthscales = np.full(len(schema), np.nan)
    vocab = []
    for e, (_, kind) in enumerate(schema):
        if kind == CONTINUOUS:
            lengthscales[e] = _median_heuristic(np.array([v[e] for v in values]))
            vocab.append(())
        else:
            vocab.append(tuple(dict.fromkeys(v[e] for v in values)))

    draft = ConfounderKernel(schema, lengthscales, tuple(vocab), np.zeros((0, 0)), np.zeros(0), 1.0)
    emb = draft.encode(values)
    if emb.shape[1] == 0:
        emb = np.zeros((n, 1))
    n_distinct = np.unique(emb, axis=0).shape[0]
    km = kmeans(emb, min(k, n_distinct), seed)
    noise = np.array([targets[km.labels == j].mean() if np.any(km.labels == j) else 0.0
                      for j in range(km.centroids.shape[0])])
    smoothing = max(np.sqrt(km.sse / n), 1e-6)
    return ConfounderKernel(schema, lengthscales, tuple(vocab), km.centroids, noise, smoothing, amplitude)


def confounder_kernel_eval(kernel: ConfounderKernel, y, y_prime) -> float:
    y = validate_value(y, kernel.schema)
    y_prime = validate_value(y_prime, kernel.schema)
    value = kernel.amplitude * float(kernel.base_gram([y], [y_prime])[0, 0])
    if y == y_prime:
        value += float(kernel.noise([y])[0])
    return value
