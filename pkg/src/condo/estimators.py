"""Per-domain conditional-distribution estimators and the confounder prior."""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np
from scipy.linalg import cho_solve, cholesky, solve_triangular

from .core import (
    CATEGORICAL,
    CONTINUOUS,
    Dataset,
    DegenerateWeights,
    InvalidArgument,
    NumericalFailure,
    SingularCovariance,
    UnknownCategory,
    validate_pair,
    validate_value,
)
from .kernels import ConfounderKernel, fit_confounder_kernel

GP_NOISE_FLOOR = 1e-6
GP_JITTER_ESCALATIONS = 3
DEGENERATE_KERNEL_LEVEL = 1e-7


# --------------------------------------------------------------------------
# Confounder prior
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConfounderPrior:
    """Weighted confounder values over which the expected divergence is taken.

    ``n_points`` is the number of pooled samples the prior was built from;
    it stays the same whether or not duplicates were merged.
    """

    values: tuple
    weights: np.ndarray
    n_points: int

    def __len__(self):
        return len(self.values)

    def expectation(self, fn) -> float:
        return float(np.dot(self.weights, [fn(v) for v in self.values]))


def build_prior(source: Dataset, target: Dataset, dedup: bool = True) -> ConfounderPrior:
    """Pooled empirical distribution of the source and target confounders.

    With ``dedup`` and an all-categorical schema, repeated values are merged
    and weighted by their counts.
    """
    validate_pair(source, target)
    pooled = source.confounders + target.confounders
    total = len(pooled)
    categorical = bool(source.confounder_schema) and all(
        kind == CATEGORICAL for _, kind in source.confounder_schema
    )
    if dedup and categorical:
        counts: dict = {}
        for v in pooled:
            counts[v] = counts.get(v, 0) + 1
        values = tuple(counts)
        weights = np.array([counts[v] for v in values], dtype=float) / total
    else:
        values = pooled
        weights = np.full(total, 1.0 / total)
    return ConfounderPrior(values, weights, total)


# --------------------------------------------------------------------------
# Linear-Gaussian estimator
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class ConfounderEncoder:
    """Raw values for continuous entries, one-hot columns for categorical ones."""

    schema: tuple
    vocab: tuple

    @classmethod
    def fit(cls, values, schema) -> "ConfounderEncoder":
        vocab = []
        for e, (_, kind) in enumerate(schema):
            vocab.append(tuple(sorted({v[e] for v in values})) if kind == CATEGORICAL else ())
        return cls(tuple(schema), tuple(vocab))

    @property
    def width(self) -> int:
        return sum(1 if kind == CONTINUOUS else len(self.vocab[e])
                   for e, (_, kind) in enumerate(self.schema))

    def transform(self, values) -> np.ndarray:
        out = np.zeros((len(values), self.width))
        for n, v in enumerate(values):
            col = 0
            for e, (name, kind) in enumerate(self.schema):
                if kind == CONTINUOUS:
                    out[n, col] = v[e]
                    col += 1
                else:
                    try:
                        out[n, col + self.vocab[e].index(v[e])] = 1.0
                    except ValueError:
                        raise UnknownCategory(
                            f"category {v[e]!r} of {name!r} was not seen when fitting"
                        ) from None
                    col += len(self.vocab[e])
        return out


@dataclass(frozen=True, eq=False)
class LinearGaussianEstimator:
    """``x | y ~ N(B [1, enc(y)], Sigma)`` with a single shared covariance."""

    coef_b: np.ndarray  # M x (1 + P); column 0 is the intercept
    precision: np.ndarray
    covariance: np.ndarray
    encoder: ConfounderEncoder

    def means(self, values) -> np.ndarray:
        z = self.encoder.transform([validate_value(v, self.encoder.schema) for v in values])
        return self.coef_b[:, 0] + z @ self.coef_b[:, 1:].T


def fit_linear_gaussian(data: Dataset, ridge: float = 1e-3, precision=None) -> LinearGaussianEstimator:
    """Ridge regression of the features on the encoded confounders.

    The residual covariance is shrunk by ``ridge * I``. Pass ``precision``
    to use an externally estimated precision matrix instead (e.g. from a
    graphical lasso).
    """
    encoder = ConfounderEncoder.fit(data.confounders, data.confounder_schema)
    z = encoder.transform(data.confounders)
    x = data.features
    n, m = x.shape
    z_mean = z.mean(axis=0)
    x_mean = x.mean(axis=0)
    zc = z - z_mean
    xc = x - x_mean
    p = z.shape[1]
    gram = zc.T @ zc + ridge * np.eye(p)
    coef = np.linalg.lstsq(gram, zc.T @ xc, rcond=None)[0].T if p else np.zeros((m, 0))
    intercept = x_mean - coef @ z_mean
    resid = xc - zc @ coef.T

    if precision is None:
        cov = resid.T @ resid / n + ridge * np.eye(m)
        cov = 0.5 * (cov + cov.T)
        eig = np.linalg.eigvalsh(cov)
        if eig[0] <= 0 or eig[0] < 1e-14 * max(eig[-1], 1e-300):
            raise SingularCovariance("residual covariance is singular; use ridge > 0")
        prec = np.linalg.inv(cov)
    else:
        prec = np.asarray(precision, dtype=float)
        if prec.shape != (m, m):
            raise InvalidArgument(f"precision must be {m}x{m}")
        cov = np.linalg.inv(prec)
    prec = 0.5 * (prec + prec.T)
    return LinearGaussianEstimator(np.column_stack([intercept, coef]), prec, cov, encoder)


def lg_conditional(est: LinearGaussianEstimator, y) -> tuple[np.ndarray, np.ndarray]:
    return est.means([y])[0], est.covariance


# --------------------------------------------------------------------------
# Gaussian-process estimator
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class _GpFeature:
    kernel: ConfounderKernel
    prior_mean: float
    chol: np.ndarray  # lower Cholesky factor of K + diag(noise)
    alpha: np.ndarray


@dataclass(frozen=True, eq=False)
class GpEstimator:
    """Independent GP per feature over the confounder space."""

    train_confounders: tuple
    schema: tuple
    features: tuple  # of _GpFeature

    def moments(self, values) -> tuple[np.ndarray, np.ndarray]:
        """Posterior predictive mean and variance (N x M each)."""
        values = [validate_value(v, self.schema) for v in values]
        n = len(values)
        mean = np.empty((n, len(self.features)))
        var = np.empty_like(mean)
        base = None
        for i, f in enumerate(self.features):
            if base is None:
                base = f.kernel.base_gram(values, self.train_confounders)
            k_star = f.kernel.amplitude * base
            mean[:, i] = f.prior_mean + k_star @ f.alpha
            v = solve_triangular(f.chol, k_star.T, lower=True)
            var_f = np.maximum(f.kernel.amplitude - np.sum(v * v, axis=0), 0.0)
            var[:, i] = var_f + f.kernel.noise(values)
        return mean, var

    def prior_variance(self, y) -> np.ndarray:
        y = validate_value(y, self.schema)
        return np.array([f.kernel.amplitude + f.kernel.noise([y])[0] for f in self.features])


def _cholesky_with_jitter(k: np.ndarray) -> np.ndarray:
    jitter = GP_NOISE_FLOOR
    for _ in range(GP_JITTER_ESCALATIONS + 1):
        try:
            return cholesky(k, lower=True)
        except np.linalg.LinAlgError:
            k = k + jitter * np.eye(k.shape[0])
            jitter *= 10
    raise NumericalFailure("GP Gram matrix is not positive definite after jitter escalation")


def gp_feature_kernels(data: Dataset, k: int = 10, seed=0) -> list[ConfounderKernel]:
    """Per-feature confounder kernels with heteroscedastic noise.

    Noise targets are squared residuals from the mean of each sample's
    prototype cluster.
    """
    base = fit_confounder_kernel(data.confounders, data.confounder_schema, None, k, seed)
    emb = base.encode(data.confounders)
    if emb.shape[1] == 0:
        emb = np.zeros((data.n, 1))
    d2 = ((emb[:, None, :] - base.prototypes[None, :, :]) ** 2).sum(axis=2)
    labels = np.argmin(d2, axis=1)
    kernels = []
    for i in range(data.m):
        x = data.features[:, i]
        cluster_mean = np.zeros(base.prototypes.shape[0])
        for j in range(cluster_mean.size):
            if np.any(labels == j):
                cluster_mean[j] = x[labels == j].mean()
        sq = (x - cluster_mean[labels]) ** 2
        noise = np.array([sq[labels == j].mean() if np.any(labels == j) else 0.0
                          for j in range(cluster_mean.size)])
        kern = dataclasses.replace(base, prototype_noise=noise)
        train_noise = kern.noise(data.confounders)
        amplitude = max(float(np.var(x) - train_noise.mean()), GP_NOISE_FLOOR)
        kernels.append(dataclasses.replace(kern, amplitude=amplitude))
    return kernels


def fit_gp(data: Dataset, k: int = 10, seed=0, kernels=None) -> GpEstimator:
    """Fit one GP per feature column; prior mean is the column mean.

    ``kernels`` overrides the per-feature confounder kernels.
    """
    if data.n < 2:
        raise InvalidArgument("GP estimator needs at least 2 samples")
    if kernels is None:
        kernels = gp_feature_kernels(data, k, seed)
    if len(kernels) != data.m:
        raise InvalidArgument(f"{len(kernels)} kernels for {data.m} features")
    feats = []
    for i, kern in enumerate(kernels):
        x = data.features[:, i]
        gram = kern.amplitude * kern.base_gram(data.confounders, data.confounders)
        noise = np.maximum(kern.noise(data.confounders), GP_NOISE_FLOOR)
        gram[np.diag_indices_from(gram)] += noise
        chol = _cholesky_with_jitter(gram)
        m0 = float(x.mean())
        alpha = cho_solve((chol, True), x - m0)
        feats.append(_GpFeature(kern, m0, chol, alpha))
    return GpEstimator(data.confounders, data.confounder_schema, tuple(feats))


def gp_conditional(est: GpEstimator, y) -> tuple[np.ndarray, np.ndarray]:
    mean, var = est.moments([y])
    return mean[0], var[0]


# --------------------------------------------------------------------------
# Nadaraya-Watson sampler
# --------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class NwSampler:
    features: np.ndarray
    confounders: tuple
    kernel: ConfounderKernel

    @classmethod
    def from_dataset(cls, data: Dataset, kernel: ConfounderKernel | None = None, seed=0) -> "NwSampler":
        if kernel is None:
            # no noise term: it would single out exact matches of the query
            kernel = fit_confounder_kernel(data.confounders, data.confounder_schema, None, 1, seed)
        return cls(data.features, data.confounders, kernel)

    def weight_matrix(self, values, warn: bool = True) -> np.ndarray:
        """Normalized weights, one row per query value."""
        values = [validate_value(v, self.kernel.schema) for v in values]
        raw = self.kernel.gram(values, self.confounders)
        for n, v in enumerate(values):
            hit = [i for i, c in enumerate(self.confounders) if c == v]
            if hit:
                raw[n, hit] += self.kernel.noise([v])[0]
        if warn and np.any(raw.max(axis=1) < DEGENERATE_KERNEL_LEVEL):
            warnings.warn("confounder query has no kernel support in this dataset", DegenerateWeights,
                          stacklevel=3)
        return raw / raw.sum(axis=1, keepdims=True)


def nw_weights(sampler: NwSampler, y) -> np.ndarray:
    return sampler.weight_matrix([y])[0]


def nw_sample(sampler: NwSampler, y, n: int, seed=0, weights=None) -> np.ndarray:
    """Draw ``n`` rows with replacement, row ``i`` with probability ``w_i``.

    ``seed`` may be an int or a ``numpy.random.Generator``.
    """
    if n < 1:
        raise InvalidArgument("n must be at least 1")
    rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
    w = nw_weights(sampler, y) if weights is None else weights
    idx = rng.choice(len(w), size=n, replace=True, p=w)
    return sampler.features[idx]
