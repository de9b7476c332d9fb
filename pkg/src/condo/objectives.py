"""Divergence objectives between adapted-source and target conditionals.

KL objectives work on cached conditional moments at every prior point
(:class:`KlProblem`). Values are on the scale of the unweighted sum over
``n_points`` prior samples, i.e. ``n_points * sum_n w_n f_n``, so uniform
weights reproduce the plain sum and merged duplicate values give exactly the
same objective.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import (
    AffineMap,
    DegenerateProblem,
    DimensionMismatch,
    InvalidArgument,
    NonPositiveDeterminant,
    SingularMatrix,
    apply_map,
)
from .kernels import RbfKernel, rbf_gram


@dataclass(frozen=True, eq=False)
class KlProblem:
    """Conditional moments of both domains at the prior points.

    With ``diagonal=False`` the covariances are shared ``M x M`` matrices
    (linear-Gaussian estimator); with ``diagonal=True`` they are per-point
    variances of shape ``N x M`` (independent per-feature estimators).
    """

    means_source: np.ndarray
    means_target: np.ndarray
    cov_source: np.ndarray
    cov_target: np.ndarray
    weights: np.ndarray
    n_points: int
    diagonal: bool = False

    def __post_init__(self):
        ms = np.atleast_2d(np.asarray(self.means_source, dtype=float))
        mt = np.atleast_2d(np.asarray(self.means_target, dtype=float))
        if ms.shape != mt.shape:
            raise DimensionMismatch(f"source means {ms.shape} vs target means {mt.shape}")
        n, m = ms.shape
        cs = np.asarray(self.cov_source, dtype=float)
        ct = np.asarray(self.cov_target, dtype=float)
        want = (n, m) if self.diagonal else (m, m)
        if cs.ndim < 2 and cs.size == want[0] * want[1]:
            cs = cs.reshape(want)
        if ct.ndim < 2 and ct.size == want[0] * want[1]:
            ct = ct.reshape(want)
        if cs.shape != want or ct.shape != want:
            raise DimensionMismatch(f"covariances must have shape {want}")
        if self.diagonal and (np.any(cs < 0) or np.any(ct < 0)):
            raise InvalidArgument("variances must be non-negative")
        w = np.asarray(self.weights, dtype=float).reshape(-1)
        if w.shape != (n,):
            raise DimensionMismatch(f"{w.shape[0]} weights for {n} prior points")
        if np.any(w < 0) or abs(w.sum() - 1) > 1e-9:
            raise InvalidArgument("weights must be non-negative and sum to 1")
        for name, val in [("means_source", ms), ("means_target", mt), ("cov_source", cs),
                          ("cov_target", ct), ("weights", w)]:
            object.__setattr__(self, name, val)

    @property
    def m(self) -> int:
        return self.means_source.shape[1]

    def to_diagonal(self) -> "KlProblem":
        """Drop cross-feature covariance; each feature becomes its own problem."""
        if self.diagonal:
            return self
        n = self.means_source.shape[0]
        return KlProblem(
            self.means_source, self.means_target,
            np.tile(np.diag(self.cov_source), (n, 1)), np.tile(np.diag(self.cov_target), (n, 1)),
            self.weights, self.n_points, diagonal=True,
        )


def _check_map(problem: KlProblem, g: AffineMap) -> tuple[np.ndarray, np.ndarray]:
    a, b = g.matrix_a, g.offset_b
    if g.m != problem.m:
        raise DimensionMismatch(f"map is {g.m}-dimensional, problem has {problem.m} features")
    if problem.diagonal:
        if np.any(a[~np.eye(g.m, dtype=bool)] != 0):
            raise InvalidArgument("per-point variance problems only admit location-scale maps")
        # features separate, so each scale carries its own barrier
        if np.any(np.diag(a) <= 0):
            raise NonPositiveDeterminant("location-scale entries must be positive")
    sign, logdet = np.linalg.slogdet(a)
    if sign <= 0:
        raise NonPositiveDeterminant(f"det(A) must be positive (sign {sign:+.0f})")
    return a, b


def _logdet(a):
    return np.linalg.slogdet(a)[1]


def reverse_kl_objective(problem: KlProblem, g: AffineMap):
    """Expected KL(adapted source || target) up to additive constants.

    Returns ``(value, grad_a, grad_b)``. The ``-2 log|A|`` term acts as a
    barrier that keeps ``det(A)`` positive.
    """
    a, b = _check_map(problem, g)
    w, scale = problem.weights, problem.n_points
    mu_s, mu_t = problem.means_source, problem.means_target
    r = mu_s @ a.T + b - mu_t  # N x M residuals of the adapted means

    if problem.diagonal:
        d = np.diag(a)
        s, t = problem.cov_source, problem.cov_target
        if np.any(t <= 0):
            raise SingularMatrix("target variances must be positive")
        f = -2 * np.log(d) + d**2 * s / t + r**2 / t
        value = scale * float(w @ f.sum(axis=1))
        ga = scale * (w @ (-2 / d + 2 * d * s / t + 2 * r * mu_s / t))
        gb = scale * (w @ (2 * r / t))
        return value, np.diag(ga), gb

    try:
        p_t = np.linalg.inv(problem.cov_target)
    except np.linalg.LinAlgError:
        raise SingularMatrix("target covariance is singular") from None
    sig_s = problem.cov_source
    pr = r @ p_t  # rows: P_T r_n
    value = scale * (-2 * _logdet(a) + np.trace(p_t @ a @ sig_s @ a.T) + float(w @ np.sum(pr * r, axis=1)))
    ga = scale * (-2 * np.linalg.inv(a).T + 2 * p_t @ a @ sig_s + 2 * (pr * w[:, None]).T @ mu_s)
    gb = scale * 2 * (w @ pr)
    return float(value), ga, gb


def forward_kl_objective(problem: KlProblem, g: AffineMap):
    """Expected KL(target || adapted source) up to additive constants."""
    a, b = _check_map(problem, g)
    w, scale = problem.weights, problem.n_points
    mu_s, mu_t = problem.means_source, problem.means_target
    r = mu_s @ a.T + b - mu_t

    if problem.diagonal:
        d = np.diag(a)
        s, t = problem.cov_source, problem.cov_target
        if np.any(s <= 0):
            raise SingularMatrix("source variances must be positive")
        v = d**2 * s  # adapted source variance
        f = 2 * np.log(d) + t / v + r**2 / v
        value = scale * float(w @ f.sum(axis=1))
        ga = scale * (w @ (2 / d - 2 * t / (d * v) + 2 * r * mu_s / v - 2 * r**2 / (d * v)))
        gb = scale * (w @ (2 * r / v))
        return value, np.diag(ga), gb

    c = a @ problem.cov_source @ a.T
    try:
        q = np.linalg.inv(c)
    except np.linalg.LinAlgError:
        raise SingularMatrix("A Sigma_S A^T is singular") from None
    sig_s, sig_t = problem.cov_source, problem.cov_target
    u = r @ q  # rows: C^{-1} r_n (C symmetric)
    value = scale * (2 * _logdet(a) + np.trace(q @ sig_t) + float(w @ np.sum(u * r, axis=1)))
    wmat = q @ sig_t @ q
    uu = (u * w[:, None]).T @ u
    ga = scale * (2 * np.linalg.inv(a).T - 2 * (wmat + uu) @ a @ sig_s + 2 * (u * w[:, None]).T @ mu_s)
    gb = scale * 2 * (w @ u)
    return float(value), ga, gb


def reverse_kl_1d_closed_form(mu_s, var_s, mu_t, var_t, weights=None) -> tuple[float, float]:
    """Exact minimizer ``(m, b)`` of the 1-D location-scale reverse-KL objective.

    Setting the derivative in ``b`` to zero gives ``b = mean_T - m mean_S``;
    substituting back leaves a quadratic in ``m`` whose positive root is
    returned. Each prior point enters with weight ``w_n / var_t[n]`` so the
    result is exact also when the target variance differs across points.
    Points with zero target variance dominate in the limit and are used alone.
    """
    mu_s, var_s, mu_t, var_t = (np.asarray(v, dtype=float).reshape(-1) for v in (mu_s, var_s, mu_t, var_t))
    n = mu_s.size
    if not (var_s.size == mu_t.size == var_t.size == n) or n == 0:
        raise DimensionMismatch("all inputs must have the same non-zero length")
    w = np.full(n, 1.0 / n) if weights is None else np.asarray(weights, dtype=float).reshape(-1)
    if w.size != n:
        raise DimensionMismatch(f"{w.size} weights for {n} points")

    zero = var_t <= 0
    if np.any(zero):
        u = np.where(zero, w, 0.0)
    else:
        u = w / var_t
    u = u / u.sum()
    bar_s = float(u @ mu_s)
    bar_t = float(u @ mu_t)
    ds = mu_s - bar_s
    qa = 2 * float(u @ var_s) + 2 * float(u @ ds**2)
    qb = 2 * float(u @ ((bar_t - mu_t) * ds))
    qc = 0.0 if np.any(zero) else -2 * float(u @ var_t)
    if qa <= 0:
        raise DegenerateProblem("leading coefficient vanishes: source variances and mean spread are zero")
    if qc == 0:
        m = -qb / qa
        if m <= 0:
            raise DegenerateProblem("no positive scale solves the stationarity condition")
    else:
        q = -0.5 * (qb + np.copysign(np.sqrt(qb * qb - 4 * qa * qc), qb))
        m = qc / q if qb >= 0 else q / qa
    return float(m), float(bar_t - m * bar_s)


def mmd_batch_objective(target_batch, source_batch, g: AffineMap, kernel: RbfKernel):
    """Biased (V-statistic) MMD^2 between a target batch and an adapted source batch.

    Gradients treat the kernel bandwidth as fixed. The target-target term
    is included in the value but contributes nothing to the gradient.
    """
    xt = np.atleast_2d(np.asarray(target_batch, dtype=float))
    xs = np.atleast_2d(np.asarray(source_batch, dtype=float))
    if xt.shape[1] != g.m or xs.shape[1] != g.m:
        raise DimensionMismatch("batch widths must match the map dimension")
    if kernel.bandwidths.size != g.m:
        raise DimensionMismatch("kernel bandwidths must match the map dimension")
    nt, ns = xt.shape[0], xs.shape[0]
    z = apply_map(g, xs)
    s2 = kernel.bandwidths**2
    k_tt = rbf_gram(kernel, xt, xt)
    k_tz = rbf_gram(kernel, xt, z)
    k_zz = rbf_gram(kernel, z, z)
    value = k_tt.mean() - 2 * k_tz.mean() + k_zz.mean()

    # d k(x, z) / dz = k(x, z) (x - z) / sigma^2
    cross = (k_tz.T @ xt - k_tz.sum(axis=0)[:, None] * z) / s2
    self_ = (k_zz @ z - k_zz.sum(axis=1)[:, None] * z) / s2
    grad_z = -2.0 / (nt * ns) * cross + 2.0 / (ns * ns) * self_
    return float(value), grad_z.T @ xs, grad_z.sum(axis=0)
