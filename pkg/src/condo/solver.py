"""Method dispatch and training loops."""

from __future__ import annotations

import dataclasses
import logging
import time
import warnings
from dataclasses import dataclass

import numpy as np

from .core import (
    CATEGORICAL,
    FULL_AFFINE,
    KL_METHODS,
    LOCATION_SCALE,
    AffineMap,
    Dataset,
    DegenerateWeights,
    FitConfig,
    FitReport,
    InvalidArgument,
    NonConvergence,
    NumericalError,
    SingularMatrix,
    validate_pair,
)
from .estimators import ConfounderPrior, NwSampler, build_prior, fit_gp, fit_linear_gaussian
from .kernels import RbfKernel, dynamic_bandwidth
from .objectives import (
    KlProblem,
    forward_kl_objective,
    mmd_batch_objective,
    reverse_kl_1d_closed_form,
    reverse_kl_objective,
)

log = logging.getLogger(__name__)

_MAX_HALVINGS = 40


@dataclass
class MomentumState:
    velocity_a: np.ndarray
    velocity_b: np.ndarray
    iteration: int = 0

    @classmethod
    def zeros(cls, m: int) -> "MomentumState":
        return cls(np.zeros((m, m)), np.zeros(m))


# --------------------------------------------------------------------------
# Gaussian optimal transport
# --------------------------------------------------------------------------


def _sym_sqrt(cov: np.ndarray, floor: float, inverse: bool = False) -> np.ndarray:
    vals, vecs = np.linalg.eigh(0.5 * (cov + cov.T))
    if vals[-1] <= 0:
        raise SingularMatrix("covariance is not positive definite")
    vals = np.maximum(vals, floor)
    root = np.sqrt(vals)
    if inverse:
        root = 1.0 / root
    return (vecs * root) @ vecs.T


def gaussian_ot_map(mu_q, cov_q, mu_p, cov_p, floor: float = 1e-12) -> tuple[np.ndarray, np.ndarray]:
    """Linear OT map from ``N(mu_q, cov_q)`` to ``N(mu_p, cov_p)``.

    Matrix square roots come from symmetric eigendecompositions with
    eigenvalues floored at ``floor``.
    """
    mu_q = np.asarray(mu_q, dtype=float).reshape(-1)
    mu_p = np.asarray(mu_p, dtype=float).reshape(-1)
    cov_q = np.atleast_2d(np.asarray(cov_q, dtype=float))
    cov_p = np.atleast_2d(np.asarray(cov_p, dtype=float))
    q_half = _sym_sqrt(cov_q, floor)
    q_neg_half = _sym_sqrt(cov_q, floor, inverse=True)
    middle = _sym_sqrt(q_half @ cov_p @ q_half, floor)
    a = q_neg_half @ middle @ q_neg_half
    a = 0.5 * (a + a.T)
    return a, mu_p - a @ mu_q


def fit_gaussian_ot(source: Dataset, target: Dataset, config: FitConfig | None = None) -> FitReport:
    """Closed-form Gaussian OT map from source moments to target moments."""
    config = config or FitConfig(method="gaussian_ot", transform_kind=FULL_AFFINE)
    validate_pair(source, target)
    start = time.perf_counter()
    xs, xt = source.features, target.features
    mu_q, mu_p = xs.mean(axis=0), xt.mean(axis=0)
    if config.transform_kind == LOCATION_SCALE:
        sd_q, sd_p = xs.std(axis=0, ddof=1 if source.n > 1 else 0), xt.std(axis=0, ddof=1 if target.n > 1 else 0)
        if np.any(sd_q <= 0):
            raise SingularMatrix("source feature has zero variance")
        scale = sd_p / sd_q
        a, b = np.diag(scale), mu_p - scale * mu_q
    else:
        cov_q = np.cov(xs, rowvar=False, ddof=1 if source.n > 1 else 0).reshape(source.m, source.m)
        cov_p = np.cov(xt, rowvar=False, ddof=1 if target.n > 1 else 0).reshape(target.m, target.m)
        a, b = gaussian_ot_map(mu_q, cov_q, mu_p, cov_p, floor=max(config.ridge, 1e-300))
    g = AffineMap(a, b, config.transform_kind)
    return _report(g, (), float("nan"), config, start, source)


# --------------------------------------------------------------------------
# KL objectives
# --------------------------------------------------------------------------


def build_kl_problem(source: Dataset, target: Dataset, config: FitConfig,
                     prior: ConfounderPrior | None = None) -> KlProblem:
    """Fit the per-domain estimators and cache their moments at the prior points."""
    validate_pair(source, target)
    prior = prior or build_prior(source, target, config.dedup)
    values = list(prior.values)
    if config.method == "condo_gp_reverse_kl":
        ests = [fit_gp(d, config.prototypes_k, config.seed) for d in (source, target)]
        (mu_s, var_s), (mu_t, var_t) = (e.moments(values) for e in ests)
        return KlProblem(mu_s, mu_t, var_s, var_t, prior.weights, prior.n_points, diagonal=True)
    est_s = fit_linear_gaussian(source, config.ridge)
    est_t = fit_linear_gaussian(target, config.ridge)
    return KlProblem(est_s.means(values), est_t.means(values), est_s.covariance, est_t.covariance,
                     prior.weights, prior.n_points)


def closed_form_location_scale(problem: KlProblem) -> AffineMap:
    """Per-feature exact reverse-KL solution on the diagonal problem."""
    p = problem.to_diagonal()
    scale, offset = np.empty(p.m), np.empty(p.m)
    for i in range(p.m):
        scale[i], offset[i] = reverse_kl_1d_closed_form(
            p.means_source[:, i], p.cov_source[:, i], p.means_target[:, i], p.cov_target[:, i], p.weights
        )
    return AffineMap(np.diag(scale), offset, LOCATION_SCALE)


def _kl_preconditioner(p: KlProblem):
    """Shifts and per-feature scales that make the KL landscape well conditioned.

    Source is standardized by its marginal spread over the prior, target by
    its average conditional spread.
    """
    w = p.weights
    c_s = w @ p.means_source
    c_t = w @ p.means_target
    spread_s = w @ (p.means_source - c_s) ** 2
    if p.diagonal:
        var_s = w @ p.cov_source + spread_s
        var_t = w @ p.cov_target
    else:
        var_s = np.diag(p.cov_source) + spread_s
        var_t = np.diag(p.cov_target).copy()
    d_s = np.where(var_s > 0, np.sqrt(var_s), 1.0)
    d_t = np.where(var_t > 0, np.sqrt(var_t), 1.0)
    return c_s, d_s, c_t, d_t


def _standardize_problem(p: KlProblem, c_s, d_s, c_t, d_t) -> KlProblem:
    ms = (p.means_source - c_s) / d_s
    mt = (p.means_target - c_t) / d_t
    if p.diagonal:
        cs, ct = p.cov_source / d_s**2, p.cov_target / d_t**2
    else:
        cs = p.cov_source / np.outer(d_s, d_s)
        ct = p.cov_target / np.outer(d_t, d_t)
    return KlProblem(ms, mt, cs, ct, p.weights, p.n_points, p.diagonal)


def _to_inner(g: AffineMap, c_s, d_s, c_t, d_t) -> tuple[np.ndarray, np.ndarray]:
    a = g.matrix_a * d_s[None, :] / d_t[:, None]
    b = (g.matrix_a @ c_s + g.offset_b - c_t) / d_t
    return a, b


def _to_outer(a_in, b_in, c_s, d_s, c_t, d_t, kind) -> AffineMap:
    a = a_in * d_t[:, None] / d_s[None, :]
    b = d_t * b_in + c_t - a @ c_s
    if kind == LOCATION_SCALE:
        a = np.diag(np.diag(a))
    return AffineMap(a, b, kind)


def optimize_kl(problem: KlProblem, objective, kind: str, config: FitConfig,
                on_iterate=None) -> tuple[AffineMap, tuple]:
    """Full-batch gradient descent with momentum from the identity map.

    Runs in standardized coordinates (a fixed affine change of variables per
    domain, which shifts the objective by a constant). A step that would
    raise the objective, or leave the domain ``det(A) > 0``, resets the
    velocity and falls back to a halving plain-gradient step, so the trace
    never increases beyond float rounding of the objective.
    """
    if problem.diagonal and kind != LOCATION_SCALE:
        raise InvalidArgument("per-point variance problems only admit location-scale maps")
    m = problem.m
    c_s, d_s, c_t, d_t = _kl_preconditioner(problem)
    inner = _standardize_problem(problem, c_s, d_s, c_t, d_t)
    mask = np.eye(m) if kind == LOCATION_SCALE else np.ones((m, m))
    lr, beta = config.lr, config.momentum
    scale = 1.0 / problem.n_points  # step on the per-point average objective

    def evaluate(a, b):
        try:
            return objective(inner, AffineMap(a * mask, b))
        except NumericalError:
            return np.inf, None, None

    ident = AffineMap.identity(m, kind)
    a, b = _to_inner(ident, c_s, d_s, c_t, d_t)
    f, ga, gb = evaluate(a, b)
    if not np.isfinite(f):
        raise NumericalError("objective is not finite at the identity map")
    offset = objective(problem, ident)[0] - f
    # objective differences below this are rounding noise; inside it a step
    # counts as progress only if it shrinks the gradient
    noise = 1e-12 * max(abs(f), problem.n_points)

    def gnorm(ga_, gb_):
        return float(np.sum((ga_ * mask) ** 2) + np.sum(gb_**2))

    def improves(f_new, ga_new, gb_new):
        if f_new <= f:
            return True
        return f_new <= f + noise and gnorm(ga_new, gb_new) < gnorm(ga, gb)

    state = MomentumState.zeros(m)
    trace = []
    for it in range(config.iterations):
        state.velocity_a = beta * state.velocity_a - lr * scale * ga * mask
        state.velocity_b = beta * state.velocity_b - lr * scale * gb
        a_new, b_new = a + state.velocity_a, b + state.velocity_b
        f_new, ga_new, gb_new = evaluate(a_new, b_new)
        if not improves(f_new, ga_new, gb_new):
            accepted = False
            step = lr * scale
            resolution = 1e-13 * (1.0 + max(np.abs(a).max(), np.abs(b).max()))
            g_max = max(np.abs(ga * mask).max(), np.abs(gb).max())
            for _ in range(_MAX_HALVINGS):
                if step * g_max <= resolution:
                    break
                a_new, b_new = a - step * ga * mask, b - step * gb
                f_new, ga_new, gb_new = evaluate(a_new, b_new)
                if improves(f_new, ga_new, gb_new):
                    accepted = True
                    break
                step *= 0.5
            if not accepted:
                # converged: no step above the float resolution of (A, b)
                # makes progress, so the remaining iterates stay put
                for k in range(it, config.iterations):
                    trace.append((k + 1, f + offset))
                    if on_iterate is not None:
                        on_iterate(_to_outer(a * mask, b, c_s, d_s, c_t, d_t, kind))
                state.iteration = config.iterations
                break
            state.velocity_a, state.velocity_b = a_new - a, b_new - b
        a, b, f, ga, gb = a_new, b_new, f_new, ga_new, gb_new
        state.iteration = it + 1
        trace.append((it + 1, f + offset))
        if on_iterate is not None:
            on_iterate(_to_outer(a * mask, b, c_s, d_s, c_t, d_t, kind))

    if len(trace) > 10:
        before, last = trace[-11][1], trace[-1][1]
        if before - last > 1e-3 * max(abs(last), 1e-12):
            warnings.warn(f"KL descent still improving after {config.iterations} iterations",
                          NonConvergence, stacklevel=3)
    return _to_outer(a * mask, b, c_s, d_s, c_t, d_t, kind), tuple(trace)


def fit_condo_kl(source: Dataset, target: Dataset, config: FitConfig,
                 closed_form: bool = True, on_iterate=None) -> FitReport:
    """ConDo with a KL divergence and a linear-Gaussian or GP conditional estimator.

    ``location_scale`` reverse-KL fits use the exact per-feature solution
    unless ``closed_form=False``.
    """
    if config.method not in KL_METHODS:
        raise InvalidArgument(f"{config.method!r} is not a KL method")
    start = time.perf_counter()
    problem = build_kl_problem(source, target, config)
    kind = config.transform_kind
    if kind == LOCATION_SCALE:
        problem = problem.to_diagonal()
    objective = forward_kl_objective if config.method == "condo_linear_forward_kl" else reverse_kl_objective
    if objective is reverse_kl_objective and kind == LOCATION_SCALE and closed_form:
        g, trace = closed_form_location_scale(problem), ()
    else:
        g, trace = optimize_kl(problem, objective, kind, config, on_iterate)
    final = objective(problem, g)[0]
    return _report(g, trace, final, config, start, source)


# --------------------------------------------------------------------------
# MMD
# --------------------------------------------------------------------------


def fit_condo_mmd(source: Dataset, target: Dataset, config: FitConfig, on_batch=None) -> FitReport:
    """Stochastic conditional-MMD descent with momentum and per-batch bandwidth.

    Each iteration draws one confounder value from the prior, a batch of
    conditional samples from each domain, recomputes the bandwidth and
    takes one momentum step. Features are standardized per domain first;
    the identity initial map is expressed in those coordinates.

    ``on_batch(iteration, target_batch, source_batch, inner_map, bandwidth)``
    receives every batch in standardized coordinates.
    """
    validate_pair(source, target)
    start = time.perf_counter()
    rng = np.random.default_rng(config.seed)
    prior = build_prior(source, target, config.dedup)
    values = list(prior.values)
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", DegenerateWeights)
        w_s = NwSampler.from_dataset(source, seed=config.seed).weight_matrix(values)
        w_t = NwSampler.from_dataset(target, seed=config.seed).weight_matrix(values)
    if caught:
        warnings.warn(f"{len(caught)} prior values lack kernel support in one domain",
                      DegenerateWeights, stacklevel=2)

    c_s, d_s = source.features.mean(axis=0), source.features.std(axis=0)
    c_t, d_t = target.features.mean(axis=0), target.features.std(axis=0)
    d_s = np.where(d_s > 0, d_s, 1.0)
    d_t = np.where(d_t > 0, d_t, 1.0)
    zs = (source.features - c_s) / d_s
    zt = (target.features - c_t) / d_t

    m, kind = source.m, config.transform_kind
    mask = np.eye(m) if kind == LOCATION_SCALE else np.ones((m, m))
    a, b = _to_inner(AffineMap.identity(m, kind), c_s, d_s, c_t, d_t)
    state = MomentumState.zeros(m)
    lr, beta, nb = config.lr, config.momentum, config.batch_size
    trace = []
    for it in range(config.iterations):
        j = rng.choice(len(values), p=prior.weights)
        bt = zt[rng.choice(target.n, size=nb, p=w_t[j])]
        bs = zs[rng.choice(source.n, size=nb, p=w_s[j])]
        g_in = AffineMap(a * mask, b)
        bw = dynamic_bandwidth(bt, bs, g_in, config.bandwidth_floor)
        value, ga, gb = mmd_batch_objective(bt, bs, g_in, RbfKernel(bw, config.bandwidth_floor))
        if on_batch is not None:
            on_batch(it, bt, bs, g_in, bw)
        state.velocity_a = beta * state.velocity_a - lr * ga * mask
        state.velocity_b = beta * state.velocity_b - lr * gb
        a, b = a + state.velocity_a, b + state.velocity_b
        state.iteration = it + 1
        trace.append((it + 1, value))
    g = _to_outer(a * mask, b, c_s, d_s, c_t, d_t, kind)
    final = float(np.mean([v for _, v in trace[-10:]])) if trace else float("nan")
    return _report(g, tuple(trace), final, config, start, source)


def constant_confounder(data: Dataset) -> Dataset:
    """Same features, one shared categorical confounder value for every row."""
    return data.with_confounders([("all",)] * data.n, [("constant", CATEGORICAL)])


def fit_plain_mmd(source: Dataset, target: Dataset, config: FitConfig, on_batch=None) -> FitReport:
    """Confounder-unaware MMD: conditional MMD on a constant confounder."""
    validate_pair(source, target)
    report = fit_condo_mmd(constant_confounder(source), constant_confounder(target), config, on_batch)
    return dataclasses.replace(report, confounder_schema=source.confounder_schema)


# --------------------------------------------------------------------------
# Dispatch
# --------------------------------------------------------------------------


def fit(source: Dataset, target: Dataset, config: FitConfig) -> FitReport:
    validate_pair(source, target)
    log.info("fitting %s (%s), seed=%d", config.method, config.transform_kind, config.seed)
    if config.method == "gaussian_ot":
        report = fit_gaussian_ot(source, target, config)
    elif config.method == "mmd":
        report = fit_plain_mmd(source, target, config)
    elif config.method == "condo_mmd":
        report = fit_condo_mmd(source, target, config)
    else:
        report = fit_condo_kl(source, target, config)
    if report.objective_trace:
        first, last = report.objective_trace[0][1], report.objective_trace[-1][1]
        log.info("objective %.6g -> %.6g over %d iterations", first, last, len(report.objective_trace))
    return report


def _report(g, trace, final, config, start, source: Dataset) -> FitReport:
    return FitReport(
        transform=g,
        objective_trace=tuple(trace),
        final_objective=float(final),
        config=config,
        wall_time_seconds=time.perf_counter() - start,
        feature_names=source.feature_names,
        confounder_schema=source.confounder_schema,
    )
