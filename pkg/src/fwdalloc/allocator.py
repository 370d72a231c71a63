"""Query-budget allocation across the data points of a mini-batch.

A batch of B data points shares a fixed per-step budget of A0 = mean_budget
* B forward passes. An allocator is a distribution over per-datum query
counts. The quantity being minimized is the summed per-datum variance of
the query-averaged gradient estimate,

    J(A) = sum_j trace_j / A_j,

where trace_j estimates the total variance of a single-query gradient
sample at datum j. Lower J means a less noisy batch gradient at equal
cost.

Implemented allocators:

* equal -- every datum gets the same count (the baseline).
* bernoulli -- each datum is independently pruned to half its share with
  probability p; freed budget is redistributed equally over the rest.
* gaussian -- a correlated multivariate normal over relative allocations,
  reparameterized down to four scalars: mean ``mu_j = beta0 + beta1*phi_j``
  (phi is the squashed clean loss) and an RBF covariance
  ``sigma^2 * exp(-d_ij / (2*gamma^2))`` over embedding distances
  ``d_ij = 1 - cos(e_i, e_j)``. The four parameters are fitted per step by
  stochastic gradient descent on J using the score-function identity.
* deterministic optimum -- the closed form A_j proportional to
  sqrt(trace_j), the exact minimizer of J under the budget constraint;
  also the yardstick the improvement gap is measured against.

Sampled allocations are clamped at zero, renormalized to the budget, and
realized as integers by largest-remainder rounding, so every allocation
conserves the budget exactly.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
from scipy.linalg import cho_solve, solve_triangular

from .linalg import NotPositiveDefiniteError, chol_logdet, cholesky, cosine_matrix
from .rng import as_generator

logger = logging.getLogger(__name__)

LN_2PI = float(np.log(2.0 * np.pi))


@dataclass(frozen=True)
class AllocatorParams:
    """The four reparameterized allocator variables.

    beta0/beta1 are in query units; sigma and gamma are kept as logs so
    positivity is structural.
    """

    beta0: float
    beta1: float
    log_sigma: float
    log_gamma: float

    @property
    def sigma(self) -> float:
        return float(np.exp(self.log_sigma))

    @property
    def gamma(self) -> float:
        return float(np.exp(self.log_gamma))

    @staticmethod
    def initial(mean_budget: float) -> "AllocatorParams":
        """Standard starting point: beta0 = mean budget, beta1 = half of
        it, sigma a fifth of it, gamma 1."""
        return AllocatorParams(
            beta0=float(mean_budget),
            beta1=float(mean_budget) / 2.0,
            log_sigma=float(np.log(mean_budget / 5.0)),
            log_gamma=0.0,
        )


@dataclass
class BatchFeatures:
    """Per-batch allocator inputs: squashed clean losses and embeddings."""

    phi: np.ndarray
    embeddings: np.ndarray
    mean_budget: int
    distances: np.ndarray = field(init=False)

    def __post_init__(self):
        self.phi = np.asarray(self.phi, dtype=np.float64)
        self.embeddings = np.asarray(self.embeddings, dtype=np.float64)
        if self.phi.ndim != 1 or self.embeddings.ndim != 2 \
                or self.embeddings.shape[0] != self.phi.shape[0]:
            raise ValueError("phi must be (B,), embeddings (B, dim)")
        if np.any(np.abs(self.phi) > 1.0 + 1e-12):
            raise ValueError("phi entries must lie in [-1, 1]")
        if self.mean_budget < 1:
            raise ValueError("mean budget must be >= 1")
        self.distances = 1.0 - cosine_matrix(self.embeddings)

    @property
    def batch_size(self) -> int:
        return self.phi.shape[0]

    @property
    def total_budget(self) -> int:
        return int(self.mean_budget) * self.batch_size


@dataclass
class Allocation:
    """A raw real-valued allocation sample and its integer realization."""

    raw: np.ndarray
    counts: np.ndarray
    fallback_equal: bool = False


@dataclass
class AllocatorOpts:
    """Inner optimization knobs for the gaussian allocator."""

    lr: float = 0.05
    max_iters: int = 50
    num_samples: int = 16
    tol: float = 1e-3
    min_iters: int = 5
    eps: float = 0.5
    jitter_scale: float = 1e-6


def build_mean(phi: np.ndarray, beta0: float, beta1: float) -> np.ndarray:
    """Linear mean over the squashed clean loss."""
    return beta0 + beta1 * np.asarray(phi, dtype=np.float64)


def kernel_from_distances(distances: np.ndarray, sigma: float, gamma: float,
                          jitter_scale: float = 1e-6):
    """RBF covariance over precomputed distances; returns (cov, chol).

    The diagonal receives sigma^2 * jitter_scale, doubled up to three times
    if factorization fails; after that the error is fatal.
    """
    if sigma <= 0 or gamma <= 0:
        raise ValueError("sigma and gamma must be positive")
    base = sigma * sigma * np.exp(-distances / (2.0 * gamma * gamma))
    base = 0.5 * (base + base.T)
    jitter = jitter_scale * sigma * sigma
    last_err = None
    for _ in range(4):
        cov = base + jitter * np.eye(base.shape[0])
        try:
            return cov, cholesky(cov)
        except NotPositiveDefiniteError as err:
            last_err = err
            jitter *= 2.0
    raise RuntimeError(
        f"allocator covariance stayed non-positive-definite after jitter escalation"
    ) from last_err


def build_covariance(embeddings: np.ndarray, sigma: float, gamma: float,
                     jitter_scale: float = 1e-6):
    """RBF covariance over embedding cosine distances; returns (cov, chol)."""
    distances = 1.0 - cosine_matrix(np.asarray(embeddings, dtype=np.float64))
    return kernel_from_distances(distances, sigma, gamma, jitter_scale)


def realize_counts(weights: np.ndarray, total: int) -> np.ndarray:
    """Integerize nonnegative weights to counts summing exactly to total.

    Largest-remainder rounding; remainder ties go to the lower index.
    """
    weights = np.asarray(weights, dtype=np.float64)
    if np.any(weights < 0):
        raise ValueError("weights must be nonnegative")
    s = weights.sum()
    if s <= 0:
        raise ValueError("weights sum to zero")
    quota = total * weights / s
    base = np.floor(quota).astype(np.int64)
    short = int(total - base.sum())
    if short > 0:
        frac = quota - base
        order = np.lexsort((np.arange(weights.shape[0]), -frac))
        base[order[:short]] += 1
    return base


def sample_allocation(mu: np.ndarray, cov: np.ndarray, total: int, rng,
                      chol: Optional[np.ndarray] = None) -> Allocation:
    """Draw a relative allocation from N(mu, cov) and realize it.

    Negative components get zero queries; the rest share the budget in
    proportion. If the whole draw is nonpositive, falls back to an equal
    split (logged).
    """
    if chol is None:
        chol = cholesky(cov)
    gen = as_generator(rng)
    raw = mu + chol @ gen.standard_normal(mu.shape[0])
    clamped = np.maximum(raw, 0.0)
    if clamped.sum() <= 0.0:
        logger.warning("allocation draw was entirely nonpositive; using equal split")
        counts = realize_counts(np.ones_like(raw), total)
        return Allocation(raw=raw, counts=counts, fallback_equal=True)
    return Allocation(raw=raw, counts=realize_counts(clamped, total))


def sample_bernoulli_allocation(p: float, mean_budget: int, batch_size: int,
                                rng) -> Allocation:
    """Prune each datum to half its share with probability p; freed budget
    is split equally (largest remainder) over the unpruned data."""
    if not 0.0 <= p <= 1.0:
        raise ValueError("p must lie in [0, 1]")
    if mean_budget % 2 != 0:
        raise ValueError("bernoulli allocation needs an even per-datum budget")
    gen = as_generator(rng)
    pruned = gen.random(batch_size) < p
    counts = np.full(batch_size, mean_budget, dtype=np.int64)
    counts[pruned] = mean_budget // 2
    freed = (mean_budget // 2) * int(pruned.sum())
    receivers = np.flatnonzero(~pruned)
    if receivers.size == 0:
        receivers = np.arange(batch_size)
    counts[receivers] += freed // receivers.size
    leftover = freed % receivers.size
    if leftover:
        counts[receivers[:leftover]] += 1
    return Allocation(raw=counts.astype(np.float64), counts=counts)


def objective_J(allocation: np.ndarray, traces: np.ndarray, eps: float = 0.5) -> float:
    """sum_j traces_j / max(A_j, eps).

    The clamp keeps the value finite on raw Gaussian draws whose sampling
    rule maps nonpositive components to zero queries.
    """
    allocation = np.asarray(allocation, dtype=np.float64)
    traces = np.asarray(traces, dtype=np.float64)
    return float(np.sum(traces / np.maximum(allocation, eps)))


def log_density(raw: np.ndarray, mu: np.ndarray, chol: np.ndarray) -> float:
    """Multivariate normal log density via the Cholesky factor."""
    diff = raw - mu
    half = solve_triangular(chol, diff, lower=True)
    return float(-0.5 * (half @ half + chol_logdet(chol) + mu.shape[0] * LN_2PI))


def log_density_grad(raw: np.ndarray, mu: np.ndarray, cov: np.ndarray,
                     chol: np.ndarray, phi: np.ndarray, distances: np.ndarray,
                     sigma: float, gamma: float) -> np.ndarray:
    """Score of ln N(raw; mu, cov) in (beta0, beta1, log sigma, log gamma).

    Chains the Gaussian score through the mean structure (d mu = (1, phi))
    and the RBF kernel (d cov / d log sigma = 2 cov;
    d cov / d log gamma = cov * distances / gamma^2).
    """
    grads = score_matrix(raw[None, :], mu, cov, chol, phi, distances, sigma, gamma)
    return grads[0]


def score_matrix(raws: np.ndarray, mu: np.ndarray, cov: np.ndarray,
                 chol: np.ndarray, phi: np.ndarray, distances: np.ndarray,
                 sigma: float, gamma: float) -> np.ndarray:
    """Scores for K draws at once; returns (K, 4)."""
    b = mu.shape[0]
    diff = (raws - mu[None, :]).T                      # (B, K)
    alphas = cho_solve((chol, True), diff)             # Sigma^{-1}(A - mu)
    d_beta0 = alphas.sum(axis=0)
    d_beta1 = phi @ alphas
    cov_alphas = cov @ alphas
    d_log_sigma = np.einsum("bk,bk->k", alphas, cov_alphas) - b
    kernel_gamma = cov * distances / (gamma * gamma)
    quad_gamma = np.einsum("bk,bc,ck->k", alphas, kernel_gamma, alphas)
    trace_term = float(np.trace(cho_solve((chol, True), kernel_gamma)))
    d_log_gamma = 0.5 * (quad_gamma - trace_term)
    return np.stack([d_beta0, d_beta1, d_log_sigma, d_log_gamma], axis=1)


def allocator_grad(params: AllocatorParams, traces: np.ndarray,
                   features: BatchFeatures, num_samples: int, rng,
                   eps: float = 0.5, jitter_scale: float = 1e-6):
    """Score-function gradient estimate of J with respect to the four
    allocator parameters; returns (grad (4,), mean objective value).

    Each of the K draws contributes its objective value times its score; a
    leave-one-out mean baseline is subtracted from the objective weights,
    which reduces variance without biasing the expectation.
    """
    if num_samples < 1:
        raise ValueError("need at least one sample")
    traces = np.asarray(traces, dtype=np.float64)
    mu = build_mean(features.phi, params.beta0, params.beta1)
    cov, chol = kernel_from_distances(features.distances, params.sigma,
                                      params.gamma, jitter_scale)
    gen = as_generator(rng)
    raws = mu[None, :] + gen.standard_normal((num_samples, mu.shape[0])) @ chol.T
    values = np.sum(traces[None, :] / np.maximum(raws, eps), axis=1)
    if num_samples >= 2:
        baselines = (values.sum() - values) / (num_samples - 1)
    else:
        baselines = np.zeros(1)
    weights = values - baselines
    scores = score_matrix(raws, mu, cov, chol, features.phi,
                          features.distances, params.sigma, params.gamma)
    grad = (weights[:, None] * scores).mean(axis=0)
    return grad, float(values.mean())


def mean_allocation(params: AllocatorParams, features: BatchFeatures) -> np.ndarray:
    """Budget-scaled allocation at the distribution mean (no sampling)."""
    mu = build_mean(features.phi, params.beta0, params.beta1)
    pos = np.maximum(mu, 0.0)
    total = float(features.total_budget)
    if pos.sum() <= 0.0:
        return np.full(features.batch_size, total / features.batch_size)
    return total * pos / pos.sum()


def optimize_allocator(params_init: AllocatorParams, traces: np.ndarray,
                       features: BatchFeatures, opts: AllocatorOpts, rng):
    """Stochastic gradient descent on the four allocator parameters.

    beta0/beta1 step in units of the mean budget so one step size serves
    every budget. Stops early once a smoothed objective stops moving, keeps
    the iterate whose mean allocation scores best, and never returns
    something worse than the starting point (monotone safeguard). Returns
    (params, objective trace).
    """
    traces = np.asarray(traces, dtype=np.float64)
    history: list = []
    if opts.max_iters == 0 or np.all(traces == 0.0):
        return params_init, history

    scale = float(features.mean_budget)
    # Projection box in normalized coordinates; wide enough not to bind in
    # normal use, tight enough to keep the stochastic walk numerically sane.
    lo = np.array([-2.0, -3.0, np.log(scale / 500.0), np.log(1e-2)])
    hi = np.array([4.0, 3.0, np.log(scale * 5.0), np.log(1e2)])

    def to_vec(p: AllocatorParams) -> np.ndarray:
        return np.array([p.beta0 / scale, p.beta1 / scale, p.log_sigma, p.log_gamma])

    def to_params(v: np.ndarray) -> AllocatorParams:
        return AllocatorParams(beta0=v[0] * scale, beta1=v[1] * scale,
                               log_sigma=v[2], log_gamma=v[3])

    def mean_objective(p: AllocatorParams) -> float:
        return objective_J(mean_allocation(p, features), traces, opts.eps)

    vec = to_vec(params_init)
    init_score = mean_objective(params_init)
    best_params, best_score = params_init, init_score
    gen = as_generator(rng)
    smoothed = None
    for it in range(opts.max_iters):
        grad, value = allocator_grad(to_params(vec), traces, features,
                                     opts.num_samples, gen,
                                     eps=opts.eps, jitter_scale=opts.jitter_scale)
        if not (np.all(np.isfinite(grad)) and np.isfinite(value)):
            logger.warning("allocator optimization hit a non-finite value; keeping start")
            return params_init, history
        step = grad * np.array([scale, scale, 1.0, 1.0])
        vec = vec - opts.lr * step
        vec = np.minimum(np.maximum(vec, lo), hi)
        history.append(value)
        cand = to_params(vec)
        cand_score = mean_objective(cand)
        if cand_score < best_score:
            best_params, best_score = cand, cand_score
        prev = smoothed
        smoothed = value if smoothed is None else 0.8 * smoothed + 0.2 * value
        if prev is not None and it + 1 >= opts.min_iters:
            if abs(smoothed - prev) < opts.tol * max(abs(prev), 1e-12):
                break
    if best_score <= init_score + 1e-6:
        return best_params, history
    return params_init, history


def deterministic_optimal(traces: np.ndarray, total: float) -> np.ndarray:
    """Closed-form minimizer of J over a fixed budget: shares proportional
    to the square root of each trace. All-zero traces fall back to equal."""
    traces = np.asarray(traces, dtype=np.float64)
    if np.any(traces < 0):
        raise ValueError("traces must be nonnegative")
    roots = np.sqrt(traces)
    s = roots.sum()
    if s == 0.0:
        return np.full(traces.shape[0], total / traces.shape[0])
    return total * roots / s


def theorem2_gap(traces: np.ndarray, total: float) -> float:
    """J(equal) - J(optimal) for a fixed budget.

    Equals (B * sum(tr) - (sum sqrt(tr))^2) / A0, which is the pairwise
    form sum_{j<k} (sqrt(tr_j) - sqrt(tr_k))^2 / A0; zero exactly when all
    traces are equal.
    """
    traces = np.asarray(traces, dtype=np.float64)
    if np.any(traces < 0):
        raise ValueError("traces must be nonnegative")
    roots = np.sqrt(traces)
    gap = (traces.shape[0] * traces.sum() - roots.sum() ** 2) / float(total)
    return float(max(gap, 0.0))
