"""Perturbation-based gradient samples and query-averaged estimates.

Three estimator families share the form "evaluate the loss under injected
noise, weight the noise by the outcome":

* ``spsa`` -- Gaussian parameter perturbation; a single evaluation yields
  the sample ``L(theta + sigma*u) * u / sigma``.
* ``spsa_antithetic`` -- paired evaluations at ``theta +- sigma*u``; the
  sample ``(L+ - L-) / (2*sigma) * u`` cancels odd-order terms and counts
  as two forward passes.
* ``lr_activation`` -- Gaussian noise on the pre-activation output of an
  affine site; the sample is the loss times the noise score, pushed onto
  that site's weights and bias through the local outer-product Jacobian
  (zero outside the perturbed site).

Sites can be perturbed one per query in a round-robin ("cycle") or all at
once ("joint"). Averages are formed per site block, so cycling stays
unbiased without rescaling. Per-coordinate sample variances over a
configured coordinate subset feed the trace estimates that drive query
allocation.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from . import models as m
from .rng import as_generator

FAMILIES = ("lr_activation", "spsa", "spsa_antithetic")


@dataclass(frozen=True)
class EstimatorKind:
    family: str
    sites: tuple
    site_mode: str = "cycle"

    def __post_init__(self):
        if self.family not in FAMILIES:
            raise ValueError(f"unknown estimator family {self.family!r}")
        if self.site_mode not in ("cycle", "joint"):
            raise ValueError(f"unknown site_mode {self.site_mode!r}")
        if not self.sites:
            raise ValueError("estimator needs at least one noise site")
        want = "pre_activation" if self.family == "lr_activation" else "parameters"
        for s in self.sites:
            if s.site != want:
                raise ValueError(f"{self.family} sites must be {want}")

    @property
    def min_queries(self) -> int:
        return 2 if self.family == "spsa_antithetic" else 1

    @property
    def queries_per_sample(self) -> int:
        return 2 if self.family == "spsa_antithetic" else 1


def default_kind(model: m.ModelSpec, family: str, sigma: float = 1e-2,
                 site_mode: Optional[str] = None) -> EstimatorKind:
    """Estimator with a full set of sites for the model.

    lr_activation cycles over every affine site; the spsa families default
    to a joint perturbation of all parameter groups (plain whole-vector
    perturbation).
    """
    if family == "lr_activation":
        n_sites = len(m.activation_site_dims(model))
        if n_sites == 0:
            raise ValueError(f"{model.kind} has no affine sites for activation noise")
        sites = tuple(m.NoiseSite(layer=i, site="pre_activation", sigma=sigma)
                      for i in range(n_sites))
        return EstimatorKind(family, sites, site_mode or "cycle")
    n_groups = len(m.param_groups(model))
    sites = tuple(m.NoiseSite(layer=i, site="parameters", sigma=sigma)
                  for i in range(n_groups))
    return EstimatorKind(family, sites, site_mode or "joint")


@dataclass
class GradientEstimate:
    """Query average of gradient samples plus bookkeeping for merging.

    ``num_queries`` counts forward passes (an antithetic pair is two).
    ``per_coord_variance`` is the unbiased sample variance of the
    per-query samples on ``subset`` coordinates, or None when fewer than
    two samples were available (or no subset was requested).
    """

    mean: np.ndarray
    per_coord_variance: Optional[np.ndarray]
    subset: Optional[np.ndarray]
    num_queries: int
    site_slices: tuple
    site_counts: tuple


@dataclass
class TraceEstimates:
    """Per-datum estimates of the total single-query gradient variance."""

    values: np.ndarray
    subset: np.ndarray
    n0: int

    def __post_init__(self):
        if np.any(self.values < 0):
            raise ValueError("trace estimates must be nonnegative")


def _site_block(model: m.ModelSpec, kind: EstimatorKind, idx: int) -> slice:
    return m.site_param_group(model, kind.sites[idx])


def _sample_site_matrix(kind: EstimatorKind, model: m.ModelSpec, theta, datum,
                        site_idx: int, n_samples: int, gen,
                        baseline: float = 0.0) -> tuple:
    """(samples (n, block_dim), block slice) for one site.

    Row i equals the i-th sequential single-query sample from the stream.
    ``baseline`` (typically the datum's clean loss) is subtracted from the
    single-evaluation outcomes before weighting; it is a control variate
    with zero expected score, so the mean is untouched while the variance
    drops by the squared loss level. The antithetic family cancels the
    level on its own and ignores it.
    """
    x, label = datum
    site = kind.sites[site_idx]
    sl = _site_block(model, kind, site_idx)
    dim_block = sl.stop - sl.start

    if kind.family == "lr_activation":
        site_dim = m.activation_site_dim(model, site.layer)
        u = gen.standard_normal((n_samples, site_dim))
        losses, local_input = m.forward_many_actnoise(
            model, theta, x, label, site.layer, site.sigma * u)
        weighted = ((losses - baseline)[:, None] / site.sigma) * u
        out = np.empty((n_samples, dim_block))
        m.lr_sample_to_params(model, site.layer, weighted, local_input, out)
        return out, sl

    u = gen.standard_normal((n_samples, dim_block))
    thetas = np.broadcast_to(theta, (n_samples, theta.shape[0])).copy()
    if kind.family == "spsa":
        thetas[:, sl] += site.sigma * u
        losses = m.forward_many_params(model, thetas, x, label)
        return ((losses - baseline)[:, None] / site.sigma) * u, sl
    thetas[:, sl] += site.sigma * u
    losses_plus = m.forward_many_params(model, thetas, x, label)
    thetas[:, sl] -= 2.0 * site.sigma * u
    losses_minus = m.forward_many_params(model, thetas, x, label)
    coeff = (losses_plus - losses_minus) / (2.0 * site.sigma)
    return coeff[:, None] * u, sl


def _joint_sample_matrices(kind: EstimatorKind, model: m.ModelSpec, theta, datum,
                           n_samples: int, gen, baseline: float = 0.0) -> list:
    """All sites perturbed simultaneously in each query."""
    x, label = datum
    if kind.family == "lr_activation":
        # Independent noise at each site; each site's samples use its own
        # score, evaluated under the jointly perturbed forward pass. Sites
        # are evaluated sequentially here (joint LR is a config variant).
        results = []
        for idx in range(len(kind.sites)):
            results.append(_sample_site_matrix(kind, model, theta, datum, idx,
                                               n_samples, gen, baseline))
        return results

    slices = [_site_block(model, kind, i) for i in range(len(kind.sites))]
    us = [gen.standard_normal((n_samples, sl.stop - sl.start)) for sl in slices]
    thetas = np.broadcast_to(theta, (n_samples, theta.shape[0])).copy()
    for site, sl, u in zip(kind.sites, slices, us):
        thetas[:, sl] += site.sigma * u
    if kind.family == "spsa":
        losses = m.forward_many_params(model, thetas, x, label) - baseline
        return [((losses[:, None] / site.sigma) * u, sl)
                for site, sl, u in zip(kind.sites, slices, us)]
    losses_plus = m.forward_many_params(model, thetas, x, label)
    for site, sl, u in zip(kind.sites, slices, us):
        thetas[:, sl] -= 2.0 * site.sigma * u
    losses_minus = m.forward_many_params(model, thetas, x, label)
    return [(((losses_plus - losses_minus) / (2.0 * site.sigma))[:, None] * u, sl)
            for site, sl, u in zip(kind.sites, slices, us)]


def sample_query(kind: EstimatorKind, model: m.ModelSpec, theta: np.ndarray,
                 datum, rng, site_index: int = 0,
                 baseline: float = 0.0) -> np.ndarray:
    """One gradient sample G as a full-length parameter vector.

    For the antithetic family this consumes two forward evaluations.
    ``site_index`` selects the perturbed site in cycle mode; joint mode
    perturbs every site at once.
    """
    theta = np.asarray(theta, dtype=np.float64)
    if not np.all(np.isfinite(theta)):
        raise ValueError("theta must be finite")
    gen = as_generator(rng)
    g = np.zeros_like(theta)
    if kind.site_mode == "joint":
        for samples, sl in _joint_sample_matrices(kind, model, theta, datum, 1,
                                                  gen, baseline):
            g[sl] = samples[0]
    else:
        samples, sl = _sample_site_matrix(kind, model, theta, datum,
                                          site_index % len(kind.sites), 1, gen,
                                          baseline)
        g[sl] = samples[0]
    return g


def estimate_gradient(kind: EstimatorKind, model: m.ModelSpec, theta: np.ndarray,
                      datum, num_queries: int, rng,
                      subset: Optional[np.ndarray] = None,
                      baseline: float = 0.0) -> GradientEstimate:
    """Average ``num_queries`` forward passes worth of gradient samples.

    In cycle mode queries are spread round-robin over sites and each site
    block is averaged over its own samples, which keeps the assembled mean
    unbiased. Variances (for trace estimation) are tracked on ``subset``
    coordinates when given; they need at least two samples per involved
    site, otherwise the estimate is flagged unavailable (None).

    ``baseline`` should be the datum's clean loss when available (the
    trainer always has it); the single-evaluation families subtract it as
    a control variate.
    """
    theta = np.asarray(theta, dtype=np.float64)
    per = kind.queries_per_sample
    if num_queries < kind.min_queries:
        raise ValueError(f"{kind.family} needs at least {kind.min_queries} queries")
    if num_queries % per != 0:
        raise ValueError(f"{kind.family} consumes queries in multiples of {per}")
    n_samples = num_queries // per
    gen = as_generator(rng)

    n_sites = len(kind.sites)
    if kind.site_mode == "joint":
        mats = _joint_sample_matrices(kind, model, theta, datum, n_samples, gen,
                                      baseline)
        site_counts = tuple(n_samples for _ in range(n_sites))
    else:
        counts = [n_samples // n_sites + (1 if i < n_samples % n_sites else 0)
                  for i in range(n_sites)]
        mats = []
        for idx, c in enumerate(counts):
            sl = _site_block(model, kind, idx)
            if c == 0:
                mats.append((np.zeros((0, sl.stop - sl.start)), sl))
            else:
                mats.append(_sample_site_matrix(kind, model, theta, datum, idx,
                                                c, gen, baseline))
        site_counts = tuple(counts)

    mean = np.zeros_like(theta)
    for (samples, sl), c in zip(mats, site_counts):
        if c > 0:
            mean[sl] = samples.mean(axis=0)

    variance = None
    if subset is not None:
        subset = np.asarray(subset, dtype=np.intp)
        variance = np.zeros(subset.shape[0])
        ok = True
        for (samples, sl), c in zip(mats, site_counts):
            inside = (subset >= sl.start) & (subset < sl.stop)
            if not np.any(inside):
                continue
            if c < 2:
                ok = False
                break
            local = subset[inside] - sl.start
            variance[inside] = samples[:, local].var(axis=0, ddof=1)
        if not ok:
            variance = None

    return GradientEstimate(
        mean=mean,
        per_coord_variance=variance,
        subset=subset,
        num_queries=num_queries,
        site_slices=tuple(sl for _, sl in mats),
        site_counts=site_counts,
    )


def merge_estimates(first: GradientEstimate, second: GradientEstimate) -> GradientEstimate:
    """Pool two estimates of the same quantity (count-weighted means).

    Used to fold the initial trace-estimation queries back into the final
    per-datum average so that no budget is wasted. The merged variance is
    not tracked (the merged estimate is only consumed for its mean).
    """
    if first.site_slices != second.site_slices:
        raise ValueError("estimates have different site structure")
    mean = np.zeros_like(first.mean)
    counts = []
    for sl, ca, cb in zip(first.site_slices, first.site_counts, second.site_counts):
        tot = ca + cb
        counts.append(tot)
        if tot > 0:
            mean[sl] = (ca * first.mean[sl] + cb * second.mean[sl]) / tot
    return GradientEstimate(
        mean=mean,
        per_coord_variance=None,
        subset=first.subset,
        num_queries=first.num_queries + second.num_queries,
        site_slices=first.site_slices,
        site_counts=tuple(counts),
    )


def estimate_from_samples(samples: np.ndarray,
                          subset: Optional[np.ndarray] = None) -> GradientEstimate:
    """Build an estimate directly from a (Q, d) matrix of samples."""
    samples = np.asarray(samples, dtype=np.float64)
    q, d = samples.shape
    if subset is None:
        subset = np.arange(d)
    subset = np.asarray(subset, dtype=np.intp)
    variance = samples[:, subset].var(axis=0, ddof=1) if q >= 2 else None
    return GradientEstimate(
        mean=samples.mean(axis=0),
        per_coord_variance=variance,
        subset=subset,
        num_queries=q,
        site_slices=(slice(0, d),),
        site_counts=(q,),
    )


def estimate_trace(est: GradientEstimate, scale: float = 1.0) -> float:
    """Summed per-coordinate sample variance over the subset, times an
    optional subset-to-full extrapolation factor.

    Traces enter the allocator only through ratios across data points, so
    the default factor of 1.0 is what normal use wants.
    """
    if est.per_coord_variance is None:
        raise ValueError("per-coordinate variance unavailable (need >= 2 samples per site)")
    return float(est.per_coord_variance.sum() * scale)


def default_trace_subset(model: m.ModelSpec, cap: int = 512) -> np.ndarray:
    """Coordinates tracked for trace estimation: the deepest affine layers
    (last hidden plus the head), capped by an even thinning."""
    groups = m.param_groups(model)
    names = list(groups.keys())
    if model.kind == "mlp":
        pick = names[-2:] if len(names) >= 2 else names
    elif model.kind == "attention_block":
        pick = ["ffn", "head"]
    else:
        pick = names
    idx = np.concatenate([np.arange(groups[n].start, groups[n].stop) for n in pick])
    if idx.shape[0] > cap:
        idx = idx[np.linspace(0, idx.shape[0] - 1, cap).astype(np.intp)]
    return idx
