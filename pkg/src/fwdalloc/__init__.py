"""Forward-only training with optimal per-datum query allocation."""

__version__ = "0.1.0"

from .allocator import (
    Allocation,
    AllocatorOpts,
    AllocatorParams,
    BatchFeatures,
    build_covariance,
    build_mean,
    deterministic_optimal,
    mean_allocation,
    objective_J,
    optimize_allocator,
    sample_allocation,
    sample_bernoulli_allocation,
    theorem2_gap,
)
from .estimators import (
    EstimatorKind,
    GradientEstimate,
    TraceEstimates,
    default_kind,
    default_trace_subset,
    estimate_gradient,
    estimate_trace,
    sample_query,
)
from .linalg import cholesky, cosine_similarity, sample_mvn
from .models import (
    ModelSpec,
    NoiseSite,
    NumericalBlowupError,
    attention_block,
    embedding,
    forward,
    init_params,
    mlp,
    oracle_gradient,
    quadratic,
)
from .rng import RngStream
