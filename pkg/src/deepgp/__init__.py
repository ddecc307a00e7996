"""Deep Gaussian process hierarchies trained by collapsed variational inference."""

__version__ = "0.1.0"

from .kernels import ArdKernel, LinearKernel, SumKernel, gram, gram_gradients, jitter_cholesky
from .variational import (
    DiagonalGaussianField,
    PsiStatistics,
    entropy,
    kl_to_standard_normal,
    psi_gradients,
    psi_statistics,
)
from .bound import (
    BoundReport,
    DeepModel,
    GroupMapping,
    LayerState,
    bound_gradients,
    evidence_lower_bound,
    gp_log_marginal,
    leaf_term,
    mid_term,
)
from .training import OptimizerConfig, ParameterLayout, check_gradients, greedy_init, optimize
