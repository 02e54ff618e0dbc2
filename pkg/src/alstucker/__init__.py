"""Dynamical low-rank approximation in the Tucker format without gauge conditions.

The time stepping fits tangent-space increments by alternating least
squares over the factor matrices, so the core unfolding Gram matrices are
never inverted.
"""

from .integrator import (
    IntegratorConfig,
    StepFailure,
    StepReport,
    als_euler_step,
    gauged_reference_step,
    improved_euler_step,
    step,
)
from .linalg import SingularGramError, economy_svd, orthonormal_polar_factor
from .problems import build_problem, relative_error
from .tucker import TuckerTensor, hooi, hosvd, recompress, tucker_hadamard, tucker_sum

__version__ = "0.1.0"

__all__ = [
    "IntegratorConfig",
    "SingularGramError",
    "StepFailure",
    "StepReport",
    "TuckerTensor",
    "als_euler_step",
    "build_problem",
    "economy_svd",
    "gauged_reference_step",
    "hooi",
    "hosvd",
    "improved_euler_step",
    "orthonormal_polar_factor",
    "recompress",
    "relative_error",
    "step",
    "tucker_hadamard",
    "tucker_sum",
]
