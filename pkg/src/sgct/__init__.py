"""Dimension-adaptive sparse-grid combination technique for lognormal diffusion problems.

The package couples a truncated Karhunen-Loève expansion of the log-diffusion,
P1 finite elements on uniform meshes of the unit square and tensor
Gauss-Hermite quadrature, and adapts all three resolutions at once.
"""
from .adaptive import CostModel, StoppingRule, cost, run
from .combination import EvalCache, MultiIndex, Problem, combination_coefficients, combine, increment
from .fem import GridFunction, MeshLevel, assemble_solve, l2_norm, prolong
from .qoi import QoISpec
from .quadrature import gauss_hermite, rule_for_level, tensor_nodes
from .random_field import CovarianceSpec, KLExpansion, compute_kl, covariance, eval_log_field

__version__ = "0.1.0"

__all__ = [
    "CostModel", "CovarianceSpec", "EvalCache", "GridFunction", "KLExpansion", "MeshLevel",
    "MultiIndex", "Problem", "QoISpec", "StoppingRule", "assemble_solve", "combination_coefficients",
    "combine", "compute_kl", "cost", "covariance", "eval_log_field", "gauss_hermite", "increment",
    "l2_norm", "prolong", "rule_for_level", "run", "tensor_nodes",
]
