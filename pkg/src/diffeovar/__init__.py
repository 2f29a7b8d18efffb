"""Diffeomorphic template matching with variance bounds on the volume form."""

from .grid import (
    CoordinateMap,
    GridMismatchError,
    GridSpec,
    ScalarField,
    VectorField,
    compose,
    divergence,
    gradient,
    identity_map,
    jacobian_determinant,
    jacobian_matrix,
    sample,
)
from .kernel import KernelOperator, inner_product, inner_product_scalar
from .flow import (
    DiffeomorphismError,
    FlowResult,
    GeodesicResult,
    VelocitySeries,
    conservation_residual,
    geodesic_shoot,
    integrate_flow,
    invert_displacement,
    invert_map,
)
from .match import (
    MatchConfig,
    MatchResult,
    NonFiniteCostError,
    NormalityDiagnostic,
    NotDiffeomorphicError,
    lddmm_register,
    momentum_normality,
    smalldef_momentum_residual,
    smalldef_register,
    symmetric_register,
)

__version__ = "0.1.0"

__all__ = [
    "CoordinateMap",
    "DiffeomorphismError",
    "FlowResult",
    "GeodesicResult",
    "GridMismatchError",
    "GridSpec",
    "KernelOperator",
    "MatchConfig",
    "MatchResult",
    "NonFiniteCostError",
    "NormalityDiagnostic",
    "NotDiffeomorphicError",
    "ScalarField",
    "VectorField",
    "VelocitySeries",
    "compose",
    "conservation_residual",
    "divergence",
    "geodesic_shoot",
    "gradient",
    "identity_map",
    "inner_product",
    "inner_product_scalar",
    "integrate_flow",
    "invert_displacement",
    "invert_map",
    "jacobian_determinant",
    "jacobian_matrix",
    "lddmm_register",
    "momentum_normality",
    "sample",
    "smalldef_momentum_residual",
    "smalldef_register",
    "symmetric_register",
]
