"""Solenoidal field partitions, flow solves, and shape search on class-C domains."""

from . import (
    cli,
    divfree_decomposition,
    domain_geometry,
    mesh_fields,
    nse_solver,
    shape_optimizer,
)
from .errors import (
    ConfigError,
    GeometryError,
    InvariantViolation,
    MeshQualityError,
    SolverDivergence,
)

__all__ = [
    "cli",
    "divfree_decomposition",
    "domain_geometry",
    "mesh_fields",
    "nse_solver",
    "shape_optimizer",
    "ConfigError",
    "GeometryError",
    "InvariantViolation",
    "MeshQualityError",
    "SolverDivergence",
]
