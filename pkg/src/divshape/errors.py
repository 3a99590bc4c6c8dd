"""Exception types shared across the package."""


class GeometryError(ValueError):
    """Raised when a domain description is inconsistent or degenerate."""


class MeshQualityError(RuntimeError):
    """Raised when a generated mesh fails its quality checks."""


class SolverDivergence(RuntimeError):
    """Raised when the nonlinear flow iteration fails to contract."""

    def __init__(self, message, history=None):
        super().__init__(message)
        self.history = list(history) if history is not None else []


class InvariantViolation(AssertionError):
    """Raised when a computed quantity breaks one of the library's checks."""


class ConfigError(ValueError):
    """Raised for malformed experiment configurations."""
