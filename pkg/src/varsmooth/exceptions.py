"""Exception types shared across the package."""


class VarsmoothError(Exception):
    """Base class for all package-specific errors."""


class DomainError(VarsmoothError, ValueError):
    """An argument lies outside the domain a density or operation is defined on."""


class ModelConstructionError(VarsmoothError, ValueError):
    """A model was constructed with invalid parameters (e.g. a degenerate noise
    covariance)."""


class EvaluationError(VarsmoothError, ValueError):
    """A numerical evaluation produced a non-finite result.

    Raised when an objective, constraint or quadrature integrand cannot be
    evaluated at a trial point.  Solvers treat this as a rejected step rather
    than a fatal error.
    """


class GridRangeError(VarsmoothError, ValueError):
    """A grid-based density accumulated non-negligible mass at its boundary."""


class ConstraintViolationError(VarsmoothError, ValueError):
    """An operation requiring marginal-consistent blocks received inconsistent
    ones."""


class ConfigError(VarsmoothError, ValueError):
    """An experiment configuration failed schema validation."""
