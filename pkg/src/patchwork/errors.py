"""Exception types shared across the package."""
from .numeric import DimensionError, DomainError, EvaluationError


class ConfigurationError(ValueError):
    """A setting or combination of settings cannot be satisfied."""


class PreconditionError(ValueError):
    """An operation was called on inputs it is not defined for."""


class CapabilityError(LookupError):
    """A component needed for the request is absent (e.g. a decoder)."""


class AggregationError(ValueError):
    """Client uploads disagree on a tensor's shape."""


__all__ = ["AggregationError", "CapabilityError", "ConfigurationError", "DimensionError",
           "DomainError", "EvaluationError", "PreconditionError"]
