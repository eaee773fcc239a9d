"""Federated patchwork learning with graph-based modality fusion."""
from importlib.metadata import PackageNotFoundError, version

try:
    __version__ = version("artifact")
except PackageNotFoundError:  # running from a source tree
    __version__ = "0.0.0"

from .errors import (AggregationError, CapabilityError, ConfigurationError, DimensionError, DomainError,
                     EvaluationError, PreconditionError)
from .experiment import ExperimentConfig, run_experiment
from .federation import GlobalModel, load_checkpoint, save_checkpoint

__all__ = [
    "AggregationError", "CapabilityError", "ConfigurationError", "DimensionError", "DomainError",
    "EvaluationError", "PreconditionError", "ExperimentConfig", "run_experiment", "GlobalModel",
    "load_checkpoint", "save_checkpoint", "PatchworkImputer", "__version__",
]


def __getattr__(name):
    # sklearn is only imported when the estimator is used
    if name == "PatchworkImputer":
        from .estimator import PatchworkImputer
        return PatchworkImputer
    raise AttributeError(name)
