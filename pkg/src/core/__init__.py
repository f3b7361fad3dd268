"""
Core

Configuration, error hierarchy, domain value types, the tensor/tape
autodiff engine and its differentiable primitives.
"""

from .config import Config, config
from .errors import AxialError, ConfigError, ContractError, DimensionError, DomainError
from .models import Axis, Mode, ModelSpec, PositionalMode, Precision, Span
from .tensor import Tape, Tensor, backward, finite_difference_grad, no_grad

__all__ = [
    "Config",
    "config",
    "AxialError",
    "ConfigError",
    "ContractError",
    "DimensionError",
    "DomainError",
    "Axis",
    "Mode",
    "ModelSpec",
    "PositionalMode",
    "Precision",
    "Span",
    "Tape",
    "Tensor",
    "backward",
    "finite_difference_grad",
    "no_grad",
]
