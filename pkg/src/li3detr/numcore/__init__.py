"""Dense float64 tensors with tape-based reverse-mode differentiation."""

from . import ops
from .gradcheck import GradCheckError, grad_check
from .ops import (
    bilinear_sample,
    primitive_forward,
    reset_sampling_overflow,
    sampling_overflow_count,
)
from .tensor import (
    ContractError,
    DimensionError,
    Tape,
    Tensor,
    active_tape,
    backward,
    no_grad,
    tape,
)

__all__ = [
    "ContractError",
    "DimensionError",
    "GradCheckError",
    "Tape",
    "Tensor",
    "active_tape",
    "backward",
    "bilinear_sample",
    "grad_check",
    "no_grad",
    "ops",
    "primitive_forward",
    "reset_sampling_overflow",
    "sampling_overflow_count",
    "tape",
]
