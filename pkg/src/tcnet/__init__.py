"""From-scratch trajectory/correlation attention blocks for continuous
gesture-sequence recognition, with a small autodiff engine and CTC training."""

from .tensor import DomainError, ShapeError, Tape, Tensor, no_grad

__all__ = ["Tensor", "Tape", "no_grad", "ShapeError", "DomainError"]
__version__ = "0.1.0"
