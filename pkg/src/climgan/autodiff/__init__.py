"""Minimal reverse-mode autodiff over numpy arrays with differentiable backward passes."""
from . import functional, ops
from .gradcheck import double_backward_check, gradcheck
from .tensor import DEFAULT_DTYPE, Node, Tape, Tensor, as_tensor, grad, no_grad

__all__ = [
    "DEFAULT_DTYPE", "Node", "Tape", "Tensor", "as_tensor", "grad", "no_grad",
    "functional", "ops", "gradcheck", "double_backward_check",
]
