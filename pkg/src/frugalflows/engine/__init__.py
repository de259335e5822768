"""Minimal reverse-mode differentiation and optimisation core."""
from .nn import MaskedMLP, autoregressive_mask, hidden_degrees
from .optim import AdamState, adam_step
from .tensor import (
    Parameter,
    Tensor,
    as_tensor,
    backward,
    grad,
    no_grad,
    value_and_grad,
)

__all__ = [
    "AdamState",
    "MaskedMLP",
    "Parameter",
    "Tensor",
    "adam_step",
    "as_tensor",
    "autoregressive_mask",
    "backward",
    "grad",
    "hidden_degrees",
    "no_grad",
    "value_and_grad",
]
