from .autodiff import (
    NonFiniteError,
    Tensor,
    as_tensor,
    backward,
    default_dtype,
    no_grad,
    precision,
    set_default_dtype,
)
from .nn import Module, Parameter
from .optim import Adam, AdamState, adam_step

__all__ = [
    "Adam",
    "AdamState",
    "Module",
    "NonFiniteError",
    "Parameter",
    "Tensor",
    "adam_step",
    "as_tensor",
    "backward",
    "default_dtype",
    "no_grad",
    "precision",
    "set_default_dtype",
]
