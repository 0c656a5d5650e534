"""Minimal dense tensors with reverse-mode autodiff and AdamW."""

from . import functional
from .gradcheck import GradCheckReport, grad_check, relative_error
from .optim import AdamW, AdamWState, adamw_step
from .tensor import Tape, Tensor, as_tensor, backward, default_dtype, get_default_dtype

__all__ = [
    "AdamW",
    "AdamWState",
    "GradCheckReport",
    "Tape",
    "Tensor",
    "adamw_step",
    "as_tensor",
    "backward",
    "default_dtype",
    "functional",
    "get_default_dtype",
    "grad_check",
    "relative_error",
]
