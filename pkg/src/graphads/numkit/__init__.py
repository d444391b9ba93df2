"""Minimal dense-tensor kernel: float64 arrays, reverse-mode autodiff, AdamW."""

from .tensor import (
    Tensor,
    TapeNode,
    backward,
    first_nonfinite,
    grad_enabled,
    no_grad,
    zero_grads,
)
from . import ops
from .optim import AdamW, AdamWState, adamw_step
from .rng import component_rng, derive_seed, gaussian_init, seeded_rng
from .checkpoint import load_checkpoint, save_checkpoint

__all__ = [
    "Tensor", "TapeNode", "backward", "first_nonfinite", "grad_enabled",
    "no_grad", "zero_grads", "ops", "AdamW", "AdamWState", "adamw_step",
    "component_rng", "derive_seed", "gaussian_init", "seeded_rng",
    "load_checkpoint", "save_checkpoint",
]
