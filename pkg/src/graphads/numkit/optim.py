"""AdamW with decoupled weight decay and bias correction."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from ..errors import ContractError
from .tensor import Tensor


@dataclass
class AdamWState:
    """Per-parameter moment accumulators plus the shared step counter."""

    lr: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    step_count: int = 0
    m: dict[str, np.ndarray] = field(default_factory=dict)
    v: dict[str, np.ndarray] = field(default_factory=dict)


class AdamW:
    """Updates a named parameter dict in place from the grads on its tensors.

    Decay is decoupled from the gradient path: each step first shrinks the
    parameter by lr * weight_decay, then applies the bias-corrected moment
    update.  Parameters with no grad populated raise, naming the offender.
    """

    def __init__(self, params: dict[str, Tensor], lr: float = 1e-4,
                 beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8,
                 weight_decay: float = 0.01):
        self.params = params
        self.state = AdamWState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                                weight_decay=weight_decay)
        for name, p in params.items():
            self.state.m[name] = np.zeros_like(p.data)
            self.state.v[name] = np.zeros_like(p.data)

    def zero_grad(self) -> None:
        for p in self.params.values():
            p.zero_grad()

    def step(self) -> None:
        adamw_step(self.params, self.state)


def adamw_step(params: dict[str, Tensor], state: AdamWState) -> None:
    """One AdamW update over all parameters, in stable name order."""
    state.step_count += 1
    t = state.step_count
    bc1 = 1.0 - state.beta1 ** t
    bc2 = 1.0 - state.beta2 ** t
    for name in sorted(params):
        p = params[name]
        if p.grad is None:
            raise ContractError(f"adamw_step: parameter {name!r} has no gradient")
        if p.grad.shape != p.data.shape:
            raise ContractError(
                f"adamw_step: grad shape {p.grad.shape} does not match "
                f"parameter {name!r} shape {p.data.shape}")
        m = state.m[name]
        v = state.v[name]
        m *= state.beta1
        m += (1.0 - state.beta1) * p.grad
        v *= state.beta2
        v += (1.0 - state.beta2) * (p.grad * p.grad)
        m_hat = m / bc1
        v_hat = v / bc2
        if state.weight_decay:
            p.data *= 1.0 - state.lr * state.weight_decay
        p.data -= state.lr * m_hat / (np.sqrt(v_hat) + state.eps)
