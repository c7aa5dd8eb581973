# agrg/core/optim.py

"""
Adam and AdamW over named parameters.

`adam_step` is the pure update rule; `Adam` binds it to a parameter list and reads
the gradients accumulated by `gradients(...)`. Moments are keyed by parameter
name so optimizer state can be checkpointed next to the weights.
"""

from dataclasses import dataclass, field
from typing import Dict, List, Mapping, Optional, Sequence, Tuple

import numpy as np

from agrg.core.autodiff import Tensor
from agrg.errors import ShapeError


@dataclass
class OptimizerState:
    lr: float
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.0
    decoupled_decay: bool = False
    t: int = 0
    m: Dict[str, np.ndarray] = field(default_factory=dict)
    v: Dict[str, np.ndarray] = field(default_factory=dict)


def adam_step(state: OptimizerState, params: Sequence[Tuple[str, Tensor]], grads: Mapping[str, np.ndarray]) -> None:
    """
    One bias-corrected Adam update, in place.

    With `decoupled_decay` the weight decay shrinks parameters directly (AdamW);
    otherwise it is folded into the gradient. A parameter without a gradient is
    updated as if its gradient were zero.
    """
    state.t += 1
    correction1 = 1.0 - state.beta1 ** state.t
    correction2 = 1.0 - state.beta2 ** state.t

    for name, param in params:
        grad = grads.get(name)
        grad = np.zeros_like(param.data) if grad is None else np.asarray(grad, dtype=np.float64)
        if grad.shape != param.shape:
            raise ShapeError(f"gradient for '{name}' has shape {grad.shape}, parameter has {param.shape}")
        m = state.m.setdefault(name, np.zeros_like(param.data))
        v = state.v.setdefault(name, np.zeros_like(param.data))
        if m.shape != param.shape or v.shape != param.shape:
            raise ShapeError(f"optimizer moments for '{name}' do not match parameter shape {param.shape}")

        if state.weight_decay:
            if state.decoupled_decay:
                param.data *= 1.0 - state.lr * state.weight_decay
            else:
                grad = grad + state.weight_decay * param.data

        m *= state.beta1
        m += (1.0 - state.beta1) * grad
        v *= state.beta2
        v += (1.0 - state.beta2) * grad ** 2
        param.data -= state.lr * (m / correction1) / (np.sqrt(v / correction2) + state.eps)


class Adam:
    """Adam bound to a list of named parameters."""

    def __init__(self, named_params: Sequence[Tuple[str, Tensor]], lr: float, beta1: float = 0.9,
                 beta2: float = 0.999, eps: float = 1e-8, weight_decay: float = 0.0,
                 state: Optional[OptimizerState] = None):
        self.params: List[Tuple[str, Tensor]] = list(named_params)
        self.state = state or OptimizerState(lr=lr, beta1=beta1, beta2=beta2, eps=eps,
                                             weight_decay=weight_decay, decoupled_decay=self.decoupled)

    decoupled = False

    def step(self) -> None:
        adam_step(self.state, self.params, {name: param.grad for name, param in self.params})

    def zero_grad(self) -> None:
        for _, param in self.params:
            param.grad = None


class AdamW(Adam):
    decoupled = True
