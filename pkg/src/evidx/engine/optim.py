from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import DimensionError, ParameterError
from .tensor import Tensor


@dataclass
class OptimizerState:
    learning_rate: float
    beta1: float = 0.9
    beta2: float = 0.999
    epsilon: float = 1e-8
    step_count: int = 0
    first_moment: list = field(default_factory=list)
    second_moment: list = field(default_factory=list)

    def __post_init__(self):
        if not self.learning_rate > 0:
            raise ParameterError(f"learning rate must be positive, got {self.learning_rate}")
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ParameterError(f"betas must lie in (0, 1), got {self.beta1}, {self.beta2}")


def _array(p) -> np.ndarray:
    return p.data if isinstance(p, Tensor) else p


def adam_step(params: Sequence, grads: Sequence[Optional[np.ndarray]], state: OptimizerState):
    """Bias-corrected Adam update, applied in place to Tensors or float arrays.

    A ``None`` gradient counts as zero. Returns ``(params, state)``.
    """
    if len(params) != len(grads):
        raise DimensionError(f"adam_step: {len(params)} params but {len(grads)} gradients")
    if not state.first_moment:
        state.first_moment = [np.zeros_like(_array(p)) for p in params]
        state.second_moment = [np.zeros_like(_array(p)) for p in params]
    state.step_count += 1
    t = state.step_count
    b1, b2 = state.beta1, state.beta2
    for p, g, m, v in zip(params, grads, state.first_moment, state.second_moment):
        if m.shape != p.shape:
            raise DimensionError(f"adam_step: moment shape {m.shape} does not match parameter {p.shape}")
        if g is None:
            g = np.zeros_like(_array(p))
        elif g.shape != p.shape:
            raise DimensionError(f"adam_step: gradient shape {g.shape} does not match parameter {p.shape}")
        m *= b1
        m += (1 - b1) * g
        v *= b2
        v += (1 - b2) * g * g
        m_hat = m / (1 - b1**t)
        v_hat = v / (1 - b2**t)
        update = state.learning_rate * m_hat / (np.sqrt(v_hat) + state.epsilon)
        if isinstance(p, Tensor):
            p.data = p.data - update
        else:
            p -= update
    return params, state


class Adam:
    """Thin wrapper that reads ``.grad`` off the tracked parameters."""

    def __init__(self, params: Sequence[Tensor], lr: float = 1e-3, betas=(0.9, 0.999), eps: float = 1e-8):
        self.params = list(params)
        self.state = OptimizerState(learning_rate=lr, beta1=betas[0], beta2=betas[1], epsilon=eps)

    def zero_grad(self) -> None:
        for p in self.params:
            p.grad = None

    def step(self) -> None:
        adam_step(self.params, [p.grad for p in self.params], self.state)
