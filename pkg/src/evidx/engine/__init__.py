from . import ops
from .optim import Adam, OptimizerState, adam_step
from .tensor import Function, Tape, Tensor, active_tape, as_tensor, backward, no_grad

__all__ = [
    "Adam",
    "Function",
    "OptimizerState",
    "Tape",
    "Tensor",
    "active_tape",
    "adam_step",
    "as_tensor",
    "backward",
    "no_grad",
    "ops",
]
