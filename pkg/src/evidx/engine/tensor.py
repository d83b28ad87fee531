"""Dense float64 tensors and a dynamic tape for reverse-mode differentiation.

Operations executed while a :class:`Tape` is active (``with Tape() as tape:``)
are recorded in call order whenever at least one input requires a gradient.
:func:`backward` then replays the recorded nodes in exact reverse order.
Outside of a tape nothing is recorded, which is what inference code wants.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from ..errors import ContractError, DimensionError, NumericError

_ACTIVE_TAPES: list = []


class Tensor:
    __slots__ = ("data", "requires_grad", "grad", "is_leaf", "name")

    def __init__(self, data, requires_grad: bool = False, name: Optional[str] = None):
        arr = np.asarray(data, dtype=np.float64)
        if any(d < 1 for d in arr.shape):
            raise DimensionError(f"tensor dimensions must be >= 1, got shape {arr.shape}")
        self.data = arr
        self.requires_grad = requires_grad
        self.grad: Optional[np.ndarray] = None
        self.is_leaf = True
        self.name = name

    @property
    def shape(self) -> tuple:
        return self.data.shape

    @property
    def size(self) -> int:
        return self.data.size

    @property
    def ndim(self) -> int:
        return self.data.ndim

    def item(self) -> float:
        if self.data.size != 1:
            raise ContractError(f"item() needs a single-element tensor, got shape {self.shape}")
        return float(self.data.reshape(-1)[0])

    def numpy(self) -> np.ndarray:
        return self.data

    def zero_grad(self) -> None:
        self.grad = None

    def detach(self) -> "Tensor":
        return Tensor(self.data)

    def __repr__(self) -> str:
        tag = f" name={self.name!r}" if self.name else ""
        return f"Tensor(shape={self.shape}, requires_grad={self.requires_grad}{tag})"

    # operator sugar; the ops module is imported lazily to avoid a cycle
    def __add__(self, other):
        return _ops().add(self, other)

    __radd__ = __add__

    def __sub__(self, other):
        return _ops().sub(self, other)

    def __rsub__(self, other):
        return _ops().sub(other, self)

    def __mul__(self, other):
        return _ops().mul(self, other)

    __rmul__ = __mul__

    def __truediv__(self, other):
        return _ops().div(self, other)

    def __rtruediv__(self, other):
        return _ops().div(other, self)

    def __neg__(self):
        return _ops().mul(self, -1.0)

    def __matmul__(self, other):
        return _ops().matmul(self, other)

    def __getitem__(self, index):
        return _ops().getitem(self, index)


def _ops():
    from . import ops

    return ops


def as_tensor(value) -> Tensor:
    return value if isinstance(value, Tensor) else Tensor(value)


@dataclass
class Node:
    fn: "Function"
    inputs: tuple
    output: Tensor


@dataclass
class Tape:
    nodes: list = field(default_factory=list)

    def __enter__(self) -> "Tape":
        _ACTIVE_TAPES.append(self)
        return self

    def __exit__(self, *exc) -> None:
        _ACTIVE_TAPES.pop()

    def __len__(self) -> int:
        return len(self.nodes)


def active_tape() -> Optional[Tape]:
    return _ACTIVE_TAPES[-1] if _ACTIVE_TAPES else None


class no_grad:
    """Suspend recording inside an active tape."""

    def __enter__(self):
        _ACTIVE_TAPES.append(None)

    def __exit__(self, *exc):
        _ACTIVE_TAPES.pop()


class Function:
    """One differentiable operation.

    Subclasses implement ``forward`` on raw arrays and ``backward`` returning
    one gradient (or None) per input. ``self.needs[i]`` tells backward whether
    input ``i`` wants a gradient so expensive branches can be skipped.
    """

    name = "op"

    def __init__(self, **params):
        self.params = params
        self.needs: tuple = ()

    def forward(self, *arrays: np.ndarray) -> np.ndarray:
        raise NotImplementedError

    def backward(self, grad: np.ndarray) -> tuple:
        raise NotImplementedError

    @classmethod
    def apply(cls, *inputs, **params) -> Tensor:
        tensors = tuple(as_tensor(t) for t in inputs)
        for t in tensors:
            if not np.isfinite(t.data).all():
                raise NumericError(f"{cls.name}: input contains NaN or Inf")
        fn = cls(**params)
        fn.needs = tuple(t.requires_grad for t in tensors)
        out = Tensor(fn.forward(*(t.data for t in tensors)))
        tape = active_tape()
        if tape is not None and any(fn.needs):
            out.requires_grad = True
            out.is_leaf = False
            tape.nodes.append(Node(fn, tensors, out))
        return out


def backward(loss: Tensor, tape: Tape, inputs: Optional[Sequence[Tensor]] = None) -> Optional[list]:
    """Accumulate d(loss)/d(leaf) into ``.grad`` of every reachable leaf.

    If ``inputs`` is given, their gradients are returned as a list, with zero
    arrays for leaves the loss does not depend on.
    """
    if loss.size != 1:
        raise ContractError(f"backward needs a scalar loss, got shape {loss.shape}")
    pending = {id(loss): np.ones_like(loss.data)}
    if loss.is_leaf and loss.requires_grad:
        _accumulate(loss, pending.pop(id(loss)))
    for node in reversed(tape.nodes):
        g = pending.pop(id(node.output), None)
        if g is None:
            continue
        for t, gi in zip(node.inputs, node.fn.backward(g)):
            if gi is None or not t.requires_grad:
                continue
            if t.is_leaf:
                _accumulate(t, gi)
            elif id(t) in pending:
                pending[id(t)] = pending[id(t)] + gi
            else:
                pending[id(t)] = gi
    if inputs is None:
        return None
    return [t.grad if t.grad is not None else np.zeros_like(t.data) for t in inputs]


def _accumulate(t: Tensor, g: np.ndarray) -> None:
    g = np.asarray(g, dtype=np.float64).reshape(t.shape)
    t.grad = g.copy() if t.grad is None else t.grad + g
