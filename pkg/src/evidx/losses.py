"""The seven explanation losses.

Mask priors are normalised (area and binarisation by pixel count, total
variation by neighbour-pair count) so weight ratios carry over between image
sizes. Every loss returns a scalar :class:`Tensor`.
"""

from __future__ import annotations

from typing import Mapping, Sequence

import numpy as np

from .classifier import forward_with_taps
from .engine import Tensor, ops
from .errors import ContractError, DimensionError, NumericError
from .robustness import composite

DISTANCE_KINDS = ("mse", "cosine")
COSINE_EPS = 1e-12


def _array(t) -> np.ndarray:
    return t.data if isinstance(t, Tensor) else np.asarray(t, dtype=np.float64)


def _mask_2d(mask) -> Tensor:
    m = mask if isinstance(mask, Tensor) else Tensor(mask)
    h, w = m.shape[-2:]
    return ops.reshape(m, (h, w)) if m.ndim != 2 else m


def activation_distance(target: np.ndarray, act: Tensor, kind: str) -> Tensor:
    if kind == "mse":
        return ops.mean(ops.square(ops.sub(act, target)))
    if kind == "cosine":
        dot = ops.sum(ops.mul(act, target))
        norm = ops.sqrt(ops.sum(ops.square(act)))
        denom = ops.add(ops.mul(norm, float(np.linalg.norm(target))), COSINE_EPS)
        return ops.sub(1.0, ops.div(dot, denom))
    raise ContractError(f"unknown distance kind {kind!r}; expected one of {DISTANCE_KINDS}")


def loss_act(acts_x: Mapping, acts_e: Mapping, alpha: Mapping, distance_kind: str = "mse") -> Tensor:
    """Weighted sum over taps of the distance between original and masked activations."""
    if list(acts_x) != list(acts_e):
        raise ContractError(f"activation tap mismatch: {list(acts_x)} vs {list(acts_e)}")
    total = Tensor(0.0)
    for name, act in acts_e.items():
        target = _array(acts_x[name])
        if target.shape != act.shape:
            raise ContractError(f"tap {name}: shape {target.shape} vs {act.shape}")
        weight = float(alpha.get(name, 0.0))
        if weight:
            total = ops.add(total, ops.mul(activation_distance(target, act, distance_kind), weight))
    return total


def _check_finite(name, *arrays):
    for a in arrays:
        if not np.isfinite(a).all():
            raise NumericError(f"{name}: logits contain NaN or Inf")


def loss_kl(logits_x, logits_e: Tensor) -> Tensor:
    """KL(softmax(logits_x) || softmax(logits_e)); the x side is a fixed target."""
    lx = _array(logits_x).reshape(-1)
    le = logits_e if isinstance(logits_e, Tensor) else Tensor(logits_e)
    _check_finite("loss_kl", lx, le.data)
    if lx.size != le.size:
        raise DimensionError(f"loss_kl: {lx.size} vs {le.size} logits")
    p = np.exp(lx - lx.max())
    p /= p.sum()
    log_p = lx - lx.max() - np.log(np.exp(lx - lx.max()).sum())
    log_q = ops.log_softmax(ops.reshape(le, (le.size,)))
    return ops.sum(ops.mul(ops.sub(log_p, log_q), p))


def loss_ce(logits_e, y: int) -> Tensor:
    le = logits_e if isinstance(logits_e, Tensor) else Tensor(logits_e)
    _check_finite("loss_ce", le.data)
    if not 0 <= y < le.size:
        raise ContractError(f"loss_ce: class {y} out of range for {le.size} logits")
    logp = ops.log_softmax(ops.reshape(le, (le.size,)))
    return ops.mul(ops.getitem(logp, y), -1.0)


def loss_area(mask) -> Tensor:
    m = _mask_2d(mask)
    return ops.mul(ops.abs_sum(m), 1.0 / m.size)


def loss_bin(mask) -> Tensor:
    m = _mask_2d(mask)
    return ops.mul(ops.abs_sum(ops.sub(m, ops.square(m))), 1.0 / m.size)


def loss_tv(mask) -> Tensor:
    m = _mask_2d(mask)
    h, w = m.shape
    pairs = h * (w - 1) + (h - 1) * w
    if pairs == 0:
        return Tensor(0.0)
    total = Tensor(0.0)
    if w > 1:
        total = ops.add(total, ops.abs_sum(ops.sub(m[:, 1:], m[:, :-1])))
    if h > 1:
        total = ops.add(total, ops.abs_sum(ops.sub(m[1:, :], m[:-1, :])))
    return ops.mul(total, 1.0 / pairs)


def loss_rob(image, mask, backgrounds: Sequence[np.ndarray], model, y: int) -> Tensor:
    """Mean cross-entropy of class ``y`` on ``m * x + (1 - m) * r`` over the given backgrounds."""
    x = _array(image)
    backgrounds = [np.asarray(r, dtype=np.float64).reshape(x.shape) for r in backgrounds]
    if not backgrounds:
        raise ContractError("loss_rob needs at least one background")
    batch = ops.concat([composite(x, mask, r) for r in backgrounds], axis=0) if len(backgrounds) > 1 else composite(
        x, mask, backgrounds[0]
    )
    logits, _ = forward_with_taps(model, batch)
    total = Tensor(0.0)
    for i in range(len(backgrounds)):
        total = ops.add(total, loss_ce(logits[i], y))
    return ops.mul(total, 1.0 / len(backgrounds))
