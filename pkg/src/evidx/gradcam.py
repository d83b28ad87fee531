"""Grad-CAM heatmaps over the frozen classifier and top-k thresholding."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .classifier import ClassifierModel, forward_with_taps, forward_from_tap
from .engine import Tape, Tensor, backward, no_grad, ops
from .errors import ContractError, DimensionError, ParameterError

DEFAULT_LAYER = "block3"


@dataclass
class Heatmap:
    values: np.ndarray
    source_layer: str
    zero: bool = False


def _upsample_nearest(a: np.ndarray, shape) -> np.ndarray:
    fy, fx = shape[0] // a.shape[0], shape[1] // a.shape[1]
    return np.repeat(np.repeat(a, fy, axis=0), fx, axis=1)


def gradcam(model: ClassifierModel, image, target_class: int, layer: str = DEFAULT_LAYER, logit_scale: float = 1.0) -> Heatmap:
    """Channel weights are the spatial mean of d logit / d activation.

    ``logit_scale`` multiplies the target logit before differentiation; the
    normalized heatmap does not depend on it for positive values.
    """
    if layer not in model.tap_names:
        raise ContractError(f"unknown layer {layer!r}; available: {list(model.tap_names)}")
    if not 0 <= target_class < model.num_classes:
        raise ContractError(f"target_class {target_class} out of range for {model.num_classes} classes")
    x = np.asarray(image.data if isinstance(image, Tensor) else image, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    if x.shape[0] != 1:
        raise DimensionError(f"gradcam takes one image, got batch of {x.shape[0]}")
    with no_grad():
        _, acts = forward_with_taps(model, Tensor(x))
    act = Tensor(acts[layer].data, requires_grad=True)
    with Tape() as tape:
        logits = forward_from_tap(model, layer, act)
        target = ops.mul(logits[0, target_class], float(logit_scale))
    (grad,) = backward(target, tape, inputs=[act])
    weights = grad[0].mean(axis=(1, 2))
    raw = np.maximum(np.tensordot(weights, act.data[0], axes=1), 0.0)
    full = _upsample_nearest(raw, x.shape[-2:])
    lo, hi = full.min(), full.max()
    if not hi > lo:
        return Heatmap(np.zeros_like(full), layer, zero=True)
    return Heatmap((full - lo) / (hi - lo), layer)


def threshold_heatmap(heatmap, keep_fraction: float) -> np.ndarray:
    """Mark the ``round(keep_fraction * H * W)`` highest pixels; ties go to the earlier row-major index."""
    if not 0 < keep_fraction <= 1:
        raise ParameterError(f"keep_fraction must be in (0, 1], got {keep_fraction}")
    values = np.asarray(heatmap.values if isinstance(heatmap, Heatmap) else heatmap, dtype=np.float64)
    k = int(round(keep_fraction * values.size))
    order = np.argsort(-values.reshape(-1), kind="stable")
    flat = np.zeros(values.size, dtype=bool)
    flat[order[:k]] = True
    return flat.reshape(values.shape)
