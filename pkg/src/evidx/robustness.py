"""Random backgrounds and the evidence-plus-background composite."""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np

from .engine import Tensor, ops
from .errors import DataError, DimensionError, ParameterError

BACKGROUND_KINDS = ("uniform_noise", "gaussian_noise", "corpus_shuffle")
CLI_BACKGROUND_NAMES = {"uniform": "uniform_noise", "gaussian": "gaussian_noise", "corpus": "corpus_shuffle"}


def sample_background(
    shape: Sequence[int],
    kind: str,
    rng: np.random.Generator,
    pool: Optional[Sequence[np.ndarray]] = None,
    exclude: Optional[np.ndarray] = None,
) -> np.ndarray:
    """Draw one background ``r`` of the given shape.

    ``corpus_shuffle`` picks uniformly among pool images that differ from
    ``exclude`` (the image being explained).
    """
    shape = tuple(shape)
    if kind == "uniform_noise":
        return rng.random(shape)
    if kind == "gaussian_noise":
        return np.clip(0.5 + 0.25 * rng.standard_normal(shape), 0.0, 1.0)
    if kind == "corpus_shuffle":
        candidates = [p for p in (pool or ()) if exclude is None or not np.array_equal(p, np.reshape(exclude, np.shape(p)))]
        if not candidates:
            raise DataError("corpus_shuffle needs a pool with at least one image other than the input")
        pick = np.asarray(candidates[int(rng.integers(len(candidates)))], dtype=np.float64)
        if pick.size != int(np.prod(shape)):
            raise DimensionError(f"pool image of shape {pick.shape} cannot fill background shape {shape}")
        return pick.reshape(shape).copy()
    raise ParameterError(f"unknown background kind {kind!r}; expected one of {BACKGROUND_KINDS}")


def composite(image, mask, background):
    """``m * x + (1 - m) * r`` with the mask broadcast over channels."""
    m = mask if isinstance(mask, Tensor) else Tensor(mask)
    return ops.add(ops.mul(m, image), ops.mul(ops.sub(1.0, m), background))
