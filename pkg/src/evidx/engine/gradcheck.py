"""Finite-difference and naive-loop oracles for the engine.

These stay deliberately independent of the vectorised code paths they check.
"""

from __future__ import annotations

from typing import Callable, Sequence

import numpy as np

from .tensor import Tape, Tensor, backward


def numerical_gradient(fn: Callable[[Sequence[np.ndarray]], float], arrays: Sequence[np.ndarray], h: float = 1e-5):
    """Central differences of scalar ``fn`` with respect to every array."""
    grads = []
    for a in arrays:
        g = np.zeros_like(a)
        for idx in np.ndindex(a.shape):
            orig = a[idx]
            a[idx] = orig + h
            up = fn(arrays)
            a[idx] = orig - h
            down = fn(arrays)
            a[idx] = orig
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relative_error(analytic: np.ndarray, numeric: np.ndarray) -> float:
    num = np.linalg.norm(analytic - numeric)
    den = max(np.linalg.norm(analytic) + np.linalg.norm(numeric), 1e-12)
    return float(num / den)


def check_gradient(op: Callable[..., Tensor], arrays: Sequence[np.ndarray], rng: np.random.Generator, h: float = 1e-5):
    """Worst relative error between backward() and central differences.

    The op output is contracted against a fixed random tensor so every output
    element contributes to the scalar being differentiated.
    """
    arrays = [np.array(a, dtype=np.float64) for a in arrays]
    probe = op(*[Tensor(a) for a in arrays])
    weights = rng.standard_normal(probe.shape)

    def scalar(arrs):
        return float(np.sum(op(*[Tensor(a) for a in arrs]).data * weights))

    leaves = [Tensor(a.copy(), requires_grad=True) for a in arrays]
    with Tape() as tape:
        out = op(*leaves)
        from . import ops

        loss = ops.sum(ops.mul(out, weights))
    analytic = backward(loss, tape, leaves)
    numeric = numerical_gradient(scalar, arrays, h)
    return max(relative_error(a, n) for a, n in zip(analytic, numeric))


def naive_conv2d(x: np.ndarray, w: np.ndarray, stride: int = 1, padding: int = 0) -> np.ndarray:
    n, c, h, wd = x.shape
    k, _, kh, kw = w.shape
    ho = (h + 2 * padding - kh) // stride + 1
    wo = (wd + 2 * padding - kw) // stride + 1
    out = np.zeros((n, k, ho, wo))
    for b in range(n):
        for o in range(k):
            for i in range(ho):
                for j in range(wo):
                    acc = 0.0
                    for ch in range(c):
                        for u in range(kh):
                            for v in range(kw):
                                r = i * stride + u - padding
                                q = j * stride + v - padding
                                if 0 <= r < h and 0 <= q < wd:
                                    acc += x[b, ch, r, q] * w[o, ch, u, v]
                    out[b, o, i, j] = acc
    return out
