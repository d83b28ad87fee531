"""Differentiable operators.

Every public function here wraps a :class:`Function` subclass; the subclasses
are kept module-level so tests can patch individual backward rules.
"""

from __future__ import annotations

from typing import Optional, Sequence

import numpy as np
from numpy.lib.stride_tricks import sliding_window_view

from ..errors import DimensionError
from .tensor import Function, Tensor

LOG_FLOOR = 1e-12


def _unbroadcast(grad: np.ndarray, shape: tuple) -> np.ndarray:
    while grad.ndim > len(shape):
        grad = grad.sum(axis=0)
    for axis, dim in enumerate(shape):
        if dim == 1 and grad.shape[axis] != 1:
            grad = grad.sum(axis=axis, keepdims=True)
    return grad


def _check_broadcast(name, a, b):
    try:
        np.broadcast_shapes(a.shape, b.shape)
    except ValueError:
        raise DimensionError(f"{name}: cannot broadcast shapes {a.shape} and {b.shape}") from None


# --- elementwise binary -----------------------------------------------------


class Add(Function):
    name = "add"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a + b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(g, self.shapes[1])


class Sub(Function):
    name = "sub"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        self.shapes = (a.shape, b.shape)
        return a - b

    def backward(self, g):
        return _unbroadcast(g, self.shapes[0]), _unbroadcast(-g, self.shapes[1])


class Mul(Function):
    name = "mul"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        self.a, self.b = a, b
        return a * b

    def backward(self, g):
        ga = _unbroadcast(g * self.b, self.a.shape) if self.needs[0] else None
        gb = _unbroadcast(g * self.a, self.b.shape) if self.needs[1] else None
        return ga, gb


class Div(Function):
    name = "div"

    def forward(self, a, b):
        _check_broadcast(self.name, a, b)
        self.a, self.b = a, b
        return a / b

    def backward(self, g):
        ga = _unbroadcast(g / self.b, self.a.shape) if self.needs[0] else None
        gb = _unbroadcast(-g * self.a / self.b**2, self.b.shape) if self.needs[1] else None
        return ga, gb


class MatMul(Function):
    name = "matmul"

    def forward(self, a, b):
        if a.ndim != 2 or b.ndim != 2 or a.shape[1] != b.shape[0]:
            raise DimensionError(f"matmul: incompatible shapes {a.shape} @ {b.shape}")
        self.a, self.b = a, b
        return a @ b

    def backward(self, g):
        ga = g @ self.b.T if self.needs[0] else None
        gb = self.a.T @ g if self.needs[1] else None
        return ga, gb


# --- elementwise unary ------------------------------------------------------


class ReLU(Function):
    name = "relu"

    def forward(self, x):
        self.pos = x > 0
        return np.where(self.pos, x, 0.0)

    def backward(self, g):
        return (g * self.pos,)


class Sigmoid(Function):
    name = "sigmoid"

    def forward(self, x):
        # split by sign so exp never overflows
        out = np.empty_like(x)
        pos = x >= 0
        out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
        ex = np.exp(x[~pos])
        out[~pos] = ex / (1.0 + ex)
        self.out = out
        return out

    def backward(self, g):
        return (g * self.out * (1.0 - self.out),)


class Square(Function):
    name = "square"

    def forward(self, x):
        self.x = x
        return x * x

    def backward(self, g):
        return (2.0 * g * self.x,)


class Abs(Function):
    name = "abs"

    def forward(self, x):
        self.sign = np.sign(x)
        return np.abs(x)

    def backward(self, g):
        return (g * self.sign,)


class Exp(Function):
    name = "exp"

    def forward(self, x):
        self.out = np.exp(x)
        return self.out

    def backward(self, g):
        return (g * self.out,)


class Sqrt(Function):
    name = "sqrt"

    def forward(self, x):
        self.out = np.sqrt(x)
        return self.out

    def backward(self, g):
        # subgradient 0 at the origin
        safe = np.where(self.out > 0, self.out, 1.0)
        return (np.where(self.out > 0, 0.5 * g / safe, 0.0),)


class Log(Function):
    name = "log"

    def forward(self, x):
        floor = self.params.get("floor", LOG_FLOOR)
        self.x = np.maximum(x, floor)
        self.live = x >= floor
        return np.log(self.x)

    def backward(self, g):
        return (np.where(self.live, g / self.x, 0.0),)


# --- reductions -------------------------------------------------------------


class Sum(Function):
    name = "sum"

    def forward(self, x):
        self.shape = x.shape
        return np.sum(x, axis=self.params.get("axis"), keepdims=self.params.get("keepdims", False))

    def backward(self, g):
        axis = self.params.get("axis")
        if axis is not None and not self.params.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g, self.shape).copy(),)


class Mean(Function):
    name = "mean"

    def forward(self, x):
        self.shape = x.shape
        axis = self.params.get("axis")
        self.count = x.size if axis is None else int(np.prod([x.shape[a] for a in np.atleast_1d(axis)]))
        return np.mean(x, axis=axis, keepdims=self.params.get("keepdims", False))

    def backward(self, g):
        axis = self.params.get("axis")
        if axis is not None and not self.params.get("keepdims", False):
            g = np.expand_dims(g, axis)
        return (np.broadcast_to(g / self.count, self.shape).copy(),)


class AbsSum(Function):
    name = "abs_sum"

    def forward(self, x):
        self.sign = np.sign(x)
        return np.asarray(np.abs(x).sum())

    def backward(self, g):
        return (g * self.sign,)


class Softmax(Function):
    name = "softmax"

    def forward(self, x):
        axis = self.params.get("axis", -1)
        z = np.exp(x - x.max(axis=axis, keepdims=True))
        self.out = z / z.sum(axis=axis, keepdims=True)
        return self.out

    def backward(self, g):
        axis = self.params.get("axis", -1)
        s = self.out
        return (s * (g - (g * s).sum(axis=axis, keepdims=True)),)


class LogSoftmax(Function):
    """Shift-stable log-softmax; unlike ``log(softmax(x))`` it never clamps."""

    name = "log_softmax"

    def forward(self, x):
        axis = self.params.get("axis", -1)
        z = x - x.max(axis=axis, keepdims=True)
        out = z - np.log(np.exp(z).sum(axis=axis, keepdims=True))
        self.soft = np.exp(out)
        return out

    def backward(self, g):
        axis = self.params.get("axis", -1)
        return (g - self.soft * g.sum(axis=axis, keepdims=True),)


# --- shape manipulation -----------------------------------------------------


class Reshape(Function):
    name = "reshape"

    def forward(self, x):
        self.shape = x.shape
        return x.reshape(self.params["shape"])

    def backward(self, g):
        return (g.reshape(self.shape),)


class GetItem(Function):
    name = "getitem"

    def forward(self, x):
        self.shape = x.shape
        return np.array(x[self.params["index"]])

    def backward(self, g):
        full = np.zeros(self.shape)
        np.add.at(full, self.params["index"], g)
        return (full,)


class Concat(Function):
    name = "concat"

    def forward(self, *xs):
        axis = self.params.get("axis", 1)
        ref = list(xs[0].shape)
        for x in xs[1:]:
            if x.ndim != len(ref) or any(x.shape[i] != ref[i] for i in range(len(ref)) if i != axis % len(ref)):
                raise DimensionError(f"concat: incompatible shapes {xs[0].shape} and {x.shape}")
        self.splits = np.cumsum([x.shape[axis] for x in xs])[:-1]
        return np.concatenate(xs, axis=axis)

    def backward(self, g):
        return tuple(np.split(g, self.splits, axis=self.params.get("axis", 1)))


# --- spatial ----------------------------------------------------------------


def _im2col(xp: np.ndarray, kh: int, kw: int, stride: int):
    """Rows are (c, u, v) patch entries; columns are output positions (n, i, j).

    This orientation keeps the gather copy cache-friendly for NCHW input.
    """
    n, c, hp, wp = xp.shape
    ho, wo = (hp - kh) // stride + 1, (wp - kw) // stride + 1
    win = sliding_window_view(xp, (kh, kw), axis=(2, 3))[:, :, : (ho - 1) * stride + 1 : stride, : (wo - 1) * stride + 1 : stride]
    cols = win.transpose(1, 4, 5, 0, 2, 3).reshape(c * kh * kw, n * ho * wo)
    return cols, ho, wo


def _pad(x: np.ndarray, p: int) -> np.ndarray:
    return np.pad(x, ((0, 0), (0, 0), (p, p), (p, p))) if p else x


class Conv2d(Function):
    """Cross-correlation over NCHW input with KCkhkw kernels and optional bias[K]."""

    name = "conv2d"

    def forward(self, x, w, b=None):
        if x.ndim != 4 or w.ndim != 4:
            raise DimensionError(f"conv2d: expected 4-d input and kernel, got {x.shape} and {w.shape}")
        n, c, h, wd = x.shape
        k, ck, kh, kw = w.shape
        if c != ck:
            raise DimensionError(f"conv2d: kernel expects {ck} channels, input has {c}")
        s, p = self.params.get("stride", 1), self.params.get("padding", 0)
        if s < 1 or p < 0:
            raise DimensionError(f"conv2d: invalid stride {s} or padding {p}")
        if kh > h + 2 * p or kw > wd + 2 * p:
            raise DimensionError(f"conv2d: kernel {kh}x{kw} larger than padded input {h + 2 * p}x{wd + 2 * p}")
        if b is not None and b.shape != (k,):
            raise DimensionError(f"conv2d: bias shape {b.shape} does not match {k} output channels")
        cols, ho, wo = _im2col(_pad(x, p), kh, kw, s)
        self.cols = cols if self.needs[1] else None
        self.w, self.x_shape, self.out_hw = w, x.shape, (ho, wo)
        out = w.reshape(k, -1) @ cols
        if b is not None:
            out += b[:, None]
        return np.ascontiguousarray(out.reshape(k, n, ho, wo).transpose(1, 0, 2, 3))

    def backward(self, g):
        s, p = self.params.get("stride", 1), self.params.get("padding", 0)
        k, c, kh, kw = self.w.shape
        n, _, h, wd = self.x_shape
        ho, wo = self.out_hw
        gx = gw = gb = None
        if self.needs[0]:
            if s == 1 and p <= kh - 1 and p <= kw - 1:
                # full correlation with the flipped, channel-transposed kernel
                flipped = self.w[:, :, ::-1, ::-1].transpose(1, 0, 2, 3)
                gp = np.pad(g, ((0, 0), (0, 0), (kh - 1 - p, kh - 1 - p), (kw - 1 - p, kw - 1 - p)))
                cols, _, _ = _im2col(gp, kh, kw, 1)
                gx = (flipped.reshape(c, -1) @ cols).reshape(c, n, h, wd).transpose(1, 0, 2, 3)
            else:
                gcols = np.tensordot(g, self.w, axes=([1], [0]))  # n, ho, wo, c, kh, kw
                dxp = np.zeros((n, c, h + 2 * p, wd + 2 * p))
                for i in range(kh):
                    for j in range(kw):
                        dxp[:, :, i : i + (ho - 1) * s + 1 : s, j : j + (wo - 1) * s + 1 : s] += gcols[..., i, j].transpose(0, 3, 1, 2)
                gx = dxp[:, :, p : p + h, p : p + wd]
        gmat = g.transpose(1, 0, 2, 3).reshape(k, -1)
        if self.needs[1]:
            gw = (gmat @ self.cols.T).reshape(self.w.shape)
        if len(self.needs) > 2 and self.needs[2]:
            gb = gmat.sum(axis=1)
        return (gx, gw, gb)[: len(self.needs)]


class AvgPool2x2(Function):
    name = "avg_pool2x2"

    def forward(self, x):
        n, c, h, w = x.shape
        if h % 2 or w % 2:
            raise DimensionError(f"avg_pool2x2: spatial size {h}x{w} must be even")
        return 0.25 * (x[:, :, 0::2, 0::2] + x[:, :, 1::2, 0::2] + x[:, :, 0::2, 1::2] + x[:, :, 1::2, 1::2])

    def backward(self, g):
        n, c, h, w = g.shape
        out = np.empty((n, c, h, 2, w, 2))
        out[...] = 0.25 * g[:, :, :, None, :, None]
        return (out.reshape(n, c, 2 * h, 2 * w),)


class UpsampleNearest2x(Function):
    name = "upsample_nearest2x"

    def forward(self, x):
        if x.ndim != 4:
            raise DimensionError(f"upsample_nearest2x: expected NCHW input, got {x.shape}")
        return np.repeat(np.repeat(x, 2, axis=2), 2, axis=3)

    def backward(self, g):
        n, c, h, w = g.shape
        return (g.reshape(n, c, h // 2, 2, w // 2, 2).sum(axis=(3, 5)),)


# --- functional API ---------------------------------------------------------


def add(a, b) -> Tensor:
    return Add.apply(a, b)


def sub(a, b) -> Tensor:
    return Sub.apply(a, b)


def mul(a, b) -> Tensor:
    return Mul.apply(a, b)


def div(a, b) -> Tensor:
    return Div.apply(a, b)


def matmul(a, b) -> Tensor:
    return MatMul.apply(a, b)


def relu(x) -> Tensor:
    return ReLU.apply(x)


def sigmoid(x) -> Tensor:
    return Sigmoid.apply(x)


def square(x) -> Tensor:
    return Square.apply(x)


def abs(x) -> Tensor:  # noqa: A001 - mirrors numpy naming
    return Abs.apply(x)


def exp(x) -> Tensor:
    return Exp.apply(x)


def sqrt(x) -> Tensor:
    return Sqrt.apply(x)


def log(x, floor: float = LOG_FLOOR) -> Tensor:
    """Natural log of ``max(x, floor)``; the gradient is zero where the floor is active."""
    return Log.apply(x, floor=floor)


def sum(x, axis=None, keepdims: bool = False) -> Tensor:  # noqa: A001
    return Sum.apply(x, axis=axis, keepdims=keepdims)


def mean(x, axis=None, keepdims: bool = False) -> Tensor:
    return Mean.apply(x, axis=axis, keepdims=keepdims)


def abs_sum(x) -> Tensor:
    return AbsSum.apply(x)


def softmax(x, axis: int = -1) -> Tensor:
    return Softmax.apply(x, axis=axis)


def log_softmax(x, axis: int = -1) -> Tensor:
    return LogSoftmax.apply(x, axis=axis)


def reshape(x, shape: Sequence[int]) -> Tensor:
    return Reshape.apply(x, shape=tuple(shape))


def getitem(x, index) -> Tensor:
    return GetItem.apply(x, index=index)


def concat(xs: Sequence[Tensor], axis: int = 1) -> Tensor:
    return Concat.apply(*xs, axis=axis)


def conv2d(x, kernel, bias: Optional[Tensor] = None, stride: int = 1, padding: int = 0) -> Tensor:
    if bias is None:
        return Conv2d.apply(x, kernel, stride=stride, padding=padding)
    return Conv2d.apply(x, kernel, bias, stride=stride, padding=padding)


def avg_pool2x2(x) -> Tensor:
    return AvgPool2x2.apply(x)


def upsample_nearest2x(x) -> Tensor:
    return UpsampleNearest2x.apply(x)
