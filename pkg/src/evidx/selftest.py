"""Engine self-test: finite-difference gradient checks for every differentiable op plus the conv oracle."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable, List

import numpy as np

from .engine import ops
from .engine.gradcheck import check_gradient, naive_conv2d

GRAD_TOLERANCE = 1e-4
CONV_TOLERANCE = 1e-12
FD_STEP = 1e-5
DEFAULT_TRIALS = 50


@dataclass
class CheckResult:
    name: str
    trials: int
    worst: float
    tolerance: float

    @property
    def passed(self) -> bool:
        return self.worst < self.tolerance


@dataclass
class SelfTestReport:
    results: List[CheckResult]
    seconds: float

    @property
    def passed(self) -> bool:
        return all(r.passed for r in self.results)

    def table(self) -> str:
        lines = [f"{'check':<20} {'trials':>6} {'worst':>11} {'tol':>8}  status"]
        for r in self.results:
            lines.append(f"{r.name:<20} {r.trials:>6} {r.worst:>11.3e} {r.tolerance:>8.0e}  {'PASS' if r.passed else 'FAIL'}")
        lines.append(f"{'overall':<20} {'':>6} {'':>11} {'':>8}  {'PASS' if self.passed else 'FAIL'} ({self.seconds:.1f}s)")
        return "\n".join(lines)


def _away_from_zero(a: np.ndarray, gap: float = 0.05) -> np.ndarray:
    # kinks at 0 (relu, abs) break central differences; keep samples clear of them
    return a + np.where(a >= 0, gap, -gap)


def _cases(rng: np.random.Generator) -> dict:
    """name -> (op, input factory)."""
    n = rng.standard_normal
    u = rng.uniform
    return {
        "add": (ops.add, lambda: [n((3, 4)), n((4,))]),
        "sub": (ops.sub, lambda: [n((3, 4)), n((3, 1))]),
        "mul": (ops.mul, lambda: [n((3, 4)), n((1, 4))]),
        "div": (ops.div, lambda: [n((3, 4)), u(0.5, 2.0, (3, 4)) * rng.choice([-1, 1], (3, 4))]),
        "matmul": (ops.matmul, lambda: [n((3, 4)), n((4, 2))]),
        "relu": (ops.relu, lambda: [_away_from_zero(n((3, 5)))]),
        "sigmoid": (ops.sigmoid, lambda: [3 * n((3, 5))]),
        "square": (ops.square, lambda: [n((3, 5))]),
        "abs": (ops.abs, lambda: [_away_from_zero(n((3, 5)))]),
        "abs_sum": (ops.abs_sum, lambda: [_away_from_zero(n((3, 5)))]),
        "exp": (ops.exp, lambda: [n((3, 5))]),
        "sqrt": (ops.sqrt, lambda: [u(0.2, 3.0, (3, 5))]),
        "log": (ops.log, lambda: [u(0.1, 3.0, (3, 5))]),
        "sum": (lambda x: ops.sum(x, axis=1), lambda: [n((3, 5))]),
        "mean": (lambda x: ops.mean(x, axis=(0, 2)), lambda: [n((2, 3, 4))]),
        "softmax": (ops.softmax, lambda: [2 * n((2, 5))]),
        "log_softmax": (ops.log_softmax, lambda: [2 * n((2, 5))]),
        "reshape": (lambda x: ops.reshape(x, (4, 3)), lambda: [n((2, 6))]),
        "getitem": (lambda x: ops.getitem(x, (slice(None), [0, 2, 2])), lambda: [n((2, 4))]),
        "concat": (lambda a, b: ops.concat([a, b], axis=1), lambda: [n((1, 2, 3, 3)), n((1, 1, 3, 3))]),
        "conv2d": (
            lambda x, w, b: ops.conv2d(x, w, b, stride=1, padding=1),
            lambda: [n((1, 2, 5, 5)), n((3, 2, 3, 3)), n((3,))],
        ),
        "conv2d_strided": (
            lambda x, w: ops.conv2d(x, w, stride=2, padding=0),
            lambda: [n((1, 2, 5, 5)), n((2, 2, 3, 3))],
        ),
        "avg_pool2x2": (ops.avg_pool2x2, lambda: [n((1, 2, 4, 4))]),
        "upsample_nearest2x": (ops.upsample_nearest2x, lambda: [n((1, 2, 2, 3))]),
    }


def _conv_oracle(rng: np.random.Generator, trials: int) -> CheckResult:
    worst = 0.0
    for _ in range(trials):
        c = int(rng.integers(1, 4))
        k = int(rng.integers(1, 4))
        kh = int(rng.integers(1, 4))
        stride = int(rng.integers(1, 3))
        padding = int(rng.integers(0, 2))
        size = int(rng.integers(kh, 7))
        x = rng.standard_normal((1, c, size, size))
        w = rng.standard_normal((k, c, kh, kh))
        fast = ops.conv2d(x, w, stride=stride, padding=padding).data
        worst = max(worst, float(np.max(np.abs(fast - naive_conv2d(x, w, stride, padding)))))
    return CheckResult("conv2d_oracle", trials, worst, CONV_TOLERANCE)


def run_selftest(trials: int = DEFAULT_TRIALS, seed: int = 0, progress: Callable[[CheckResult], None] = None) -> SelfTestReport:
    started = time.perf_counter()
    rng = np.random.default_rng(seed)
    results = []
    for name, (op, make) in _cases(rng).items():
        worst = max(check_gradient(op, make(), rng, FD_STEP) for _ in range(trials))
        results.append(CheckResult(name, trials, worst, GRAD_TOLERANCE))
        if progress:
            progress(results[-1])
    results.append(_conv_oracle(rng, trials))
    if progress:
        progress(results[-1])
    return SelfTestReport(results, time.perf_counter() - started)
