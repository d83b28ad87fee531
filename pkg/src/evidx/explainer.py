"""Per-image evidence-mask optimization.

A small U-Net (``MaskNet``) is freshly initialised for every image and
trained so that the masked image ``e = m * x`` reproduces the frozen
classifier's activations, output distribution and top-1 label, while the
mask stays small, near-binary, smooth, and sufficient on its own when the
unmasked region is replaced by random background.
"""

from __future__ import annotations

import logging
import math
import time
from collections import OrderedDict
from dataclasses import dataclass, field, replace
from typing import Optional, Sequence

import numpy as np

from . import losses
from .classifier import ClassifierModel, forward_with_taps, probabilities
from .engine import Tape, Tensor, adam_step, backward, no_grad, ops
from .engine.optim import OptimizerState
from .errors import ContractError, DimensionError, DivergenceError, NumericError, ParameterError
from .metrics import score_mask
from .robustness import BACKGROUND_KINDS, sample_background

logger = logging.getLogger(__name__)

TERMS = ("act", "ce", "kl", "area", "bin", "tv", "rob")

# group ratios (fidelity : minimality : robustness)
PRESETS = {
    "bach": (10.0, 100.0, 10.0),
    "ham": (10.0, 150.0, 20.0),
    "default": (10.0, 100.0, 10.0),
}
# within-group shares; normalised so a group's weights sum to its ratio entry
FIDELITY_SPLIT = {"act": 1.0, "ce": 1.0, "kl": 1.0}
MINIMALITY_SPLIT = {"area": 1.0, "bin": 0.5, "tv": 0.5}


def preset_lambdas(name: str) -> dict:
    if name not in PRESETS:
        raise ParameterError(f"unknown preset {name!r}; choose from {sorted(PRESETS)}")
    fid, mini, rob = PRESETS[name]
    out = {}
    for split, weight in ((FIDELITY_SPLIT, fid), (MINIMALITY_SPLIT, mini)):
        total = sum(split.values())
        out.update({k: weight * v / total for k, v in split.items()})
    out["rob"] = rob
    return out


@dataclass
class ExplainerConfig:
    lambda_act: float = 0.0
    lambda_ce: float = 0.0
    lambda_kl: float = 0.0
    lambda_area: float = 0.0
    lambda_bin: float = 0.0
    lambda_tv: float = 0.0
    lambda_rob: float = 0.0
    alpha_per_layer: dict = field(default_factory=lambda: {"block1": 1.0, "block2": 1.0, "block3": 1.0})
    distance_kind: str = "mse"
    steps: int = 300
    lr: float = 1e-3
    seed: int = 0
    binarize_threshold: float = 0.5
    rob_samples_per_step: int = 1
    background_kind: str = "uniform_noise"
    init_mask_bias: float = 2.0

    @classmethod
    def from_preset(cls, name: str = "default", **overrides) -> "ExplainerConfig":
        lambdas = {f"lambda_{k}": v for k, v in preset_lambdas(name).items()}
        cfg = cls(**lambdas)
        cfg = replace(cfg, **overrides)
        cfg.validate()
        return cfg

    def lambdas(self) -> dict:
        return {t: getattr(self, f"lambda_{t}") for t in TERMS}

    def validate(self) -> None:
        for term, value in self.lambdas().items():
            if not (value >= 0 and math.isfinite(value)):
                raise ParameterError(f"lambda_{term} must be a finite non-negative number, got {value}")
        if not (self.lambda_act > 0 or self.lambda_ce > 0 or self.lambda_kl > 0):
            raise ParameterError("at least one of lambda_act, lambda_ce, lambda_kl must be positive")
        if any(a < 0 for a in self.alpha_per_layer.values()):
            raise ParameterError("alpha_per_layer weights must be non-negative")
        if self.distance_kind not in losses.DISTANCE_KINDS:
            raise ParameterError(f"distance_kind must be one of {losses.DISTANCE_KINDS}, got {self.distance_kind!r}")
        if int(self.steps) != self.steps or self.steps < 1:
            raise ParameterError(f"steps must be a positive integer, got {self.steps}")
        if not self.lr > 0:
            raise ParameterError(f"lr must be positive, got {self.lr}")
        if not 0 < self.binarize_threshold < 1:
            raise ParameterError(f"binarize_threshold must be in (0, 1), got {self.binarize_threshold}")
        if self.rob_samples_per_step < 0:
            raise ParameterError(f"rob_samples_per_step must be >= 0, got {self.rob_samples_per_step}")
        if self.background_kind not in BACKGROUND_KINDS:
            raise ParameterError(f"background_kind must be one of {BACKGROUND_KINDS}, got {self.background_kind!r}")


@dataclass
class LossBreakdown:
    act: float
    kl: float
    ce: float
    area: float
    bin: float
    tv: float
    rob: float
    total: float
    step: int

    def weighted_sum(self, config: ExplainerConfig) -> float:
        return sum(lam * getattr(self, term) for term, lam in config.lambdas().items())


@dataclass
class Mask:
    values: np.ndarray
    threshold: float = 0.5

    @property
    def binarized(self) -> np.ndarray:
        return self.values >= self.threshold


# --- mask network -----------------------------------------------------------


class MaskNet:
    """Two-level U-Net: conv encoder with average pooling, nearest-neighbour decoder with skips.

    enc1 (in->16) -> pool -> enc2 (16->32) -> pool -> bottleneck (32->32)
    -> up, concat enc2 -> dec1 (64->16) -> up, concat enc1 -> dec2 (32->16)
    -> 1x1 head -> sigmoid
    """

    def __init__(self, seed: int, in_channels: int = 3, widths=(16, 32), bottleneck: int = 32, decoder=(16, 16), head_bias: float = 0.0):
        rng = np.random.default_rng(seed)
        w1, w2 = widths
        d1, d2 = decoder
        shapes = OrderedDict(
            enc1=(w1, in_channels, 3, 3),
            enc2=(w2, w1, 3, 3),
            bott=(bottleneck, w2, 3, 3),
            dec1=(d1, bottleneck + w2, 3, 3),
            dec2=(d2, d1 + w1, 3, 3),
            head=(1, d2, 1, 1),
        )
        self.params = OrderedDict()
        for name, shape in shapes.items():
            fan_in = shape[1] * shape[2] * shape[3]
            gain = 1.0 if name == "head" else 2.0
            self.params[f"{name}.w"] = Tensor(rng.standard_normal(shape) * math.sqrt(gain / fan_in), True)
            self.params[f"{name}.b"] = Tensor(np.full(shape[0], head_bias if name == "head" else 0.0), True)

    def parameters(self) -> list:
        return list(self.params.values())

    def _conv(self, name, x, padding=1):
        return ops.conv2d(x, self.params[f"{name}.w"], self.params[f"{name}.b"], padding=padding)

    def __call__(self, x) -> Tensor:
        x = x if isinstance(x, Tensor) else Tensor(x)
        if x.ndim != 4 or x.shape[2] % 4 or x.shape[3] % 4:
            raise DimensionError(f"MaskNet needs NCHW input with H, W divisible by 4, got {x.shape}")
        s1 = ops.relu(self._conv("enc1", x))
        s2 = ops.relu(self._conv("enc2", ops.avg_pool2x2(s1)))
        b = ops.relu(self._conv("bott", ops.avg_pool2x2(s2)))
        d1 = ops.relu(self._conv("dec1", ops.concat([ops.upsample_nearest2x(b), s2], axis=1)))
        d2 = ops.relu(self._conv("dec2", ops.concat([ops.upsample_nearest2x(d1), s1], axis=1)))
        return ops.sigmoid(self._conv("head", d2, padding=0))


def apply_mask(image, mask) -> Tensor:
    """``e = m * x`` with the (H, W) or (1, 1, H, W) mask broadcast over channels."""
    x = image if isinstance(image, Tensor) else Tensor(image)
    m = mask if isinstance(mask, Tensor) else Tensor(mask.values if isinstance(mask, Mask) else mask)
    if x.ndim != 4:
        raise DimensionError(f"apply_mask expects a (1, C, H, W) image, got {x.shape}")
    if m.shape[-2:] != x.shape[-2:]:
        raise DimensionError(f"mask spatial shape {m.shape[-2:]} does not match image {x.shape[-2:]}")
    if m.ndim == 2:
        m = ops.reshape(m, (1, 1) + m.shape)
    return ops.mul(m, x)


# --- optimisation -----------------------------------------------------------


def _prepare(image) -> np.ndarray:
    x = image.data if isinstance(image, Tensor) else np.asarray(image, dtype=np.float64)
    if x.ndim == 3:
        x = x[None]
    return x


def explain(
    image,
    model: ClassifierModel,
    config: ExplainerConfig,
    pool: Optional[Sequence[np.ndarray]] = None,
    truth_mask: Optional[np.ndarray] = None,
    image_id: str = "",
    rob_trials: int = 20,
    label: Optional[int] = None,
):
    """Optimise a fresh MaskNet for one image.

    Returns ``(Mask, e, EvidenceReport)`` where ``e`` is the image under the
    binarised mask and the report carries the full per-step loss trajectory.
    """
    config.validate()
    if not model.frozen:
        raise ContractError("explain() needs a frozen classifier")
    started = time.perf_counter()
    x = _prepare(image)
    expected = (1, model.in_channels, model.image_size, model.image_size)
    if x.shape != expected:
        raise DimensionError(f"image shape {x.shape} does not match classifier input {expected}")

    logits_x, acts_x = forward_with_taps(model, Tensor(x))
    logits_x = logits_x.data
    acts_x = OrderedDict((k, v.data) for k, v in acts_x.items())
    y = int(np.argmax(logits_x[0]))
    conf_x = float(probabilities(logits_x)[0, y])

    seeds = _seed_streams(config.seed)
    net = MaskNet(int(seeds[0].generate_state(1)[0]), in_channels=x.shape[1], head_bias=config.init_mask_bias)
    bg_rng = np.random.default_rng(seeds[1])
    params = net.parameters()
    state = OptimizerState(learning_rate=config.lr)
    lambdas = config.lambdas()
    x_t = Tensor(x)
    trajectory = []

    for step in range(config.steps):
        for p in params:
            p.grad = None
        backgrounds = [
            sample_background(x.shape, config.background_kind, bg_rng, pool, exclude=x)
            for _ in range(max(config.rob_samples_per_step, 1))
        ]
        try:
            with Tape() as tape:
                m = net(x_t)
                terms = _objective_terms(m, x, x_t, model, acts_x, logits_x, y, backgrounds, config, lambdas)
                total = Tensor(0.0)
                for t in TERMS:
                    if lambdas[t]:
                        total = ops.add(total, ops.mul(terms[t], lambdas[t]))
        except NumericError as exc:
            # the engine refuses non-finite inputs, so a blow-up surfaces here first
            raise DivergenceError(step, trajectory[-1] if trajectory else None) from exc
        values = {t: terms[t].item() for t in TERMS}
        record = LossBreakdown(**values, total=total.item(), step=step)
        if not math.isfinite(record.total):
            raise DivergenceError(step, trajectory[-1] if trajectory else None)
        trajectory.append(record)
        backward(total, tape)
        adam_step(params, [p.grad for p in params], state)

    with no_grad():
        m_final = net(x_t).data[0, 0]
    mask = Mask(m_final, config.binarize_threshold)
    binary = mask.binarized
    e = x[0] * binary
    rob_seed = robustness_seed(config.seed)
    report = score_mask(
        model,
        x[0],
        binary,
        y,
        image_id=image_id,
        method="medcam",
        conf_x=conf_x,
        continuous=m_final,
        truth_mask=truth_mask,
        rob_trials=rob_trials,
        rob_seed=rob_seed,
        background_kind=config.background_kind,
        pool=pool,
        wall_seconds=time.perf_counter() - started,
        seed=config.seed,
        label=label,
    )
    report.trajectory = trajectory
    return mask, e, report


def _seed_streams(seed: int) -> list:
    # mask-net init, per-step backgrounds, final robustness check
    return np.random.SeedSequence(seed).spawn(3)


def robustness_seed(seed: int) -> int:
    """Seed of the held-out robustness backgrounds used to score a run with ``seed``."""
    return int(_seed_streams(seed)[2].generate_state(1)[0])


def _objective_terms(m, x, x_t, model, acts_x, logits_x, y, backgrounds, config, lambdas) -> dict:
    """All seven loss terms; zero-weight terms are evaluated off the tape."""

    def maybe_recorded(term):
        return _Recording(lambdas[term] > 0)

    terms = {}
    need_e = any(lambdas[t] for t in ("act", "ce", "kl"))
    with _Recording(need_e):
        e = apply_mask(x_t, m)
        logits_e, acts_e = forward_with_taps(model, e)
    with maybe_recorded("act"):
        terms["act"] = losses.loss_act(acts_x, acts_e, config.alpha_per_layer, config.distance_kind)
    with maybe_recorded("kl"):
        terms["kl"] = losses.loss_kl(logits_x, logits_e)
    with maybe_recorded("ce"):
        terms["ce"] = losses.loss_ce(logits_e, y)
    with maybe_recorded("area"):
        terms["area"] = losses.loss_area(m)
    with maybe_recorded("bin"):
        terms["bin"] = losses.loss_bin(m)
    with maybe_recorded("tv"):
        terms["tv"] = losses.loss_tv(m)
    with maybe_recorded("rob"):
        if config.rob_samples_per_step > 0:
            terms["rob"] = losses.loss_rob(x, m, backgrounds, model, y)
        else:
            terms["rob"] = Tensor(0.0)
    return terms


class _Recording:
    """Context that keeps recording when ``on`` and suspends it otherwise."""

    def __init__(self, on: bool):
        self.ctx = None if on else no_grad()

    def __enter__(self):
        if self.ctx is not None:
            self.ctx.__enter__()

    def __exit__(self, *exc):
        if self.ctx is not None:
            self.ctx.__exit__(*exc)
