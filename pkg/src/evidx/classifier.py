"""Small CNN classifier with named post-ReLU taps, training and EVDX serialization.

Architecture: a fixed input shift (pixels - 0.5), then ``len(channels)``
blocks of (3x3 conv, pad 1) -> ReLU -> 2x2 average pool, then a global
average pool and a linear head. The post-ReLU
output of block ``i`` is exposed as tap ``block{i+1}``.
"""

from __future__ import annotations

import hashlib
import json
import logging
import struct
from collections import OrderedDict
from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np

from .engine import Adam, Tape, Tensor, backward, ops
from .errors import ContractError, DataError, DimensionError, FormatError, ParameterError

logger = logging.getLogger(__name__)

MAGIC = b"EVDX"
FORMAT_VERSION = 1

ActivationSet = "OrderedDict[str, Tensor]"


@dataclass
class ClassifierModel:
    params: "OrderedDict[str, Tensor]"
    channels: tuple = (16, 32, 64)
    num_classes: int = 4
    in_channels: int = 3
    image_size: int = 64
    input_offset: float = 0.5
    frozen: bool = False

    @property
    def tap_names(self) -> tuple:
        return tuple(f"block{i + 1}" for i in range(len(self.channels)))

    def parameters(self) -> list:
        return list(self.params.values())

    def freeze(self) -> "ClassifierModel":
        for p in self.params.values():
            p.requires_grad = False
            p.grad = None
        self.frozen = True
        return self

    def descriptor(self) -> dict:
        return {
            "arch": "conv-relu-avgpool",
            "channels": list(self.channels),
            "num_classes": self.num_classes,
            "in_channels": self.in_channels,
            "image_size": self.image_size,
            "input_offset": self.input_offset,
            "params": [[name, list(p.shape)] for name, p in self.params.items()],
        }


def init_classifier(
    seed: int = 0, channels: Sequence[int] = (16, 32, 64), num_classes: int = 4, in_channels: int = 3, image_size: int = 64
) -> ClassifierModel:
    if image_size % (2 ** len(channels)):
        raise DimensionError(f"image_size {image_size} must be divisible by {2 ** len(channels)}")
    rng = np.random.default_rng(seed)
    params = OrderedDict()
    c_in = in_channels
    for i, c_out in enumerate(channels):
        params[f"conv{i + 1}.w"] = Tensor(rng.standard_normal((c_out, c_in, 3, 3)) * np.sqrt(2.0 / (9 * c_in)), True)
        params[f"conv{i + 1}.b"] = Tensor(np.zeros(c_out), True)
        c_in = c_out
    params["head.w"] = Tensor(rng.standard_normal((c_in, num_classes)) * np.sqrt(1.0 / c_in), True)
    params["head.b"] = Tensor(np.zeros(num_classes), True)
    return ClassifierModel(params, tuple(channels), num_classes, in_channels, image_size)


def forward_with_taps(model: ClassifierModel, image) -> tuple:
    """Return ``(logits[N, num_classes], acts)`` from one pass.

    ``acts`` maps every tap name to its post-ReLU activation tensor.
    """
    x = image if isinstance(image, Tensor) else Tensor(image)
    expected = (model.in_channels, model.image_size, model.image_size)
    if x.ndim != 4 or x.shape[1:] != expected:
        raise DimensionError(f"classifier expects input (N, {', '.join(map(str, expected))}), got {x.shape}")
    acts = OrderedDict()
    h = ops.sub(x, model.input_offset)
    for i, name in enumerate(model.tap_names):
        h = ops.relu(ops.conv2d(h, model.params[f"conv{i + 1}.w"], model.params[f"conv{i + 1}.b"], padding=1))
        acts[name] = h
        h = ops.avg_pool2x2(h)
    return _head(model, h), acts


def _head(model: ClassifierModel, h: Tensor) -> Tensor:
    pooled = ops.mean(h, axis=(2, 3))
    return ops.matmul(pooled, model.params["head.w"]) + model.params["head.b"]


def forward_from_tap(model: ClassifierModel, tap: str, activation) -> Tensor:
    """Logits computed from a given post-ReLU activation at ``tap`` onward."""
    if tap not in model.tap_names:
        raise ContractError(f"unknown tap {tap!r}; available: {list(model.tap_names)}")
    start = model.tap_names.index(tap)
    h = ops.avg_pool2x2(activation)
    for i in range(start + 1, len(model.channels)):
        h = ops.avg_pool2x2(ops.relu(ops.conv2d(h, model.params[f"conv{i + 1}.w"], model.params[f"conv{i + 1}.b"], padding=1)))
    return _head(model, h)


def logits_of(model: ClassifierModel, images: np.ndarray) -> np.ndarray:
    """Inference-only logits for a batch of raw arrays."""
    return forward_with_taps(model, Tensor(images))[0].data


def predict(model: ClassifierModel, images: np.ndarray) -> np.ndarray:
    # argmax returns the first maximum, i.e. lowest class index on ties
    return np.argmax(logits_of(model, images), axis=1)


def probabilities(logits: np.ndarray) -> np.ndarray:
    z = np.exp(logits - logits.max(axis=-1, keepdims=True))
    return z / z.sum(axis=-1, keepdims=True)


def accuracy(model: ClassifierModel, images: np.ndarray, labels: np.ndarray, batch_size: int = 100) -> float:
    hits = 0
    for start in range(0, len(images), batch_size):
        hits += int((predict(model, images[start : start + batch_size]) == labels[start : start + batch_size]).sum())
    return hits / len(images)


@dataclass
class TrainResult:
    model: ClassifierModel
    train_accuracy: float
    test_accuracy: Optional[float]
    epoch_hashes: list = field(default_factory=list)
    epoch_losses: list = field(default_factory=list)


def _stack(corpus) -> tuple:
    images = np.stack([item.pixels for item in corpus])
    labels = np.array([item.label for item in corpus], dtype=int)
    return images, labels


def train_classifier(
    corpus,
    epochs: int = 20,
    lr: float = 3e-3,
    seed: int = 42,
    test_corpus=None,
    batch_size: int = 32,
    num_classes: int = 4,
    channels: Sequence[int] = (16, 32, 64),
    label_smoothing: float = 0.1,
) -> TrainResult:
    """Mini-batch Adam on label-smoothed softmax cross-entropy with random horizontal/vertical flips.

    Smoothing keeps logit margins bounded, which keeps the explainer's
    fidelity losses well-scaled on heavily masked inputs.

    All randomness (init, shuffling, flips) comes from one generator seeded by
    ``seed``; the returned model is frozen.
    """
    if not corpus:
        raise DataError("training corpus is empty")
    images, labels = _stack(corpus)
    counts = np.bincount(labels, minlength=num_classes)
    if len(counts) > num_classes or (counts == 0).any():
        raise DataError(f"every class 0..{num_classes - 1} needs at least one image, counts per class: {counts.tolist()}")
    if (counts < 50).any():
        logger.warning("some classes have fewer than 50 images: %s", counts.tolist())
    rng = np.random.default_rng(seed)
    model = init_classifier(int(rng.integers(2**31)), channels, num_classes, images.shape[1], images.shape[2])
    opt = Adam(model.parameters(), lr=lr)
    if not 0 <= label_smoothing < 1:
        raise ParameterError(f"label_smoothing must be in [0, 1), got {label_smoothing}")
    onehot = np.eye(num_classes) * (1 - label_smoothing) + label_smoothing / num_classes
    result = TrainResult(model, 0.0, None)
    for epoch in range(epochs):
        order = rng.permutation(len(images))
        total = 0.0
        for start in range(0, len(order), batch_size):
            idx = order[start : start + batch_size]
            batch = images[idx].copy()
            flips = rng.random((len(idx), 2)) < 0.5
            batch[flips[:, 0]] = batch[flips[:, 0]][..., ::-1]
            batch[flips[:, 1]] = batch[flips[:, 1]][..., ::-1, :]
            opt.zero_grad()
            with Tape() as tape:
                logits, _ = forward_with_taps(model, Tensor(batch))
                logp = ops.log_softmax(logits)
                loss = -ops.sum(ops.mul(logp, onehot[labels[idx]])) * (1.0 / len(idx))
            backward(loss, tape)
            opt.step()
            total += loss.item() * len(idx)
        result.epoch_losses.append(total / len(images))
        result.epoch_hashes.append(weight_hash(model))
        logger.info("epoch %d loss %.4f", epoch + 1, result.epoch_losses[-1])
    model.freeze()
    result.train_accuracy = accuracy(model, images, labels)
    if test_corpus:
        test_images, test_labels = _stack(test_corpus)
        result.test_accuracy = accuracy(model, test_images, test_labels)
    return result


# --- serialization ----------------------------------------------------------
# layout: b"EVDX" | u8 version | u32 LE descriptor length | descriptor JSON | f64 LE weights


def dumps(model: ClassifierModel) -> bytes:
    desc = json.dumps(model.descriptor(), sort_keys=True).encode()
    weights = b"".join(np.ascontiguousarray(p.data, dtype="<f8").tobytes() for p in model.params.values())
    return MAGIC + struct.pack("<BI", FORMAT_VERSION, len(desc)) + desc + weights


def loads(blob: bytes) -> ClassifierModel:
    if len(blob) < 9:
        raise FormatError(f"model file truncated: {len(blob)} bytes, header needs 9")
    if blob[:4] != MAGIC:
        raise FormatError(f"bad magic: expected {MAGIC!r}, found {blob[:4]!r}")
    version, desc_len = struct.unpack("<BI", blob[4:9])
    if version != FORMAT_VERSION:
        raise FormatError(f"unsupported format version: expected {FORMAT_VERSION}, found {version}")
    if len(blob) < 9 + desc_len:
        raise FormatError("model file truncated inside architecture descriptor")
    try:
        desc = json.loads(blob[9 : 9 + desc_len].decode())
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"corrupt architecture descriptor: {exc}") from None
    shapes = [(name, tuple(shape)) for name, shape in desc["params"]]
    need = sum(int(np.prod(s)) for _, s in shapes) * 8
    payload = blob[9 + desc_len :]
    if len(payload) != need:
        raise FormatError(f"weight payload is {len(payload)} bytes, expected {need}")
    params = OrderedDict()
    offset = 0
    for name, shape in shapes:
        n = int(np.prod(shape))
        params[name] = Tensor(np.frombuffer(payload, dtype="<f8", count=n, offset=offset).reshape(shape).astype(np.float64))
        offset += n * 8
    model = ClassifierModel(
        params, tuple(desc["channels"]), desc["num_classes"], desc["in_channels"], desc["image_size"], desc["input_offset"]
    )
    return model.freeze()


def save_model(model: ClassifierModel, path) -> None:
    with open(path, "wb") as fh:
        fh.write(dumps(model))


def load_model(path) -> ClassifierModel:
    with open(path, "rb") as fh:
        return loads(fh.read())


def weight_hash(model: ClassifierModel) -> str:
    return hashlib.sha256(dumps(model)).hexdigest()
