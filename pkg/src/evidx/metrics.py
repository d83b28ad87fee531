"""Fidelity, minimality, crispness, robustness and localization scores for binary masks."""

from __future__ import annotations

import csv
import math
import os
from dataclasses import asdict, dataclass, field, fields
from typing import Iterable, Optional, Sequence

import numpy as np

from .classifier import ClassifierModel, logits_of, probabilities
from .errors import DataError, DimensionError, ParameterError
from .robustness import sample_background

METHODS = ("medcam", "gradcam", "random")
CRISP_MARGIN = 0.1


@dataclass
class EvidenceReport:
    image_id: str
    method: str
    y: int
    conf_x: float
    conf_e: float
    decision_preserved: bool
    area_fraction: float
    bin_fraction: float
    tv_norm: float
    rob_pass_rate: float
    truth_iou: Optional[float]
    wall_seconds: float
    seed: int
    label: Optional[int] = None
    trajectory: list = field(default_factory=list, repr=False, compare=False)


CSV_FIELDS = tuple(f.name for f in fields(EvidenceReport) if f.name != "trajectory")
NUMERIC_FIELDS = (
    "conf_x",
    "conf_e",
    "area_fraction",
    "bin_fraction",
    "tv_norm",
    "rob_pass_rate",
    "truth_iou",
    "wall_seconds",
)
SUMMARY_FIELDS = ("method", "metric", "mean", "std", "n")


def _masked(image: np.ndarray, binary_mask: np.ndarray) -> np.ndarray:
    image = np.asarray(image, dtype=np.float64)
    mask = np.asarray(binary_mask, dtype=np.float64)
    if mask.shape != image.shape[-2:]:
        raise DimensionError(f"mask shape {mask.shape} does not match image {image.shape[-2:]}")
    return (image * mask).reshape((1,) + image.shape[-3:])


def decision_preservation(model: ClassifierModel, image: np.ndarray, binary_mask: np.ndarray, y: int):
    """Classify ``m * x``; return ``(argmax == y, p(y))``."""
    probs = probabilities(logits_of(model, _masked(image, binary_mask)))[0]
    return bool(int(np.argmax(probs)) == y), float(probs[y])


def robustness_rate(
    model: ClassifierModel,
    image: np.ndarray,
    binary_mask: np.ndarray,
    y: int,
    n_trials: int = 20,
    background_kind: str = "uniform_noise",
    seed: int = 0,
    pool: Optional[Sequence[np.ndarray]] = None,
    return_outcomes: bool = False,
):
    """Fraction of fresh backgrounds ``r`` for which ``m * x + (1 - m) * r`` keeps class ``y``."""
    if n_trials < 1:
        raise ParameterError(f"n_trials must be >= 1, got {n_trials}")
    image = np.asarray(image, dtype=np.float64).reshape((1,) + np.shape(image)[-3:])
    mask = np.asarray(binary_mask, dtype=np.float64)
    rng = np.random.default_rng(seed)
    batch = np.concatenate(
        [
            mask * image + (1 - mask) * sample_background(image.shape, background_kind, rng, pool, exclude=image)
            for _ in range(n_trials)
        ]
    )
    outcomes = np.argmax(logits_of(model, batch), axis=1) == y
    rate = float(outcomes.mean())
    return (rate, outcomes) if return_outcomes else rate


def truth_iou(binary_mask: np.ndarray, truth_mask: np.ndarray) -> Optional[float]:
    """Intersection over union; ``None`` when the truth region is empty."""
    a = np.asarray(binary_mask, dtype=bool)
    b = np.asarray(truth_mask, dtype=bool)
    if a.shape != b.shape:
        raise DimensionError(f"mask shape {a.shape} does not match truth {b.shape}")
    if not b.any():
        return None
    return float((a & b).sum() / (a | b).sum())


def area_fraction(binary_mask: np.ndarray) -> float:
    return float(np.asarray(binary_mask, dtype=np.float64).mean())


def crisp_fraction(values: np.ndarray, margin: float = CRISP_MARGIN) -> float:
    """Share of pixels within ``margin`` of 0 or 1."""
    v = np.asarray(values, dtype=np.float64)
    return float((np.minimum(v, 1 - v) < margin).mean())


def tv_norm(mask: np.ndarray) -> float:
    m = np.asarray(mask, dtype=np.float64)
    h, w = m.shape
    pairs = h * (w - 1) + (h - 1) * w
    return float((np.abs(np.diff(m, axis=0)).sum() + np.abs(np.diff(m, axis=1)).sum()) / pairs)


def random_mask(shape, area: float, rng: np.random.Generator) -> np.ndarray:
    """Binary mask with ``round(area * H * W)`` uniformly placed pixels."""
    h, w = shape
    k = int(round(area * h * w))
    flat = np.zeros(h * w, dtype=bool)
    flat[rng.choice(h * w, size=k, replace=False)] = True
    return flat.reshape(h, w)


def score_mask(
    model: ClassifierModel,
    image: np.ndarray,
    binary_mask: np.ndarray,
    y: int,
    *,
    image_id: str,
    method: str,
    conf_x: float,
    continuous: Optional[np.ndarray] = None,
    truth_mask: Optional[np.ndarray] = None,
    rob_trials: int = 20,
    rob_seed: int = 0,
    background_kind: str = "uniform_noise",
    pool=None,
    wall_seconds: float = 0.0,
    seed: int = 0,
    label: Optional[int] = None,
) -> EvidenceReport:
    preserved, conf_e = decision_preservation(model, image, binary_mask, y)
    rate = robustness_rate(model, image, binary_mask, y, rob_trials, background_kind, rob_seed, pool)
    iou = truth_iou(binary_mask, truth_mask) if truth_mask is not None else None
    return EvidenceReport(
        image_id=image_id,
        method=method,
        y=int(y),
        conf_x=float(conf_x),
        conf_e=conf_e,
        decision_preserved=preserved,
        area_fraction=area_fraction(binary_mask),
        bin_fraction=crisp_fraction(binary_mask if continuous is None else continuous),
        tv_norm=tv_norm(binary_mask),
        rob_pass_rate=rate,
        truth_iou=iou,
        wall_seconds=max(float(wall_seconds), 1e-9),
        seed=int(seed),
        label=label,
    )


# --- aggregation ------------------------------------------------------------


def _mean_std(values: Sequence[float]):
    # fsum keeps the result independent of input order
    n = len(values)
    mean = math.fsum(values) / n
    std = math.sqrt(math.fsum((v - mean) ** 2 for v in values) / n)
    return mean, std


def aggregate(reports: Iterable[EvidenceReport]) -> list:
    """Per-method mean/std of every numeric field, plus preservation rate and confidence delta.

    Rows are dicts keyed by ``SUMMARY_FIELDS``, sorted by (method, metric).
    """
    reports = list(reports)
    if not reports:
        raise DataError("aggregate needs at least one report")
    rows = []
    for method in sorted({r.method for r in reports}):
        group = [r for r in reports if r.method == method]
        for metric in NUMERIC_FIELDS:
            values = [float(getattr(r, metric)) for r in group if getattr(r, metric) is not None]
            if values:
                mean, std = _mean_std(values)
                rows.append({"method": method, "metric": metric, "mean": mean, "std": std, "n": len(values)})
        mean, std = _mean_std([1.0 if r.decision_preserved else 0.0 for r in group])
        rows.append({"method": method, "metric": "preservation_rate", "mean": mean, "std": std, "n": len(group)})
        delta = math.fsum(r.conf_e for r in group) / len(group) - math.fsum(r.conf_x for r in group) / len(group)
        rows.append({"method": method, "metric": "confidence_delta", "mean": delta, "std": 0.0, "n": len(group)})
    rows.sort(key=lambda r: (r["method"], r["metric"]))
    return rows


def summary_value(rows: Sequence[dict], method: str, metric: str) -> float:
    for row in rows:
        if row["method"] == method and row["metric"] == metric:
            return float(row["mean"])
    raise KeyError((method, metric))


# --- CSV --------------------------------------------------------------------


def _fmt(value) -> str:
    if value is None:
        return ""
    if isinstance(value, bool):
        return "1" if value else "0"
    if isinstance(value, float):
        return repr(value)
    return str(value)


def report_row(report: EvidenceReport) -> dict:
    data = asdict(report)
    return {k: _fmt(data[k]) for k in CSV_FIELDS}


def write_reports(path: os.PathLike, reports: Iterable[EvidenceReport], append: bool = False) -> None:
    exists = os.path.exists(path) and os.path.getsize(path) > 0
    with open(path, "a" if append else "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=CSV_FIELDS, lineterminator="\n")
        if not (append and exists):
            writer.writeheader()
        for r in reports:
            writer.writerow(report_row(r))


def read_reports(path: os.PathLike) -> list:
    out = []
    with open(path, newline="") as fh:
        for row in csv.DictReader(fh):
            out.append(
                EvidenceReport(
                    image_id=row["image_id"],
                    method=row["method"],
                    y=int(row["y"]),
                    conf_x=float(row["conf_x"]),
                    conf_e=float(row["conf_e"]),
                    decision_preserved=row["decision_preserved"] == "1",
                    area_fraction=float(row["area_fraction"]),
                    bin_fraction=float(row["bin_fraction"]),
                    tv_norm=float(row["tv_norm"]),
                    rob_pass_rate=float(row["rob_pass_rate"]),
                    truth_iou=float(row["truth_iou"]) if row["truth_iou"] else None,
                    wall_seconds=float(row["wall_seconds"]),
                    seed=int(row["seed"]),
                    label=int(row["label"]) if row.get("label") else None,
                )
            )
    return out


def write_summary(path: os.PathLike, rows: Sequence[dict]) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=SUMMARY_FIELDS, lineterminator="\n")
        writer.writeheader()
        for row in rows:
            writer.writerow({k: _fmt(row[k]) for k in SUMMARY_FIELDS})
