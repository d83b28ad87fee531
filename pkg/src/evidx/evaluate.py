"""Batch comparison of Med-CAM, Grad-CAM and random masks at matched area."""

from __future__ import annotations

import time
import zlib
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .classifier import ClassifierModel, dumps, loads
from .errors import ParameterError
from .explainer import ExplainerConfig, explain, robustness_seed
from .gradcam import DEFAULT_LAYER, gradcam, threshold_heatmap
from .metrics import METHODS, random_mask, score_mask


@dataclass
class EvalItem:
    image_id: str
    pixels: np.ndarray
    label: Optional[int] = None
    truth_mask: Optional[np.ndarray] = None


def parse_methods(text: str) -> tuple:
    methods = tuple(m.strip() for m in text.split(",") if m.strip())
    bad = [m for m in methods if m not in METHODS]
    if bad or not methods:
        raise ParameterError(f"unknown methods {bad or text!r}; choose from {', '.join(METHODS)}")
    return methods


def evaluate_image(
    model: ClassifierModel,
    item: EvalItem,
    config: ExplainerConfig,
    methods: Sequence[str] = METHODS,
    pool=None,
    layer: str = DEFAULT_LAYER,
    rob_trials: int = 20,
) -> list:
    """Reports for one image, in ``methods`` order.

    Med-CAM always runs because its binarized area sets the budget for the
    other two methods.
    """
    _, _, med = explain(
        item.pixels, model, config, pool=pool, truth_mask=item.truth_mask, image_id=item.image_id, rob_trials=rob_trials, label=item.label
    )
    area = med.area_fraction
    x = item.pixels
    conf_x = med.conf_x
    # the same robustness stream for every method keeps the comparison paired
    rob_seed = robustness_seed(config.seed)
    common = dict(
        image_id=item.image_id,
        conf_x=conf_x,
        truth_mask=item.truth_mask,
        rob_trials=rob_trials,
        rob_seed=rob_seed,
        background_kind=config.background_kind,
        pool=pool,
        seed=config.seed,
        label=item.label,
    )
    out = []
    for method in methods:
        if method == "medcam":
            out.append(med)
            continue
        started = time.perf_counter()
        if method == "gradcam":
            heat = gradcam(model, x, med.y, layer)
            binary = threshold_heatmap(heat, area) if area > 0 else np.zeros(x.shape[-2:], dtype=bool)
            continuous = heat.values
        else:
            rng = np.random.default_rng([config.seed, zlib.crc32(item.image_id.encode())])
            binary = random_mask(x.shape[-2:], area, rng)
            continuous = None
        out.append(
            score_mask(
                model, x, binary, med.y, method=method, continuous=continuous, wall_seconds=time.perf_counter() - started, **common
            )
        )
    return out


def _worker(args):
    blob, item, config, methods, pool, layer, rob_trials = args
    return evaluate_image(loads(blob), item, config, methods, pool, layer, rob_trials)


def evaluate(
    model: ClassifierModel,
    items: Sequence[EvalItem],
    config: ExplainerConfig,
    methods: Sequence[str] = METHODS,
    pool=None,
    workers: int = 1,
    layer: str = DEFAULT_LAYER,
    rob_trials: int = 20,
    progress=None,
) -> list:
    """All reports, stably sorted by image id (method order kept within an image)."""
    if workers < 1:
        raise ParameterError(f"workers must be >= 1, got {workers}")
    config.validate()
    results = []
    if workers == 1:
        for item in items:
            reports = evaluate_image(model, item, config, methods, pool, layer, rob_trials)
            results.append(reports)
            if progress:
                progress(reports)
    else:
        blob = dumps(model)
        jobs = [(blob, item, config, methods, pool, layer, rob_trials) for item in items]
        with ProcessPoolExecutor(max_workers=workers) as ex:
            for reports in ex.map(_worker, jobs):
                results.append(reports)
                if progress:
                    progress(reports)
    flat = [r for reports in results for r in reports]
    flat.sort(key=lambda r: r.image_id)
    return flat

