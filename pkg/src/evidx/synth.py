"""Procedural four-class "lesion" corpus with pixel-exact evidence masks.

Class 0 is background only, class 1 a bright disk, class 2 a dark annulus and
class 3 an oriented high-frequency grating (a cluster of parallel streaks).
Every image carries textured multi-octave noise, a random amount of
per-pixel grain and 0-3 distractor polygons whose number, placement and
colour are drawn before (and independently of) the label. Half of the images
are also seen through a circular field stop with pure black outside, as in
fundus or dermoscopy photographs; the stop never covers the class shape.
Black regions are therefore ordinary content for a classifier trained on
this corpus, which is what makes zero-filled masked images meaningful.
"""

from __future__ import annotations

import csv
import os
from dataclasses import dataclass
from pathlib import Path
from typing import Iterable, Optional

import numpy as np

from . import netpbm
from .errors import DataError, ParameterError

NUM_CLASSES = 4
CLASS_NAMES = ("normal", "blob", "ring", "streaks")
MIN_IMAGE_SIZE = 32
MANIFEST_NAME = "manifest.csv"
MANIFEST_FIELDS = ("filename", "label", "seed", "truth_mask_filename")


@dataclass
class SynthImage:
    pixels: np.ndarray  # (3, H, W) in [0, 1]
    label: int
    truth_mask: np.ndarray  # (H, W) bool
    seed: int
    n_distractors: int = 0
    image_id: str = ""

    def batch(self) -> np.ndarray:
        return self.pixels[None]


def image_seed(corpus_seed: int, index: int) -> int:
    return int(np.random.SeedSequence([corpus_seed, index]).generate_state(1)[0])


def _value_noise(rng: np.random.Generator, size: int, cells: int) -> np.ndarray:
    grid = rng.random((cells + 1, cells + 1))
    pos = np.linspace(0, cells, size, endpoint=False) + 0.5 * cells / size
    i0 = np.floor(pos).astype(int)
    f = pos - i0
    f = f * f * (3 - 2 * f)
    top = grid[i0][:, i0] * (1 - f)[None, :] + grid[i0][:, i0 + 1] * f[None, :]
    bot = grid[i0 + 1][:, i0] * (1 - f)[None, :] + grid[i0 + 1][:, i0 + 1] * f[None, :]
    return top * (1 - f)[:, None] + bot * f[:, None]


def _background(rng: np.random.Generator, size: int) -> np.ndarray:
    lum = np.zeros((size, size))
    amp_total = 0.0
    for cells, amp in ((3, 0.5), (6, 0.3), (12, 0.15), (24, 0.05)):
        lum += amp * _value_noise(rng, size, cells)
        amp_total += amp
    lum /= amp_total
    # keep the smooth part inside ~[0.15, 0.85] so it never mimics the shapes
    tint = rng.uniform(0.4, 0.6, size=3)
    contrast = rng.uniform(0.3, 0.6)
    img = tint[:, None, None] + contrast * (lum[None] - 0.5) + 0.08 * (_value_noise(rng, size, 8)[None] - 0.5)
    grain = rng.uniform(0.0, 1.0)
    img = (1 - grain) * img + grain * rng.random((3, size, size))
    return np.clip(img, 0.0, 1.0)


def _coords(size: int):
    yy, xx = np.mgrid[0:size, 0:size]
    return yy + 0.5, xx + 0.5


def _distractor(rng: np.random.Generator, size: int) -> np.ndarray:
    s = size / 64
    yy, xx = _coords(size)
    cy, cx = rng.uniform(0, size, size=2)
    if rng.random() < 0.5:
        hh, hw = rng.uniform(3, 8, size=2) * s
        return (np.abs(yy - cy) <= hh) & (np.abs(xx - cx) <= hw)
    pts = np.array([cy, cx]) + rng.uniform(-10, 10, size=(3, 2)) * s

    def cross(a, b, py, px):
        return (b[1] - a[1]) * (py - a[0]) - (b[0] - a[0]) * (px - a[1])

    orient = np.sign(cross(pts[0], pts[1], pts[2][0], pts[2][1])) or 1.0
    inside = np.ones((size, size), dtype=bool)
    for a, b in ((pts[0], pts[1]), (pts[1], pts[2]), (pts[2], pts[0])):
        inside &= cross(a, b, yy, xx) * orient >= 0
    return inside


def _center(rng, size, reach, fits):
    # rejection-sample a centre that keeps the shape inside the image and the field stop
    for _ in range(100_000):
        cy, cx = rng.uniform(reach, size - reach, size=2)
        if fits(cy, cx, reach):
            return cy, cx
    raise DataError(f"no placement for a shape of reach {reach:.1f} at image size {size}")


def _blob(rng, size, fits):
    s = size / 64
    r = rng.uniform(6, 10) * s
    cy, cx = _center(rng, size, r + 2, fits)
    yy, xx = _coords(size)
    region = (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r
    colour = rng.uniform(0.9, 1.0, size=3)
    return region, colour[:, None, None] * np.ones((3, size, size)), {"radius": r}


def _ring(rng, size, fits):
    s = size / 64
    outer = rng.uniform(8, 12) * s
    inner = outer - rng.uniform(2.5, 4.0) * s
    cy, cx = _center(rng, size, outer + 2, fits)
    yy, xx = _coords(size)
    d2 = (yy - cy) ** 2 + (xx - cx) ** 2
    region = (d2 <= outer**2) & (d2 > inner**2)
    colour = rng.uniform(0.0, 0.1, size=3)
    return region, colour[:, None, None] * np.ones((3, size, size)), {"radius": outer}


def _streaks(rng, size, fits):
    s = size / 64
    length = rng.uniform(18, 28) * s
    period = 4.0 * s
    width = rng.integers(3, 5) * period
    theta = rng.uniform(0, np.pi)
    reach = 0.5 * np.hypot(length, width) + 2
    cy, cx = _center(rng, size, reach, fits)
    yy, xx = _coords(size)
    u = (xx - cx) * np.cos(theta) + (yy - cy) * np.sin(theta)
    v = -(xx - cx) * np.sin(theta) + (yy - cy) * np.cos(theta)
    region = (np.abs(u) <= length / 2) & (np.abs(v) <= width / 2)
    stripes = np.mod(v + width / 2, period) < period / 2
    values = np.where(stripes, 1.0, 0.0)
    return region, np.broadcast_to(values, (3, size, size)), {"length": length}


_SHAPES = {1: _blob, 2: _ring, 3: _streaks}
FIELD_STOP_PROB = 0.5
BLACK_DISTRACTOR_PROB = 0.25


def _field_stop(rng, size):
    """Circle (cy, cx, radius); drawn for every image so the stream does not depend on use."""
    s = size / 64
    cy, cx = rng.uniform(0.35 * size, 0.65 * size, size=2)
    return cy, cx, rng.uniform(22, 44) * s


def generate_image(label: int, image_size: int = 64, seed: int = 0) -> SynthImage:
    if image_size < MIN_IMAGE_SIZE:
        raise ParameterError(f"image_size must be >= {MIN_IMAGE_SIZE}, got {image_size}")
    if label not in range(NUM_CLASSES):
        raise ParameterError(f"label must be in 0..{NUM_CLASSES - 1}, got {label}")
    rng = np.random.default_rng(seed)
    img = _background(rng, image_size)
    n_distractors = int(rng.integers(0, 4))
    for _ in range(n_distractors):
        region = _distractor(rng, image_size)
        colour = rng.uniform(0.15, 0.85, size=3)
        if rng.random() < BLACK_DISTRACTOR_PROB:
            colour[:] = 0.0
        img[:, region] = colour[:, None]
    stop_on = rng.random() < FIELD_STOP_PROB
    sy, sx, sr = _field_stop(rng, image_size)

    def fits(cy, cx, reach):
        return not stop_on or np.hypot(cy - sy, cx - sx) + reach <= sr

    truth = np.zeros((image_size, image_size), dtype=bool)
    if label:
        truth, values, _ = _SHAPES[label](rng, image_size, fits)
        img[:, truth] = values[:, truth]
    if stop_on:
        yy, xx = _coords(image_size)
        img[:, (yy - sy) ** 2 + (xx - sx) ** 2 > sr * sr] = 0.0
    # store 8-bit levels so disk round-trips are exact
    img = np.floor(img * 255 + 0.5) / 255
    return SynthImage(pixels=img, label=label, truth_mask=truth, seed=seed, n_distractors=n_distractors)


def generate_corpus(n_per_class: int, image_size: int = 64, seed: int = 0) -> list:
    """``n_per_class`` images of each class, labels interleaved 0,1,2,3,0,..."""
    if n_per_class < 1:
        raise ParameterError(f"n_per_class must be >= 1, got {n_per_class}")
    if image_size < MIN_IMAGE_SIZE:
        raise ParameterError(f"image_size must be >= {MIN_IMAGE_SIZE}, got {image_size}")
    corpus = []
    for idx in range(n_per_class * NUM_CLASSES):
        item = generate_image(idx % NUM_CLASSES, image_size, image_seed(seed, idx))
        item.image_id = f"img{idx:05d}"
        corpus.append(item)
    return corpus


def split_corpus(corpus: list, test_fraction: float = 0.2):
    """Stratified split: the last ``test_fraction`` of every class goes to test."""
    if not 0 < test_fraction < 1:
        raise ParameterError(f"test_fraction must be in (0, 1), got {test_fraction}")
    train, test = [], []
    for label in sorted({c.label for c in corpus}):
        members = [c for c in corpus if c.label == label]
        cut = len(members) - int(round(test_fraction * len(members)))
        train.extend(members[:cut])
        test.extend(members[cut:])
    key = lambda c: c.image_id  # noqa: E731
    return sorted(train, key=key), sorted(test, key=key)


def write_corpus(corpus: Iterable[SynthImage], out_dir: os.PathLike) -> Path:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    rows = []
    for item in corpus:
        name, mask_name = f"{item.image_id}.ppm", f"{item.image_id}_truth.pgm"
        netpbm.write_ppm(out / name, item.pixels)
        netpbm.write_pgm(out / mask_name, item.truth_mask.astype(np.float64))
        rows.append({"filename": name, "label": item.label, "seed": item.seed, "truth_mask_filename": mask_name})
    manifest = out / MANIFEST_NAME
    with open(manifest, "w", newline="") as fh:
        writer = csv.DictWriter(fh, fieldnames=MANIFEST_FIELDS, lineterminator="\n")
        writer.writeheader()
        writer.writerows(rows)
    return manifest


def read_corpus(corpus_dir: os.PathLike, limit: Optional[int] = None) -> list:
    root = Path(corpus_dir)
    manifest = root / MANIFEST_NAME
    if not manifest.exists():
        raise DataError(f"no {MANIFEST_NAME} in {root}")
    items = []
    with open(manifest, newline="") as fh:
        for row in csv.DictReader(fh):
            pixels = netpbm.read_ppm(root / row["filename"])
            truth = netpbm.read_pgm(root / row["truth_mask_filename"]) > 0.5
            items.append(
                SynthImage(
                    pixels=pixels,
                    label=int(row["label"]),
                    truth_mask=truth,
                    seed=int(row["seed"]),
                    image_id=Path(row["filename"]).stem,
                )
            )
            if limit is not None and len(items) >= limit:
                break
    return items
