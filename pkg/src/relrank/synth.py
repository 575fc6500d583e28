"""Synthetic photo corpus with known latent aesthetic scores.

Each image is a subject on a background. The latent score controls, all
monotonically: subject/background contrast, subject saturation, subject
texture sharpness and background blur (a shallow depth-of-field cue).
Hue, brightness, position, size and noise are nuisance variables. The
category decides the subject's shape.

Simulated raters report ``round(score + noise)`` clipped to [1, 10]; noise is
Gaussian truncated at three standard deviations. A fraction of images is
"controversial" (much larger rater noise), which exercises the variance
constraint of the pair builder.
"""

from __future__ import annotations

import colorsys
import csv
from dataclasses import dataclass
from pathlib import Path
from typing import Union

import numpy as np
from scipy.ndimage import gaussian_filter

from .data import RatingRecord, write_manifest, write_ppm

CATEGORIES = ("disk", "square", "diamond", "ring")
SCORE_RANGE = (2.0, 9.0)


@dataclass(frozen=True)
class SynthConfig:
    size: int = 48
    raters: int = 20
    noise_std: float = 0.5
    controversial_fraction: float = 0.1
    controversial_std: float = 2.5


def simulate_ratings(score: float, raters: int, noise_std: float, rng: np.random.Generator) -> np.ndarray:
    noise = np.clip(rng.standard_normal(raters) * noise_std, -3 * noise_std, 3 * noise_std)
    return np.clip(np.rint(score + noise), 1, 10).astype(int)


def _shape_mask(category: str, yy: np.ndarray, xx: np.ndarray, radius: float) -> np.ndarray:
    if category == "disk":
        m = np.hypot(yy, xx) <= radius
    elif category == "square":
        m = np.maximum(np.abs(yy), np.abs(xx)) <= radius * 0.85
    elif category == "diamond":
        m = np.abs(yy) + np.abs(xx) <= radius * 1.2
    elif category == "ring":
        r = np.hypot(yy, xx)
        m = (r <= radius) & (r >= radius * 0.45)
    else:
        raise ValueError(f"unknown category {category!r}")
    return m.astype(np.float64)


def render(score: float, category: str, size: int, rng: np.random.Generator) -> np.ndarray:
    """Draw one ``size x size x 3`` uint8 image whose quality follows ``score``."""
    q = (np.clip(score, *SCORE_RANGE) - SCORE_RANGE[0]) / (SCORE_RANGE[1] - SCORE_RANGE[0])

    bg_level = rng.uniform(70, 185)
    bg_hue = rng.uniform()
    bg_rgb = np.array(colorsys.hsv_to_rgb(bg_hue, 0.12, 1.0)) * bg_level
    # busy background for poor photos, smooth (defocused) for good ones
    texture = rng.standard_normal((size, size))
    texture = gaussian_filter(texture, 0.6 + 3.0 * q, mode="reflect")
    texture /= texture.std() + 1e-12
    background = bg_rgb[None, None, :] + (22 * (1 - q) + 4) * texture[..., None]

    contrast = 18 + 95 * q
    sign = 1.0 if bg_level < 128 else -1.0
    subj_level = np.clip(bg_level + sign * contrast, 10, 245)
    hue = rng.uniform()
    subj_rgb = np.array(colorsys.hsv_to_rgb(hue, 0.08 + 0.85 * q, 1.0))
    subj_rgb = subj_rgb / subj_rgb.mean() * subj_level

    # crisp detail on good subjects, smeared on poor ones
    detail = rng.standard_normal((size, size))
    detail = gaussian_filter(detail, 2.2 - 1.7 * q, mode="reflect")
    detail /= detail.std() + 1e-12
    subject = subj_rgb[None, None, :] * (1 + (0.04 + 0.16 * q) * detail[..., None])

    cy, cx = (size - 1) / 2 + rng.uniform(-size / 10, size / 10, 2)
    radius = size * rng.uniform(0.22, 0.32)
    yy, xx = np.mgrid[0:size, 0:size].astype(np.float64)
    mask = _shape_mask(category, yy - cy, xx - cx, radius)
    mask = gaussian_filter(mask, 0.7, mode="constant")[..., None]

    img = mask * subject + (1 - mask) * background
    img += rng.standard_normal(img.shape) * 3.0
    return np.clip(np.rint(img), 0, 255).astype(np.uint8)


def synth_generate(n: int, seed: int, out_dir: Union[str, Path], config: SynthConfig = SynthConfig()):
    """Write ``n`` images, ``manifest.csv`` and ``ground_truth.csv`` to ``out_dir``.

    Returns ``(records, scores)`` where ``scores`` maps image id to latent score.
    """
    if n < 2:
        raise ValueError("synth_generate needs n >= 2")
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    rng = np.random.default_rng(seed)
    width = len(str(n - 1))
    records, scores = [], {}
    for i in range(n):
        image_id = f"img{i:0{width}d}"
        category = CATEGORIES[i % len(CATEGORIES)]
        score = float(rng.uniform(*SCORE_RANGE))
        controversial = rng.uniform() < config.controversial_fraction
        std = config.controversial_std if controversial else config.noise_std
        ratings = simulate_ratings(score, config.raters, std, rng)
        rel = f"images/{image_id}.ppm"
        write_ppm(out / rel, render(score, category, config.size, rng))
        records.append(RatingRecord.from_ratings(image_id, rel, category, ratings))
        scores[image_id] = score
    write_manifest(records, out / "manifest.csv")
    with open(out / "ground_truth.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["image_id", "category", "latent_score"])
        for r in records:
            w.writerow([r.image_id, r.category, repr(scores[r.image_id])])
    return records, scores


def load_ground_truth(path: Union[str, Path]) -> dict[str, float]:
    with open(path, newline="", encoding="utf-8") as fh:
        return {row["image_id"]: float(row["latent_score"]) for row in csv.DictReader(fh)}
