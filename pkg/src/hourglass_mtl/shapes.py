"""Seeded synthetic-shapes segmentation dataset.

Every sample is an RGB image of 2-6 rectangles, discs and triangles drawn
over a smooth textured background, together with its class-label and
instance-id rasters. Class ``c`` (``1 <= c < n_classes``) always uses shape
kind ``(c - 1) % 3`` and a class-specific base colour, so both colour and
geometry carry class information; per-shape colour jitter, background texture
and pixel noise keep colour alone from being decisive.
"""

from __future__ import annotations

import colorsys
from dataclasses import dataclass

import numpy as np

from .errors import ConfigurationError

MIN_SIZE = 16
KINDS = ("rectangle", "disc", "triangle")


@dataclass
class Sample:
    image: np.ndarray  # (3, h, w) float64 in [0, 1]
    labels: np.ndarray  # (h, w) uint8 class ids
    instances: np.ndarray  # (h, w) uint16 instance ids, 0 = background


def class_color(c: int, n_classes: int) -> np.ndarray:
    hue = (c - 1) / max(n_classes - 1, 1)
    return np.array(colorsys.hsv_to_rgb(hue, 0.55, 0.75))


def _texture(rng: np.random.Generator, size: int) -> np.ndarray:
    yy, xx = np.mgrid[0:size, 0:size] / size
    base = rng.uniform(0.35, 0.6, size=3)
    tex = np.zeros((3, size, size))
    for _ in range(3):
        fy, fx = rng.uniform(1.0, 4.0, size=2)
        phase = rng.uniform(0, 2 * np.pi)
        wave = np.sin(2 * np.pi * (fy * yy + fx * xx) + phase)
        tex += rng.uniform(0.05, 0.15, size=3)[:, None, None] * wave
    return base[:, None, None] + tex


def _rectangle(rng, size, lo, hi):
    h, w = rng.integers(lo, hi + 1, size=2)
    y0 = rng.integers(0, size - h + 1)
    x0 = rng.integers(0, size - w + 1)
    m = np.zeros((size, size), dtype=bool)
    m[y0 : y0 + h, x0 : x0 + w] = True
    return m


def _disc(rng, size, lo, hi):
    r = rng.uniform(lo / 2, hi / 2)
    cy, cx = rng.uniform(r, size - r, size=2)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _triangle(rng, size, lo, hi):
    s = rng.integers(lo, hi + 1)
    y0 = rng.integers(0, size - s + 1)
    x0 = rng.integers(0, size - s + 1)
    yy, xx = np.mgrid[0:size, 0:size] + 0.5
    for _ in range(20):
        pts = rng.uniform(0, s, size=(3, 2)) + (y0, x0)
        (ay, ax), (by, bx), (cy, cx) = pts
        area2 = (by - ay) * (cx - ax) - (bx - ax) * (cy - ay)
        if abs(area2) >= 0.3 * s * s:
            break
    else:
        pts = np.array([[y0, x0], [y0 + s, x0], [y0 + s, x0 + s]], dtype=float)
        (ay, ax), (by, bx), (cy, cx) = pts
        area2 = (by - ay) * (cx - ax) - (bx - ax) * (cy - ay)
    sign = np.sign(area2)

    def edge(py, px, qy, qx):
        return sign * ((qy - py) * (xx - px) - (qx - px) * (yy - py)) >= 0

    return edge(ay, ax, by, bx) & edge(by, bx, cy, cx) & edge(cy, cx, ay, ax)


_DRAW = (_rectangle, _disc, _triangle)


def _one_sample(rng: np.random.Generator, size: int, n_classes: int, noise: float) -> Sample:
    lo = max(4, size // 6)
    hi = max(lo, size // 2)
    image = _texture(rng, size)
    labels = np.zeros((size, size), dtype=np.uint8)
    instances = np.zeros((size, size), dtype=np.uint16)
    n_shapes = int(rng.integers(2, 7))
    inst = 0
    for _ in range(n_shapes):
        c = int(rng.integers(1, n_classes))
        draw = _DRAW[(c - 1) % 3]
        mask = None
        for _attempt in range(30):
            cand = draw(rng, size, lo, hi)
            if cand.sum() >= lo and not (cand & (instances > 0)).any():
                mask = cand
                break
        if mask is None and inst < 2:
            # at least two shapes per image: tuck one behind what is already drawn
            for _attempt in range(100):
                cand = draw(rng, size, lo, hi) & (instances == 0)
                if cand.sum() >= lo:
                    mask = cand
                    break
        if mask is None:
            continue
        inst += 1
        labels[mask] = c
        instances[mask] = inst
        color = np.clip(class_color(c, n_classes) + rng.uniform(-0.12, 0.12, size=3), 0, 1)
        image[:, mask] = color[:, None]
    image += noise * rng.standard_normal(image.shape)
    return Sample(np.clip(image, 0.0, 1.0), labels, instances)


def synth_shapes(seed: int, count: int, size: int = 64, n_classes: int = 4, noise: float = 0.08) -> list[Sample]:
    """Generate ``count`` samples deterministically from ``seed``.

    Raises:
        ConfigurationError: ``n_classes < 2``, ``n_classes > 256`` or ``size`` below 16 px.
    """
    if n_classes < 2 or n_classes > 256:
        raise ConfigurationError(f"n_classes must be in [2, 256], got {n_classes}")
    if size < MIN_SIZE:
        raise ConfigurationError(f"size {size} px is too small to place shapes (minimum {MIN_SIZE})")
    if count < 0:
        raise ConfigurationError(f"count must be non-negative, got {count}")
    rng = np.random.default_rng(seed)
    return [_one_sample(rng, size, n_classes, noise) for _ in range(count)]
