"""Supervision targets derived from label and instance rasters.

Four targets are produced per image: a dilated instance-edge map (task E),
a semantic contour map (task C), a truncated and quantized distance-to-
boundary map (task D), and the pass-through segmentation labels (task S).
Median-frequency class weights are computed over a whole dataset.
"""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Iterable, Optional

import numpy as np
from numba import njit

from .errors import ConfigurationError, DegenerateInputError, DimensionError

BACKGROUND = 0

# Offsets of the radius-2 disk structuring element {dx^2 + dy^2 <= 4}: 13 taps.
DISK_OFFSETS = tuple(
    (dy, dx) for dy in range(-2, 3) for dx in range(-2, 3) if dy * dy + dx * dx <= 4
)


@dataclass(frozen=True)
class DistanceTransformConfig:
    """Truncation threshold ``R`` (pixels) and bin count ``K``."""

    R: int = 20
    K: int = 6

    def __post_init__(self):
        if int(self.R) != self.R or self.R < 1:
            raise ConfigurationError(f"R must be a positive integer, got {self.R}")
        if int(self.K) != self.K or self.K < 2:
            raise ConfigurationError(f"K must be an integer >= 2, got {self.K}")


@dataclass
class QuantizedDistanceMap:
    truncated: np.ndarray  # D_t, integers in [0, R]
    bins: np.ndarray  # bin index in [0, K)
    representatives: np.ndarray  # lower edge of each bin, length K

    @property
    def K(self) -> int:
        return len(self.representatives)

    def one_hot(self) -> np.ndarray:
        """``(K, h, w)`` binary maps with exactly one set entry per pixel."""
        return (self.bins[None] == np.arange(self.K)[:, None, None]).astype(np.uint8)

    def quantized_values(self) -> np.ndarray:
        """Per-pixel representative distance, sum_k r_k b_k(p)."""
        return self.representatives[self.bins]


@dataclass
class ClassWeights:
    weights: np.ndarray
    frequencies: np.ndarray
    median: float
    present: np.ndarray = field(default_factory=lambda: np.zeros(0, dtype=bool))


@dataclass
class TargetBundle:
    edge: np.ndarray
    contour: np.ndarray
    distq: QuantizedDistanceMap
    seg: np.ndarray


def _same_shape(*arrays: np.ndarray) -> None:
    shapes = {a.shape for a in arrays}
    if len(shapes) != 1:
        raise DimensionError(f"rasters must share width/height, got {sorted(shapes)}")


def raw_boundary(instances: np.ndarray) -> np.ndarray:
    """Pixels with a D-4 neighbour of a different id; the image border is not a change."""
    ids = np.asarray(instances)
    if ids.ndim != 2:
        raise DimensionError(f"expected a 2-D raster, got shape {ids.shape}")
    out = np.zeros(ids.shape, dtype=bool)
    dv = ids[1:, :] != ids[:-1, :]
    out[1:, :] |= dv
    out[:-1, :] |= dv
    dh = ids[:, 1:] != ids[:, :-1]
    out[:, 1:] |= dh
    out[:, :-1] |= dh
    return out


def dilate_disk(mask: np.ndarray) -> np.ndarray:
    """Binary dilation by the radius-2 disk."""
    mask = np.asarray(mask, dtype=bool)
    h, w = mask.shape
    out = np.zeros_like(mask)
    for dy, dx in DISK_OFFSETS:
        out[max(dy, 0) : h + min(dy, 0), max(dx, 0) : w + min(dx, 0)] |= mask[
            max(-dy, 0) : h + min(-dy, 0), max(-dx, 0) : w + min(-dx, 0)
        ]
    return out


def extract_edges(instances: np.ndarray) -> np.ndarray:
    return dilate_disk(raw_boundary(instances))


def extract_semantic_contours(labels: np.ndarray, edge: np.ndarray, background: int = BACKGROUND) -> np.ndarray:
    """Class id on edge pixels, ``background`` everywhere else."""
    labels = np.asarray(labels)
    edge = np.asarray(edge, dtype=bool)
    _same_shape(labels, edge)
    return np.where(edge, labels, background).astype(labels.dtype)


_FAR = 1e20


@njit(cache=True)
def _edt_1d(f, d, v, z):
    # Lower envelope of parabolas (Felzenszwalb & Huttenlocher); f, d length n.
    n = f.shape[0]
    k = 0
    v[0] = 0
    z[0] = -np.inf
    z[1] = np.inf
    for q in range(1, n):
        s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        while s <= z[k]:
            k -= 1
            s = ((f[q] + q * q) - (f[v[k]] + v[k] * v[k])) / (2.0 * q - 2.0 * v[k])
        k += 1
        v[k] = q
        z[k] = s
        z[k + 1] = np.inf
    k = 0
    for q in range(n):
        while z[k + 1] < q:
            k += 1
        d[q] = (q - v[k]) * (q - v[k]) + f[v[k]]


@njit(cache=True)
def _squared_edt(seeds):
    h, w = seeds.shape
    n = max(h, w)
    f = np.empty(n)
    d = np.empty(n)
    v = np.empty(n, dtype=np.int64)
    z = np.empty(n + 1)
    tmp = np.empty((h, w))
    for x in range(w):
        for y in range(h):
            f[y] = 0.0 if seeds[y, x] else _FAR
        _edt_1d(f[:h], d[:h], v, z)
        for y in range(h):
            tmp[y, x] = d[y]
    out = np.empty((h, w))
    for y in range(h):
        for x in range(w):
            f[x] = tmp[y, x]
        _edt_1d(f[:w], d[:w], v, z)
        for x in range(w):
            out[y, x] = d[x]
    return out


def squared_distance_to(seeds: np.ndarray) -> np.ndarray:
    """Exact squared Euclidean distance from every pixel to the nearest seed pixel."""
    seeds = np.ascontiguousarray(seeds, dtype=np.bool_)
    return _squared_edt(seeds)


def _ceil_sqrt(d2: np.ndarray) -> np.ndarray:
    # Integer-exact ceil(sqrt(d2)) for integral d2.
    d2 = np.rint(d2).astype(np.int64)
    c = np.ceil(np.sqrt(d2)).astype(np.int64)
    c -= ((c - 1) * (c - 1) >= d2) & (c > 0)
    c += c * c < d2
    return c


def bin_representatives(cfg: DistanceTransformConfig) -> np.ndarray:
    return np.arange(cfg.K) * (cfg.R / cfg.K)


def quantize(truncated: np.ndarray, cfg: DistanceTransformConfig) -> QuantizedDistanceMap:
    """Uniform K-bin partition of [0, R]; bin k covers [kR/K, (k+1)R/K), the last bin is closed."""
    t = np.asarray(truncated, dtype=np.int64)
    bins = np.minimum((t * cfg.K) // cfg.R, cfg.K - 1)
    return QuantizedDistanceMap(t, bins.astype(np.int64), bin_representatives(cfg))


def distance_transform(
    instances: np.ndarray,
    edge: Optional[np.ndarray] = None,
    cfg: DistanceTransformConfig = DistanceTransformConfig(),
) -> QuantizedDistanceMap:
    """Truncated, quantized distance from instance pixels to the instance boundary.

    ``D_t(p) = gamma_p * min(ceil(min_q d(p, q)), R)`` where ``q`` ranges over
    the raw (undilated) boundary set and ``gamma_p`` is 1 on instance pixels.
    ``edge`` is accepted for interface symmetry and only shape-checked; the
    distances are always measured to the raw boundary.

    Raises:
        DegenerateInputError: foreground is present but there is no boundary.
    """
    ids = np.asarray(instances)
    if edge is not None:
        _same_shape(ids, np.asarray(edge))
    q = raw_boundary(ids)
    inside = ids != 0
    if not q.any():
        if inside.any():
            raise DegenerateInputError("instance map has foreground but no boundary pixels")
        return quantize(np.zeros(ids.shape, dtype=np.int64), cfg)
    dist = _ceil_sqrt(squared_distance_to(q))
    truncated = np.where(inside, np.minimum(dist, cfg.R), 0)
    return quantize(truncated, cfg)


def weights_from_frequencies(freqs: np.ndarray, present: Optional[np.ndarray] = None) -> ClassWeights:
    """tau_c = median(f) / f(c) over present classes; absent classes get 0."""
    freqs = np.asarray(freqs, dtype=np.float64)
    if present is None:
        present = freqs > 0
    present = np.asarray(present, dtype=bool)
    if not present.any():
        raise DegenerateInputError("no class is present in the dataset")
    med = float(np.median(freqs[present]))
    weights = np.zeros_like(freqs)
    weights[present] = med / freqs[present]
    return ClassWeights(weights, freqs, med, present)


def class_balance_weights(dataset: Iterable[np.ndarray], n_classes: Optional[int] = None) -> ClassWeights:
    """Median-frequency balancing over a sequence of label maps.

    ``f(c)`` is the pixel count of class ``c`` divided by the total pixel count
    of the images in which ``c`` occurs.
    """
    maps = [np.asarray(m) for m in dataset]
    if not maps:
        raise DegenerateInputError("class balancing needs at least one image")
    top = max(int(m.max()) for m in maps) + 1
    n = top if n_classes is None else n_classes
    if top > n:
        raise DimensionError(f"label id {top - 1} out of range for {n} classes")
    counts = np.zeros(n, dtype=np.int64)
    totals = np.zeros(n, dtype=np.int64)
    for m in maps:
        c = np.bincount(m.ravel().astype(np.int64), minlength=n)
        counts += c
        totals += np.where(c > 0, m.size, 0)
    present = counts > 0
    freqs = np.where(present, counts / np.maximum(totals, 1), 0.0)
    return weights_from_frequencies(freqs, present)


def build_targets(
    labels: np.ndarray,
    instances: np.ndarray,
    cfg: DistanceTransformConfig = DistanceTransformConfig(),
) -> TargetBundle:
    labels = np.asarray(labels)
    instances = np.asarray(instances)
    _same_shape(labels, instances)
    edge = extract_edges(instances)
    contour = extract_semantic_contours(labels, edge)
    distq = distance_transform(instances, edge, cfg)
    return TargetBundle(edge=edge, contour=contour, distq=distq, seg=labels)
