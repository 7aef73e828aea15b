"""Task losses for the four heads, each with its exact gradient.

Inputs are batches: logits ``(n, C, h, w)`` and integer or boolean targets
``(n, h, w)``. Per-image losses are summed over the batch; the combined
objective (:func:`total_loss`) divides by the batch size and task count.
Every probability is a per-channel sigmoid, clamped to ``[EPS, 1 - EPS]``
before any logarithm; gradients are zero where the clamp is active.
"""

from __future__ import annotations

from dataclasses import dataclass, fields
from typing import Mapping, Optional

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, DimensionError
from .tensor import sigmoid

EPS = 1e-7
IOU_GUARD = 1e-12
TASKS = ("E", "S", "C", "D")


@dataclass(frozen=True)
class LossWeights:
    psi1: float = 1.0
    psi2: float = 1.0
    psi3: float = 1.0
    psi4: float = 1.0
    psi5: float = 1.0
    psi6: float = 1.0
    omega1: float = 1.0
    omega2: float = 1.0
    lambda_E: float = 1.0
    lambda_S: float = 1.0
    lambda_C: float = 1.0
    lambda_D: float = 1.0

    def __post_init__(self):
        for f in fields(self):
            v = getattr(self, f.name)
            if not np.isfinite(v) or v < 0:
                raise ConfigurationError(f"{f.name} must be a finite non-negative number, got {v}")
        if not any(self.lam(t) > 0 for t in TASKS):
            raise ConfigurationError("at least one task weight lambda must be positive")

    def lam(self, task: str) -> float:
        return getattr(self, f"lambda_{task}")


@dataclass
class LossReport:
    """Per-image-summed loss components; ``None`` for tasks that were not evaluated."""

    edge_hed: Optional[float] = None
    edge_iou: Optional[float] = None
    edge: Optional[float] = None
    seg_cross: Optional[float] = None
    seg_iou: Optional[float] = None
    seg: Optional[float] = None
    contour_cross: Optional[float] = None
    contour_iou: Optional[float] = None
    contour: Optional[float] = None
    energy_cross: Optional[float] = None
    energy_iou: Optional[float] = None
    energy: Optional[float] = None
    total: Optional[float] = None

    def task_value(self, task: str) -> Optional[float]:
        return getattr(self, {"E": "edge", "S": "seg", "C": "contour", "D": "energy"}[task])


def _logits(x, channels: Optional[int] = None) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    if x.ndim != 4:
        raise DimensionError(f"expected (n, c, h, w) logits, got shape {x.shape}")
    if channels is not None and x.shape[1] != channels:
        raise DimensionError(f"channel axis: expected {channels} channels, got {x.shape[1]}")
    return x


def _target(t, shape) -> np.ndarray:
    t = np.asarray(t)
    n, h, w = shape[0], shape[2], shape[3]
    if t.ndim == 2 and n == 1:
        t = t[None]
    if t.shape != (n, h, w):
        raise DimensionError(f"target shape {t.shape} does not match logits {shape}")
    return t


def _clamped_logs(z: np.ndarray):
    """log P, log(1 - P) with P = sigmoid(z) clamped, plus P and the active mask."""
    p = sigmoid(z)
    q = sigmoid(-z)  # 1 - p without cancellation
    active = (p > EPS) & (q > EPS)
    return np.log(np.clip(p, EPS, 1 - EPS)), np.log(np.clip(q, EPS, 1 - EPS)), p, active


def hed_loss(logits, edges) -> tuple[float, np.ndarray]:
    """Class-balanced binary cross-entropy on a 1-channel edge map.

    Per image, ``beta = |Y+| / |Y|`` and the loss is
    ``-beta * sum_{Y+} log P - (1 - beta) * sum_{Y-} log(1 - P)``.
    """
    z = _logits(logits, 1)
    y = _target(edges, z.shape).astype(bool)[:, None]
    pixels = y.shape[2] * y.shape[3]
    if pixels == 0:
        raise DegenerateInputError("edge map has no pixels")
    beta = y.sum(axis=(1, 2, 3), keepdims=True) / pixels
    logp, logq, p, active = _clamped_logs(z)
    per_pixel = np.where(y, -beta * logp, -(1 - beta) * logq)
    grad = np.where(y, -beta * (1 - p), (1 - beta) * p) * active
    return float(per_pixel.sum()), grad


def soft_iou_loss(probs, target) -> tuple[float, np.ndarray]:
    """``1 - sum(PY) / sum(P + Y - PY)`` per image, summed over the batch; gradient w.r.t. ``probs``."""
    p = _logits(probs, 1)
    y = _target(target, p.shape).astype(np.float64)[:, None]
    inter = (p * y).sum(axis=(1, 2, 3), keepdims=True)
    union = (p + y - p * y).sum(axis=(1, 2, 3), keepdims=True) + IOU_GUARD
    value = float((1.0 - inter / union).sum())
    grad = -(y * union - inter * (1 - y)) / union**2
    return value, grad


def edge_loss(logits, edges, psi1: float = 1.0, psi2: float = 1.0) -> tuple[float, np.ndarray]:
    v_hed, g_hed = hed_loss(logits, edges)
    p = sigmoid(_logits(logits, 1))
    v_iou, g_iou = soft_iou_loss(p, edges)
    return psi1 * v_hed + psi2 * v_iou, psi1 * g_hed + psi2 * g_iou * p * (1 - p)


def _one_hot(target: np.ndarray, n_classes: int) -> np.ndarray:
    t = target.astype(np.int64)
    if t.size and (t.min() < 0 or t.max() >= n_classes):
        raise DimensionError(f"target ids must lie in [0, {n_classes}), got [{t.min()}, {t.max()}]")
    return t[:, None] == np.arange(n_classes)[None, :, None, None]


def balanced_multilabel_ce(logits, target, weights) -> tuple[float, np.ndarray]:
    """Class-weighted per-channel binary cross-entropy.

    ``-(1/N) sum_i alpha_i sum_p [y_p = i] log P_i + [y_p != i] log(1 - P_i)``
    per image, with ``alpha`` the class weights.
    """
    z = _logits(logits)
    n_classes = z.shape[1]
    alpha = np.asarray(getattr(weights, "weights", weights), dtype=np.float64).reshape(-1)
    if alpha.shape[0] != n_classes:
        raise DimensionError(f"{alpha.shape[0]} class weights for {n_classes} channels")
    y = _one_hot(_target(target, z.shape), n_classes)
    logp, logq, p, active = _clamped_logs(z)
    a = alpha[None, :, None, None] / n_classes
    value = float((-a * np.where(y, logp, logq)).sum())
    grad = -a * np.where(y, 1 - p, -p) * active
    return value, grad


def multilabel_iou_loss(probs, target) -> tuple[float, np.ndarray]:
    """``1 - (1/N) sum_i (I_i + g) / (U_i + g)`` per image with soft one-hot overlap.

    The guard ``g`` sits in numerator and denominator, so a class absent from
    both prediction and target scores a perfect ratio of 1.
    """
    p = _logits(probs)
    n_classes = p.shape[1]
    y = _one_hot(_target(target, p.shape), n_classes).astype(np.float64)
    inter = (p * y).sum(axis=(2, 3), keepdims=True) + IOU_GUARD
    union = (p + y - p * y).sum(axis=(2, 3), keepdims=True) + IOU_GUARD
    value = float((1.0 - (inter / union).sum(axis=1) / n_classes).sum())
    grad = -(y * union - inter * (1 - y)) / (union**2 * n_classes)
    return value, grad


def _ce_iou(logits, target, weights, w_cross, w_iou):
    v_ce, g_ce = balanced_multilabel_ce(logits, target, weights)
    p = sigmoid(_logits(logits))
    v_iou, g_iou = multilabel_iou_loss(p, target)
    value = w_cross * v_ce + w_iou * v_iou
    grad = w_cross * g_ce + w_iou * g_iou * p * (1 - p)
    return value, grad, v_ce, v_iou


def seg_loss(logits, target, class_weights, psi3: float = 1.0, psi4: float = 1.0) -> tuple[float, np.ndarray]:
    value, grad, _, _ = _ce_iou(logits, target, class_weights, psi3, psi4)
    return value, grad


def contour_loss(logits, contour, class_weights, omega1: float = 1.0, omega2: float = 1.0) -> tuple[float, np.ndarray]:
    value, grad, _, _ = _ce_iou(logits, contour, class_weights, omega1, omega2)
    return value, grad


def energy_loss(logits, bins, bin_weights, psi5: float = 1.0, psi6: float = 1.0) -> tuple[float, np.ndarray]:
    value, grad, _, _ = _ce_iou(logits, bins, bin_weights, psi5, psi6)
    return value, grad


def active_tasks(tasks, weights: LossWeights) -> tuple[str, ...]:
    """Tasks of ``tasks`` that carry a positive weight, in canonical E, S, C, D order."""
    return tuple(t for t in TASKS if t in tasks and weights.lam(t) > 0)


def task_scales(tasks, weights: LossWeights, batch: int) -> dict[str, float]:
    """Factor ``lambda_t / (|T| n)`` applied to each active task's loss and gradient."""
    act = active_tasks(tasks, weights)
    if not act:
        raise ConfigurationError("every enabled task has zero weight")
    if batch < 1:
        raise ConfigurationError(f"batch size must be positive, got {batch}")
    return {t: weights.lam(t) / (len(act) * batch) for t in act}


def total_loss(values: Mapping[str, float], weights: LossWeights, batch: int) -> float:
    """``(1 / (|T| n)) sum_t lambda_t L_t`` over tasks with positive weight.

    ``values`` maps task letters to batch-summed task losses.
    """
    for t, v in values.items():
        if not np.isfinite(v):
            raise DegenerateInputError(f"task {t} loss is not finite: {v}")
    scales = task_scales(values.keys(), weights, batch)
    total = 0.0
    for t, s in scales.items():
        total += s * values[t]
    return total


@dataclass
class TaskClassWeights:
    """Class-balance vectors for the three multi-class heads."""

    seg: np.ndarray
    contour: np.ndarray
    energy: np.ndarray


def compute_task_losses(
    logits: Mapping[str, np.ndarray],
    targets: Mapping[str, np.ndarray],
    weights: LossWeights,
    class_weights: TaskClassWeights,
) -> tuple[LossReport, dict[str, np.ndarray]]:
    """Evaluate every task present in ``logits``.

    ``targets`` maps ``E`` to edge maps, ``S`` to labels, ``C`` to contour
    maps and ``D`` to distance bins, each ``(n, h, w)``. Returns the report
    (``total`` unset) and the unscaled gradient w.r.t. each task's logits.
    """
    rep = LossReport()
    grads = {}
    if "E" in logits:
        z = logits["E"]
        rep.edge_hed, g_hed = hed_loss(z, targets["E"])
        p = sigmoid(z)
        rep.edge_iou, g_iou = soft_iou_loss(p, targets["E"])
        rep.edge = weights.psi1 * rep.edge_hed + weights.psi2 * rep.edge_iou
        grads["E"] = weights.psi1 * g_hed + weights.psi2 * g_iou * p * (1 - p)
    if "S" in logits:
        rep.seg, grads["S"], rep.seg_cross, rep.seg_iou = _ce_iou(
            logits["S"], targets["S"], class_weights.seg, weights.psi3, weights.psi4
        )
    if "C" in logits:
        rep.contour, grads["C"], rep.contour_cross, rep.contour_iou = _ce_iou(
            logits["C"], targets["C"], class_weights.contour, weights.omega1, weights.omega2
        )
    if "D" in logits:
        rep.energy, grads["D"], rep.energy_cross, rep.energy_iou = _ce_iou(
            logits["D"], targets["D"], class_weights.energy, weights.psi5, weights.psi6
        )
    return rep, grads
