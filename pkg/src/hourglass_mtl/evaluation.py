"""Segmentation metrics, trimap boundary curves and clustering indices.

Class aggregates are means over the classes that occur in the prediction or
the ground truth; a class absent from both is left out (its ratios are 0/0).
A ratio with an empty denominator for an included class counts as 0.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from typing import Optional, Sequence

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, DimensionError, FormatError
from .targets import raw_boundary, squared_distance_to

UNDEFINED = math.nan


def _maps(pred, gt):
    pred = np.asarray(pred)
    gt = np.asarray(gt)
    if pred.shape != gt.shape:
        raise DimensionError(f"prediction shape {pred.shape} differs from ground truth {gt.shape}")
    return pred.astype(np.int64), gt.astype(np.int64)


def confusion(pred, gt, mask=None, n_classes: Optional[int] = None) -> np.ndarray:
    """``(N, N)`` counts; entry ``(i, j)`` is the number of pixels with truth ``i`` predicted ``j``."""
    pred, gt = _maps(pred, gt)
    if mask is not None:
        mask = np.asarray(mask, dtype=bool)
        if mask.shape != gt.shape:
            raise DimensionError(f"mask shape {mask.shape} differs from ground truth {gt.shape}")
        pred, gt = pred[mask], gt[mask]
    top = int(max(pred.max(initial=-1), gt.max(initial=-1))) + 1
    n = top if n_classes is None else n_classes
    if top > n:
        raise DimensionError(f"class id {top - 1} out of range for {n} classes")
    if min(pred.min(initial=0), gt.min(initial=0)) < 0:
        raise DimensionError("class ids must be non-negative")
    return np.bincount(gt.ravel() * n + pred.ravel(), minlength=n * n).reshape(n, n)


@dataclass
class SegMetrics:
    miou: float
    accuracy: float  # class mean of (TP + TN) / total
    precision: float
    recall: float
    pixel_accuracy: float
    mean_class_accuracy: float  # class mean of TP / |Y_i|, equal to recall
    iou: np.ndarray
    class_precision: np.ndarray
    class_recall: np.ndarray
    class_accuracy: np.ndarray
    included: np.ndarray


def _ratio(num, den):
    return np.divide(num, den, out=np.zeros(len(num)), where=den > 0)


def seg_metrics(cm) -> SegMetrics:
    """IoU, accuracy, precision and recall from a confusion matrix.

    Raises:
        DegenerateInputError: the matrix counts no pixels.
    """
    cm = np.asarray(cm, dtype=np.int64)
    total = int(cm.sum())
    if total == 0:
        raise DegenerateInputError("confusion matrix is empty")
    tp = np.diag(cm).astype(np.float64)
    fp = cm.sum(axis=0) - tp
    fn = cm.sum(axis=1) - tp
    tn = total - tp - fp - fn
    included = (tp + fp + fn) > 0
    iou = _ratio(tp, tp + fp + fn)
    prec = _ratio(tp, tp + fp)
    rec = _ratio(tp, tp + fn)
    acc = (tp + tn) / total

    def mean(v):
        return float(v[included].mean())

    return SegMetrics(
        miou=mean(iou),
        accuracy=mean(acc),
        precision=mean(prec),
        recall=mean(rec),
        pixel_accuracy=float(tp.sum() / total),
        mean_class_accuracy=mean(rec),
        iou=iou,
        class_precision=prec,
        class_recall=rec,
        class_accuracy=acc,
        included=included,
    )


def trimap_band(gt, width: float) -> np.ndarray:
    """Pixels within Euclidean distance ``width`` of a ground-truth class contour.

    Contour pixels have a D-4 neighbour of a different class. A map without
    contours yields an empty band.
    """
    if width < 1:
        raise ConfigurationError(f"trimap width must be at least 1, got {width}")
    gt = np.asarray(gt)
    if gt.ndim != 2:
        raise DimensionError(f"expected a 2-D label map, got shape {gt.shape}")
    contour = raw_boundary(gt)
    if not contour.any():
        return np.zeros(gt.shape, dtype=bool)
    return squared_distance_to(contour) <= width * width


def _stack(maps):
    a = np.asarray(maps)
    return a[None] if a.ndim == 2 else a


def trimap_counts(pred, gt, widths: Sequence[float]) -> list[tuple[float, int, int]]:
    """``(width, misclassified, band size)`` summed over a map or a batch of maps."""
    pred, gt = _maps(_stack(pred), _stack(gt))
    out = []
    for w in widths:
        wrong = size = 0
        for p, g in zip(pred, gt):
            band = trimap_band(g, w)
            size += int(band.sum())
            wrong += int((band & (p != g)).sum())
        out.append((w, wrong, size))
    return out


def trimap_curve(pred, gt, widths: Sequence[float]) -> list[tuple[float, float]]:
    """``(width, error %)`` per width; an empty band gives ``nan``."""
    return [
        (w, 100.0 * wrong / size if size else UNDEFINED)
        for w, wrong, size in trimap_counts(pred, gt, widths)
    ]


# -- clustering indices ------------------------------------------------------


def _clusters(points, labels):
    x = np.asarray(points, dtype=np.float64)
    if x.ndim == 1:
        x = x[:, None]
    lab = np.asarray(labels).reshape(-1)
    if x.shape[0] != lab.shape[0]:
        raise DimensionError(f"{x.shape[0]} points but {lab.shape[0]} labels")
    ids, inv = np.unique(lab, return_inverse=True)
    if len(ids) < 2:
        raise ConfigurationError(f"clustering indices need at least 2 clusters, got {len(ids)}")
    return x, inv, len(ids)


def _row_blocks(m: int, d: int, budget: int = 1 << 22):
    step = max(1, budget // max(1, m * d))
    for start in range(0, m, step):
        yield slice(start, min(m, start + step))


def silhouette(points, labels) -> float:
    """Mean silhouette ``(b - a) / max(a, b)`` with Euclidean distances.

    Members of singleton clusters and points with ``a = b = 0`` score 0.
    """
    x, inv, k = _clusters(points, labels)
    m, d = x.shape
    onehot = np.zeros((m, k))
    onehot[np.arange(m), inv] = 1.0
    sizes = onehot.sum(axis=0)
    s = np.zeros(m)
    for rows in _row_blocks(m, d):
        dist = np.sqrt(((x[rows, None, :] - x[None, :, :]) ** 2).sum(axis=2))
        sums = dist @ onehot
        own = inv[rows]
        n_own = sizes[own]
        a = np.divide(sums[np.arange(len(own)), own], n_own - 1, out=np.zeros(len(own)), where=n_own > 1)
        other = sums / sizes
        other[np.arange(len(own)), own] = np.inf
        b = other.min(axis=1)
        top = np.maximum(a, b)
        ok = (n_own > 1) & (top > 0)
        s[rows] = np.divide(b - a, top, out=np.zeros(len(own)), where=ok)
    return float(s.mean())


def _centroids(x, inv, k):
    sizes = np.bincount(inv, minlength=k).astype(np.float64)
    sums = np.zeros((k, x.shape[1]))
    np.add.at(sums, inv, x)
    return sums / sizes[:, None], sizes


def calinski_harabasz(points, labels) -> float:
    """``(SS_M / SS_W) * (N - k) / (k - 1)``.

    Raises:
        DegenerateInputError: zero within-cluster scatter.
    """
    x, inv, k = _clusters(points, labels)
    cent, sizes = _centroids(x, inv, k)
    overall = x.mean(axis=0)
    ss_m = float((sizes * ((cent - overall) ** 2).sum(axis=1)).sum())
    ss_w = float(((x - cent[inv]) ** 2).sum())
    if ss_w == 0:
        raise DegenerateInputError("within-cluster scatter is zero")
    n = x.shape[0]
    return ss_m / ss_w * (n - k) / (k - 1)


def davies_bouldin(points, labels) -> float:
    """``(1/k) sum_i max_{j != i} (s_i + s_j) / d_ij``.

    Raises:
        DegenerateInputError: two clusters share a centroid.
    """
    x, inv, k = _clusters(points, labels)
    cent, sizes = _centroids(x, inv, k)
    spread = np.bincount(inv, weights=np.sqrt(((x - cent[inv]) ** 2).sum(axis=1)), minlength=k) / sizes
    dc = np.sqrt(((cent[:, None, :] - cent[None, :, :]) ** 2).sum(axis=2))
    off = ~np.eye(k, dtype=bool)
    if np.any(dc[off] == 0):
        raise DegenerateInputError("two clusters have coincident centroids")
    ratio = np.where(off, (spread[:, None] + spread[None, :]) / np.where(off, dc, 1.0), -np.inf)
    return float(ratio.max(axis=1).mean())


@dataclass
class LatentMetrics:
    ssi: float
    chi: float
    dbi: float
    n_points: int
    n_clusters: int


def latent_metrics(dump) -> LatentMetrics:
    """Cluster the dump's vectors by their tags and score them.

    Raises:
        ConfigurationError: fewer than two distinct tags, or no tags at all.
    """
    if dump.tags is None:
        raise ConfigurationError("latent dump carries no tags")
    tags = np.asarray(dump.tags)
    k = len(np.unique(tags))
    if k < 2:
        raise ConfigurationError(f"latent metrics need at least 2 tags, got {k}")
    v = dump.vectors
    return LatentMetrics(silhouette(v, tags), calinski_harabasz(v, tags), davies_bouldin(v, tags), len(tags), k)


@dataclass
class MetricsReport:
    seg: SegMetrics
    trimap: list
    latent: Optional[LatentMetrics] = None


# -- CSV output --------------------------------------------------------------


def _writer(fh):
    return csv.writer(fh, lineterminator="\n")


def write_metrics_csv(path, m: SegMetrics) -> None:
    """One row per class plus a ``mean`` row; excluded classes are left blank."""
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["class", "iou", "accuracy", "precision", "recall"])
        for c in range(len(m.iou)):
            if m.included[c]:
                w.writerow([c, repr(float(m.iou[c])), repr(float(m.class_accuracy[c])),
                            repr(float(m.class_precision[c])), repr(float(m.class_recall[c]))])
            else:
                w.writerow([c, "", "", "", ""])
        w.writerow(["mean", repr(m.miou), repr(m.accuracy), repr(m.precision), repr(m.recall)])
        w.writerow(["pixel", "", repr(m.pixel_accuracy), "", ""])


def write_trimap_csv(path, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["width", "error_pct"])
        for width, err in curve:
            w.writerow([repr(width) if isinstance(width, float) else width, repr(float(err))])


def read_trimap_csv(path) -> list[tuple[float, float]]:
    with open(path, newline="", encoding="utf-8") as fh:
        rows = list(csv.reader(fh))
    if not rows or rows[0] != ["width", "error_pct"]:
        raise FormatError(f"{path}: expected header width,error_pct")
    return [(float(a), float(b)) for a, b in rows[1:]]


def write_latent_csv(path, dump) -> None:
    """Rows ``tag,v0,v1,...``; the tag column is -1 when the dump has no tags."""
    v = dump.vectors
    tags = dump.tags if dump.tags is not None else np.full(len(v), -1)
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["tag"] + [f"v{j}" for j in range(v.shape[1])])
        for t, row in zip(tags, v):
            w.writerow([int(t)] + [repr(float(a)) for a in row])


def write_latent_metrics_csv(path, lm: LatentMetrics) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = _writer(fh)
        w.writerow(["ssi", "chi", "dbi", "points", "clusters"])
        w.writerow([repr(lm.ssi), repr(lm.chi), repr(lm.dbi), lm.n_points, lm.n_clusters])
