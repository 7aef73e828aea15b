"""Deterministic multi-task training loop.

A single ``numpy`` generator seeded from the config drives batch sampling and
augmentation; its draws never depend on which tasks are enabled, so runs that
differ only in zero-weight tasks follow identical trajectories.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass, field, fields
from pathlib import Path
from typing import Callable, Optional, Sequence, Union

import numpy as np

from .errors import ConfigurationError, DegenerateInputError, DivergenceError
from .evaluation import MetricsReport, confusion, latent_metrics, seg_metrics, trimap_curve
from .losses import TASKS, LossWeights, TaskClassWeights, active_tasks, compute_task_losses, task_scales
from .model import LatentDump, ModelConfig, Params, backward, forward, init_params, prior_logits
from .shapes import Sample
from .targets import (
    DistanceTransformConfig,
    TargetBundle,
    build_targets,
    class_balance_weights,
    distance_transform,
)

LOG_HEADER = ["iter", "total", "loss_E", "loss_S", "loss_C", "loss_D", "holdout_miou"]
EVAL_CHUNK = 8


@dataclass(frozen=True)
class TrainConfig:
    """Training run settings; see :func:`parse_config` for the file format."""

    tasks: tuple = ("S",)
    lr: float = 1e-4
    momentum: float = 0.9
    clip_norm: float = 0.0  # rescale the gradient to this global L2 norm when larger; 0 disables
    batch_size: int = 4
    iterations: int = 200
    seed: int = 0
    crop: int = 0  # 0 keeps the full image
    contrast_min: float = 0.8
    contrast_max: float = 1.2
    brightness_min: float = -0.1
    brightness_max: float = 0.1
    flip_prob: float = 0.5
    fixed_batch: bool = False  # reuse the first training batch, unaugmented
    eval_every: int = 0  # 0 evaluates only after the last iteration
    train_fraction: float = 0.8
    R: int = 20
    K: int = 6
    stages: int = 3
    base_width: int = 16
    n_classes: int = 0  # 0 infers from the data
    prior_bias: bool = False  # start each head's sigmoid at the training label frequency
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
    manifest: str = ""
    synth_seed: int = 0
    synth_count: int = 0
    synth_size: int = 64
    synth_classes: int = 4
    checkpoint: str = "model.ckpt"
    log: str = "train_log.csv"
    latent: str = "latent.csv"

    def __post_init__(self):
        tasks = tuple(self.tasks)
        bad = [t for t in tasks if t not in TASKS]
        if bad:
            raise ConfigurationError(f"unknown task letter(s) {','.join(bad)}; choose from E,S,C,D")
        if "S" not in tasks:
            raise ConfigurationError("task S is mandatory")
        object.__setattr__(self, "tasks", tuple(t for t in TASKS if t in tasks))
        if not self.lr > 0:
            raise ConfigurationError(f"learning rate must be positive, got {self.lr}")
        if not 0 <= self.momentum < 1:
            raise ConfigurationError(f"momentum must lie in [0, 1), got {self.momentum}")
        if self.batch_size < 1 or self.iterations < 0:
            raise ConfigurationError("batch_size must be positive and iterations non-negative")
        if not self.clip_norm >= 0:
            raise ConfigurationError(f"clip_norm must be non-negative, got {self.clip_norm}")
        if self.crop < 0 or self.eval_every < 0:
            raise ConfigurationError("crop and eval_every must be non-negative")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigurationError(f"flip_prob must lie in [0, 1], got {self.flip_prob}")
        if self.contrast_min > self.contrast_max or self.brightness_min > self.brightness_max:
            raise ConfigurationError("augmentation ranges must have min <= max")
        if not 0 < self.train_fraction < 1:
            raise ConfigurationError(f"train_fraction must lie in (0, 1), got {self.train_fraction}")
        self.weights  # validates the loss weights
        DistanceTransformConfig(self.R, self.K)

    @property
    def weights(self) -> LossWeights:
        return LossWeights(**{f.name: getattr(self, f.name) for f in fields(LossWeights)})

    @property
    def active(self) -> tuple:
        return active_tasks(self.tasks, self.weights)


def _parse_bool(text: str) -> bool:
    low = text.lower()
    if low in ("1", "true", "yes", "on"):
        return True
    if low in ("0", "false", "no", "off"):
        return False
    raise ValueError(f"not a boolean: {text!r}")


def parse_config(text: str) -> TrainConfig:
    """Parse ``key = value`` lines; ``#`` starts a comment.

    ``tasks`` takes comma-separated letters; other keys are the
    :class:`TrainConfig` field names.

    Raises:
        ConfigurationError: unknown key, repeated key or malformed value.
    """
    kinds = {f.name: f.type for f in fields(TrainConfig)}
    values = {}
    for lineno, raw in enumerate(text.splitlines(), 1):
        line = raw.split("#", 1)[0].strip()
        if not line:
            continue
        if "=" not in line:
            raise ConfigurationError(f"line {lineno}: expected 'key = value', got {raw!r}")
        key, value = (s.strip() for s in line.split("=", 1))
        if key not in kinds:
            raise ConfigurationError(f"line {lineno}: unknown key {key!r}")
        if key in values:
            raise ConfigurationError(f"line {lineno}: key {key!r} given twice")
        kind = kinds[key]
        try:
            if key == "tasks":
                values[key] = tuple(t.strip() for t in value.split(",") if t.strip())
            elif kind == "bool":
                values[key] = _parse_bool(value)
            elif kind == "int":
                values[key] = int(value)
            elif kind == "float":
                values[key] = float(value)
            else:
                values[key] = value
        except ValueError as exc:
            raise ConfigurationError(f"line {lineno}: bad value for {key}: {exc}") from None
    return TrainConfig(**values)


def load_config(path) -> TrainConfig:
    return parse_config(Path(path).read_text(encoding="utf-8"))


def format_config(cfg: TrainConfig) -> str:
    lines = []
    for f in fields(cfg):
        v = getattr(cfg, f.name)
        lines.append(f"{f.name} = {','.join(v) if f.name == 'tasks' else str(v).lower() if isinstance(v, bool) else v}")
    return "\n".join(lines) + "\n"


# -- augmentation ------------------------------------------------------------


@dataclass(frozen=True)
class Augmentation:
    y0: int
    x0: int
    size: tuple
    flip: bool
    contrast: float
    brightness: float

    def geometry(self, raster: np.ndarray) -> np.ndarray:
        """Crop then optionally mirror the last two axes of ``raster``; exact, no interpolation."""
        h, w = self.size
        out = raster[..., self.y0 : self.y0 + h, self.x0 : self.x0 + w]
        if self.flip:
            out = out[..., ::-1]
        return np.ascontiguousarray(out)

    def photometric(self, image: np.ndarray) -> np.ndarray:
        """``x * c + mean * (1 - c) + b`` per channel, clipped to [0, 1]."""
        mean = image.mean(axis=(-2, -1), keepdims=True)
        out = image * self.contrast + mean * (1.0 - self.contrast) + self.brightness
        return np.clip(out, 0.0, 1.0)


def draw_augmentation(rng: np.random.Generator, shape, cfg: TrainConfig) -> Augmentation:
    """Draw crop offsets, flip, contrast and brightness; always consumes five draws."""
    h, w = shape
    ch = cw = cfg.crop or None
    ch, cw = ch or h, cw or w
    if ch > h or cw > w:
        raise ConfigurationError(f"crop {cfg.crop} exceeds image size {h}x{w}")
    y0 = int(rng.integers(0, h - ch + 1))
    x0 = int(rng.integers(0, w - cw + 1))
    flip = bool(rng.random() < cfg.flip_prob)
    contrast = float(rng.uniform(cfg.contrast_min, cfg.contrast_max))
    brightness = float(rng.uniform(cfg.brightness_min, cfg.brightness_max))
    return Augmentation(y0, x0, (ch, cw), flip, contrast, brightness)


def augment(sample: Sample, rng: np.random.Generator, cfg: TrainConfig) -> Sample:
    """Random crop, horizontal flip, contrast and brightness.

    Geometry applies identically to image, labels and instances; the
    photometric changes touch the image only.
    """
    aug = draw_augmentation(rng, sample.labels.shape, cfg)
    return Sample(
        aug.photometric(aug.geometry(sample.image)),
        aug.geometry(sample.labels),
        aug.geometry(sample.instances),
    )


# -- training ----------------------------------------------------------------


@dataclass
class TrainLog:
    rows: list = field(default_factory=list)

    def append(self, it: int, total: float, parts: dict, miou: Optional[float]) -> None:
        self.rows.append((it, total, *(parts.get(t) for t in TASKS), miou))

    def write_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(LOG_HEADER)
            for row in self.rows:
                w.writerow([row[0]] + ["" if v is None else repr(float(v)) for v in row[1:]])

    @property
    def totals(self) -> list:
        return [r[1] for r in self.rows]


@dataclass
class TrainResult:
    params: Params
    log: TrainLog
    metrics: Optional[MetricsReport]
    latent: Optional[LatentDump]
    model_config: ModelConfig
    class_weights: TaskClassWeights


@dataclass
class PreparedData:
    samples: list
    targets: list
    train_idx: np.ndarray
    test_idx: np.ndarray
    n_classes: int
    class_weights: TaskClassWeights
    frequencies: dict = field(default_factory=dict)  # task letter -> training label frequencies


def split_indices(count: int, train_fraction: float = 0.8) -> tuple[np.ndarray, np.ndarray]:
    """First ``round(train_fraction * count)`` indices train, the rest are held out."""
    n_train = int(round(train_fraction * count))
    idx = np.arange(count)
    return idx[:n_train], idx[n_train:]


def _pixel_frequencies(maps, n: int) -> np.ndarray:
    counts = sum(np.bincount(m.ravel().astype(np.int64), minlength=n) for m in maps)
    return counts / counts.sum()


def prepare_data(samples: Sequence[Sample], cfg: TrainConfig) -> PreparedData:
    """Build targets and class weights from the training split.

    Raises:
        DegenerateInputError: empty dataset or empty training split.
    """
    samples = list(samples)
    if not samples:
        raise DegenerateInputError("dataset is empty")
    train_idx, test_idx = split_indices(len(samples), cfg.train_fraction)
    if len(train_idx) == 0:
        raise DegenerateInputError("training split is empty")
    dt = DistanceTransformConfig(cfg.R, cfg.K)
    targets = [build_targets(s.labels, s.instances, dt) for s in samples]
    top = max(int(s.labels.max()) for s in samples) + 1
    n_classes = cfg.n_classes or top
    if top > n_classes:
        raise ConfigurationError(f"labels reach class {top - 1} but n_classes is {n_classes}")
    train_targets = [targets[i] for i in train_idx]
    seg = class_balance_weights([t.seg for t in train_targets], n_classes)
    contour = class_balance_weights([t.contour for t in train_targets], n_classes)
    energy = class_balance_weights([t.distq.bins for t in train_targets], cfg.K)
    cw = TaskClassWeights(seg=seg.weights, contour=contour.weights, energy=energy.weights)
    freqs = {
        "E": _pixel_frequencies([t.edge for t in train_targets], 2)[1:],
        "S": _pixel_frequencies([t.seg for t in train_targets], n_classes),
        "C": _pixel_frequencies([t.contour for t in train_targets], n_classes),
        "D": _pixel_frequencies([t.distq.bins for t in train_targets], cfg.K),
    }
    return PreparedData(samples, targets, train_idx, test_idx, n_classes, cw, freqs)


def _crop_bins(target: TargetBundle, instances: np.ndarray, aug: Augmentation, dt) -> np.ndarray:
    try:
        return distance_transform(instances, cfg=dt).bins
    except DegenerateInputError:
        # the crop sits inside one instance: keep the full-image distances
        return aug.geometry(target.distq.bins)


def _make_batch(data: PreparedData, picks, rng, cfg: TrainConfig, need_bins: bool, augment_on: bool):
    dt = DistanceTransformConfig(cfg.R, cfg.K)
    images, tgt = [], {t: [] for t in TASKS}
    for i in picks:
        s, tb = data.samples[i], data.targets[i]
        h, w = s.labels.shape
        if augment_on:
            aug = draw_augmentation(rng, (h, w), cfg)
        else:
            aug = Augmentation(0, 0, (h, w), False, 1.0, 0.0)
        images.append(aug.photometric(aug.geometry(s.image)) if augment_on else s.image)
        tgt["E"].append(aug.geometry(tb.edge))
        tgt["S"].append(aug.geometry(tb.seg))
        tgt["C"].append(aug.geometry(tb.contour))
        if need_bins:
            if aug.size == (h, w):
                bins = tb.distq.bins if not aug.flip else aug.geometry(tb.distq.bins)
            else:
                bins = _crop_bins(tb, aug.geometry(s.instances), aug, dt)
            tgt["D"].append(bins)
    out = {t: np.stack(v) for t, v in tgt.items() if v}
    return np.stack(images), out


def clip_gradients(grads: Params, max_norm: float) -> float:
    """Scale ``grads`` in place so their global L2 norm is at most ``max_norm``; returns the norm before."""
    norm = math.sqrt(sum(float(np.dot(g.ravel(), g.ravel())) for g in grads.values()))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / norm
        for g in grads.values():
            g *= scale
    return norm


def _sgd_step(params: Params, velocity: Params, grads: Params, lr: float, momentum: float) -> None:
    for k in params:
        v = velocity[k]
        v *= momentum
        v += grads[k]
        params[k] -= lr * v


def train(
    cfg: TrainConfig,
    dataset: Union[Sequence[Sample], PreparedData],
    params: Optional[Params] = None,
    on_iteration: Optional[Callable[[int, float], None]] = None,
) -> TrainResult:
    """SGD with momentum on the weighted multi-task objective.

    Only tasks that are enabled and carry positive weight are evaluated;
    the others contribute neither loss nor gradient.

    Raises:
        DivergenceError: the objective became non-finite.
    """
    data = dataset if isinstance(dataset, PreparedData) else prepare_data(dataset, cfg)
    h, w = data.samples[0].labels.shape
    mcfg = ModelConfig(
        in_channels=data.samples[0].image.shape[0],
        n_classes=data.n_classes,
        n_bins=cfg.K,
        stages=cfg.stages,
        base_width=cfg.base_width,
        input_size=cfg.crop or h,
    )
    if cfg.crop and cfg.crop % mcfg.block:
        raise ConfigurationError(f"crop {cfg.crop} is not a multiple of {mcfg.block}")
    if params is None:
        bias = {t: prior_logits(f) for t, f in data.frequencies.items()} if cfg.prior_bias else None
        params = init_params(mcfg, cfg.seed, bias)
    params = {k: v.copy() for k, v in params.items()}
    velocity = {k: np.zeros_like(v) for k, v in params.items()}
    active = cfg.active
    weights = cfg.weights
    rng = np.random.default_rng(cfg.seed)
    log = TrainLog()
    n_train = len(data.train_idx)
    batch = min(cfg.batch_size, n_train)
    fixed = data.train_idx[:batch]

    for it in range(1, cfg.iterations + 1):
        if cfg.fixed_batch:
            picks = fixed
        else:
            picks = data.train_idx[np.sort(rng.choice(n_train, size=batch, replace=False))]
        images, targets = _make_batch(data, picks, rng, cfg, "D" in active, not cfg.fixed_batch)
        logits, cache, _ = forward(params, images, active)
        report, g_logits = compute_task_losses(logits, targets, weights, data.class_weights)
        scales = task_scales(active, weights, len(picks))
        parts = {t: report.task_value(t) for t in active}
        total = 0.0
        for t, s in scales.items():
            total += s * parts[t]
        if not math.isfinite(total):
            raise DivergenceError(it, total)
        grads = backward(params, cache, {t: scales[t] * g_logits[t] for t in active})
        if cfg.clip_norm > 0:
            clip_gradients(grads, cfg.clip_norm)
        _sgd_step(params, velocity, grads, cfg.lr, cfg.momentum)

        miou = None
        if len(data.test_idx) and cfg.eval_every and it % cfg.eval_every == 0 and it != cfg.iterations:
            miou = evaluate_epoch(params, _split(data, data.test_idx)).seg.miou
        log.append(it, total, parts, miou)
        if on_iteration:
            on_iteration(it, total)

    metrics = latent = None
    if len(data.test_idx):
        metrics, latent = evaluate_split(params, _split(data, data.test_idx), capture_latent=True)
        if log.rows:
            last = log.rows[-1]
            log.rows[-1] = last[:-1] + (metrics.seg.miou,)
    return TrainResult(params, log, metrics, latent, mcfg, data.class_weights)


def _split(data: PreparedData, idx) -> list:
    return [data.samples[i] for i in idx]


# -- evaluation --------------------------------------------------------------


Predictor = Callable[[np.ndarray], np.ndarray]


def predict_labels(model: Union[Params, Predictor], images: np.ndarray) -> np.ndarray:
    """Per-pixel argmax of the segmentation logits; ties go to the lowest class."""
    if callable(model):
        logits = np.asarray(model(images))
    else:
        logits = forward(model, images, ("S",))[0]["S"]
    return np.argmax(logits, axis=1)


def evaluate_split(
    model: Union[Params, Predictor],
    split: Sequence[Sample],
    widths: Sequence[float] = (),
    capture_latent: bool = False,
    n_classes: Optional[int] = None,
) -> tuple[MetricsReport, Optional[LatentDump]]:
    """Segmentation metrics, optional trimap curve and latent dump over ``split``.

    Raises:
        DegenerateInputError: the split is empty.
    """
    split = list(split)
    if not split:
        raise DegenerateInputError("evaluation split is empty")
    if n_classes is None:
        top = max(int(s.labels.max()) for s in split) + 1
        n_classes = max(top, _model_classes(model))
    cm = np.zeros((n_classes, n_classes), dtype=np.int64)
    preds, gts, dumps = [], [], []
    for start in range(0, len(split), EVAL_CHUNK):
        chunk = split[start : start + EVAL_CHUNK]
        images = np.stack([s.image for s in chunk])
        labels = np.stack([s.labels for s in chunk]).astype(np.int64)
        if capture_latent and not callable(model):
            logits, _, dump = forward(model, images, ("S",), capture_latent=True, labels=labels)
            pred = np.argmax(logits["S"], axis=1)
            dump.sample = dump.sample + start
            dumps.append(dump)
        else:
            pred = predict_labels(model, images)
        cm += confusion(pred, labels, n_classes=n_classes)
        preds.append(pred)
        gts.append(labels)
    curve = trimap_curve(np.concatenate(preds), np.concatenate(gts), widths) if widths else []
    latent = None
    if dumps:
        latent = LatentDump(
            np.concatenate([d.vectors for d in dumps]),
            np.concatenate([d.tags for d in dumps]),
            np.concatenate([d.sample for d in dumps]),
        )
    lm = None
    if latent is not None and len(np.unique(latent.tags)) >= 2:
        lm = latent_metrics(latent)
    return MetricsReport(seg_metrics(cm), curve, lm), latent


def evaluate_epoch(model: Union[Params, Predictor], split: Sequence[Sample], n_classes: Optional[int] = None) -> MetricsReport:
    """Argmax segmentation metrics of ``model`` (parameters or a logits callable) on ``split``."""
    return evaluate_split(model, split, n_classes=n_classes)[0]


def _model_classes(model) -> int:
    if callable(model):
        return 0
    return model["head_S.1.w"].shape[0]
