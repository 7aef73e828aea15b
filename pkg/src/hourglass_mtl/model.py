"""Shared-trunk encoder-decoder with four task heads.

Trunk: ``stages`` encoder blocks (3x3 conv, ReLU, 2x2 max-pool), a 3x3
bottleneck conv with ReLU, then mirrored decoder blocks (unpool with the
matching encoder indices, 3x3 conv, ReLU). Each head is a 1x1 conv with ReLU
followed by an 8x8 conv producing the task logits at input resolution.

Parameters are an ordered ``dict`` of float64 arrays. The backward pass
propagates each task's upstream gradient through the trunk on its own and
sums the per-task trunk gradients in fixed task order, so the joint gradient
is bit-identical to the sum of single-task gradients.
"""

from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import Iterable, Mapping, Optional

import numpy as np

from .errors import ConfigurationError, DimensionError, FormatError, StateError
from .losses import TASKS
from .tensor import (
    conv2d_backward,
    conv2d_forward,
    maxpool2x2,
    maxpool2x2_backward,
    maxunpool2x2,
    maxunpool2x2_backward,
    relu,
    relu_backward,
)

Params = dict[str, np.ndarray]

MAGIC = b"MTLHG1"
FORMAT_VERSION = 1
HEAD_KERNEL = 8


@dataclass(frozen=True)
class ModelConfig:
    in_channels: int = 3
    n_classes: int = 4
    n_bins: int = 6
    stages: int = 3
    base_width: int = 16
    input_size: int = 64

    def __post_init__(self):
        for name in ("in_channels", "n_classes", "n_bins", "stages", "base_width", "input_size"):
            v = getattr(self, name)
            if int(v) != v or v < 1:
                raise ConfigurationError(f"{name} must be a positive integer, got {v}")
        if self.input_size % (1 << self.stages):
            raise ConfigurationError(
                f"input size {self.input_size} is not divisible by 2^{self.stages}"
            )

    def width(self, stage: int) -> int:
        return self.base_width << stage

    def head_depth(self, task: str) -> int:
        return {"E": 1, "S": self.n_classes, "C": self.n_classes, "D": self.n_bins}[task]

    @property
    def block(self) -> int:
        """Input pixels per bottleneck cell along each axis."""
        return 1 << self.stages


@dataclass
class LatentDump:
    """Bottleneck feature vectors, one per bottleneck cell, with their block's majority class."""

    vectors: np.ndarray  # (m, channels)
    tags: Optional[np.ndarray]  # (m,) int64 or None when no labels were supplied
    sample: np.ndarray  # (m,) index of the source image


def _conv_specs(cfg: ModelConfig):
    """(name, out_c, in_c, k) for every conv in canonical order."""
    specs = []
    c_in = cfg.in_channels
    for s in range(cfg.stages):
        specs.append((f"enc{s}", cfg.width(s), c_in, 3))
        c_in = cfg.width(s)
    specs.append(("bott", c_in, c_in, 3))
    for s in reversed(range(cfg.stages)):
        out = cfg.width(s - 1) if s > 0 else cfg.base_width
        specs.append((f"dec{s}", out, cfg.width(s), 3))
    for t in TASKS:
        d = cfg.head_depth(t)
        specs.append((f"head_{t}.0", d, cfg.base_width, 1))
        specs.append((f"head_{t}.1", d, d, HEAD_KERNEL))
    return specs


def prior_logits(frequencies, floor: float = 1e-4) -> np.ndarray:
    """Log-odds ``log(f / (1 - f))`` of label frequencies, clipped to ``[floor, 1 - floor]``."""
    f = np.clip(np.asarray(frequencies, dtype=np.float64), floor, 1.0 - floor)
    return np.log(f) - np.log1p(-f)


def init_params(cfg: ModelConfig, seed: int = 0, output_bias: Optional[Mapping[str, np.ndarray]] = None) -> Params:
    """He-uniform weights ``U(-sqrt(6/fan_in), sqrt(6/fan_in))``, zero biases.

    Args:
        cfg: architecture.
        seed: RNG seed for the weights.
        output_bias: optional per-task initial bias of the final head conv,
            typically :func:`prior_logits` of the training label frequencies.
            Starting each sigmoid at its class prior keeps the narrow head
            ReLUs from being driven dead by the early push toward the priors.
    """
    rng = np.random.default_rng(seed)
    params: Params = {}
    for name, out_c, in_c, k in _conv_specs(cfg):
        bound = np.sqrt(6.0 / (in_c * k * k))
        params[f"{name}.w"] = rng.uniform(-bound, bound, size=(out_c, in_c, k, k))
        params[f"{name}.b"] = np.zeros(out_c)
    for t, bias in (output_bias or {}).items():
        key = f"head_{t}.1.b"
        if key not in params:
            raise ConfigurationError(f"unknown task {t!r} in output_bias")
        bias = np.asarray(bias, dtype=np.float64).reshape(-1)
        if bias.shape != params[key].shape:
            raise DimensionError(f"task {t} output bias has {bias.size} entries, head has {params[key].size}")
        params[key] = bias.copy()
    return params


def zeros_like_params(params: Mapping[str, np.ndarray]) -> Params:
    return {k: np.zeros_like(v) for k, v in params.items()}


def infer_config(params: Mapping[str, np.ndarray], input_size: Optional[int] = None) -> ModelConfig:
    """Recover the architecture from parameter shapes."""
    stages = sum(1 for k in params if k.startswith("enc") and k.endswith(".w"))
    try:
        enc0 = params["enc0.w"]
        cfg = ModelConfig(
            in_channels=enc0.shape[1],
            n_classes=params["head_S.1.w"].shape[0],
            n_bins=params["head_D.1.w"].shape[0],
            stages=stages,
            base_width=enc0.shape[0],
            input_size=input_size or (1 << stages),
        )
    except KeyError as exc:
        raise FormatError(f"parameter set lacks {exc.args[0]!r}") from None
    expected = {f"{n}.w": (o, i, k, k) for n, o, i, k in _conv_specs(cfg)}
    expected.update({f"{n}.b": (o,) for n, o, _, _ in _conv_specs(cfg)})
    if set(expected) != set(params):
        raise FormatError("parameter names do not match any supported architecture")
    for k, shape in expected.items():
        if params[k].shape != shape:
            raise FormatError(f"parameter {k!r} has shape {params[k].shape}, expected {shape}")
    return cfg


def _conv_relu(params, name, x, pad):
    a = conv2d_forward(x, params[f"{name}.w"], params[f"{name}.b"], 1, pad)
    return a, relu(a)


def _head_forward(params, t, feat):
    a0, h0 = _conv_relu(params, f"head_{t}.0", feat, 0)
    out = conv2d_forward(h0, params[f"head_{t}.1.w"], params[f"head_{t}.1.b"], 1, HEAD_KERNEL // 2)
    # even kernel: pad 4 yields one extra row and column; drop the last of each
    return (a0, h0), out[:, :, : feat.shape[2], : feat.shape[3]]


def _block_tags(labels: np.ndarray, block: int, n_classes: int) -> np.ndarray:
    n, h, w = labels.shape
    hb, wb = h // block, w // block
    cells = labels.reshape(n, hb, block, wb, block).transpose(0, 1, 3, 2, 4).reshape(n * hb * wb, -1)
    counts = np.zeros((cells.shape[0], n_classes), dtype=np.int64)
    np.add.at(counts, (np.repeat(np.arange(cells.shape[0]), cells.shape[1]), cells.reshape(-1)), 1)
    return counts.argmax(axis=1)  # ties go to the lowest class id


def forward(
    params: Mapping[str, np.ndarray],
    images,
    tasks: Iterable[str] = TASKS,
    capture_latent: bool = False,
    labels: Optional[np.ndarray] = None,
):
    """Run the network.

    Args:
        params: parameter dict from :func:`init_params`.
        images: ``(n, c, h, w)`` batch; ``h`` and ``w`` divisible by ``2**stages``.
        tasks: heads to evaluate.
        capture_latent: also return a :class:`LatentDump` of the bottleneck.
        labels: optional ``(n, h, w)`` ground truth used to tag latent cells.

    Returns:
        ``(logits, cache, dump)`` where ``logits`` maps task letters to
        ``(n, depth, h, w)`` arrays and ``dump`` is ``None`` unless requested.
    """
    x = np.asarray(images, dtype=np.float64)
    cfg = infer_config(params)
    if x.ndim != 4 or x.shape[1] != cfg.in_channels:
        raise DimensionError(f"expected (n, {cfg.in_channels}, h, w) images, got shape {x.shape}")
    for axis, extent in (("height", x.shape[2]), ("width", x.shape[3])):
        if extent == 0 or extent % cfg.block:
            raise DimensionError(f"{axis} {extent} is not a positive multiple of {cfg.block}")
    tasks = tuple(t for t in TASKS if t in set(tasks))
    if not tasks:
        raise ConfigurationError("no task head requested")

    trunk = []  # (name, conv input, pre-activation) in forward order
    indices = []
    h = x
    for s in range(cfg.stages):
        a, r = _conv_relu(params, f"enc{s}", h, 1)
        trunk.append((f"enc{s}", h, a))
        h, idx = maxpool2x2(r)
        indices.append(idx)
    a, r = _conv_relu(params, "bott", h, 1)
    trunk.append(("bott", h, a))
    h = latent = r
    for s in reversed(range(cfg.stages)):
        u = maxunpool2x2(h, indices[s])
        a, h = _conv_relu(params, f"dec{s}", u, 1)
        trunk.append((f"dec{s}", u, a))
    feat = h

    logits, heads = {}, {}
    for t in tasks:
        heads[t], logits[t] = _head_forward(params, t, feat)

    cache = {
        "cfg": cfg,
        "tasks": tasks,
        "trunk": trunk,
        "indices": indices,
        "feat": feat,
        "heads": heads,
        "shapes": {k: v.shape for k, v in params.items()},
        "logit_shapes": {t: v.shape for t, v in logits.items()},
    }
    dump = None
    if capture_latent:
        n, c, hb, wb = latent.shape
        vectors = latent.transpose(0, 2, 3, 1).reshape(n * hb * wb, c).copy()
        tags = None
        if labels is not None:
            lab = np.asarray(labels)
            if lab.shape != (n, x.shape[2], x.shape[3]):
                raise DimensionError(f"labels shape {lab.shape} does not match images {x.shape}")
            tags = _block_tags(lab.astype(np.int64), cfg.block, max(cfg.n_classes, int(lab.max()) + 1))
        dump = LatentDump(vectors, tags, np.repeat(np.arange(n), hb * wb))
    return logits, cache, dump


def _trunk_backward(params, cache, g_feat, grads):
    """Accumulate trunk gradients for one task's upstream gradient at the decoder output."""
    cfg = cache["cfg"]
    trunk = cache["trunk"]
    indices = cache["indices"]
    g = g_feat
    pos = len(trunk) - 1
    for s in range(cfg.stages):  # decoder, last stage first
        name, u, a = trunk[pos]
        gx, gw, gb = conv2d_backward(u, params[f"{name}.w"], relu_backward(a, g), 1, 1)
        grads[f"{name}.w"] += gw
        grads[f"{name}.b"] += gb
        g = maxunpool2x2_backward(gx, indices[s])
        pos -= 1
    name, u, a = trunk[pos]
    gx, gw, gb = conv2d_backward(u, params["bott.w"], relu_backward(a, g), 1, 1)
    grads["bott.w"] += gw
    grads["bott.b"] += gb
    g = gx
    for s in reversed(range(cfg.stages)):
        pos -= 1
        name, inp, a = trunk[pos]
        g = maxpool2x2_backward(g, indices[s])
        gx, gw, gb = conv2d_backward(inp, params[f"{name}.w"], relu_backward(a, g), 1, 1)
        grads[f"{name}.w"] += gw
        grads[f"{name}.b"] += gb
        g = gx


def _head_backward(params, cache, t, g_logits, grads):
    feat = cache["feat"]
    a0, h0 = cache["heads"][t]
    n, d, hh, ww = g_logits.shape
    g_full = np.zeros((n, d, hh + 1, ww + 1))
    g_full[:, :, :hh, :ww] = g_logits
    g_h0, gw1, gb1 = conv2d_backward(h0, params[f"head_{t}.1.w"], g_full, 1, HEAD_KERNEL // 2)
    grads[f"head_{t}.1.w"] += gw1
    grads[f"head_{t}.1.b"] += gb1
    g_feat, gw0, gb0 = conv2d_backward(feat, params[f"head_{t}.0.w"], relu_backward(a0, g_h0), 1, 0)
    grads[f"head_{t}.0.w"] += gw0
    grads[f"head_{t}.0.b"] += gb0
    return g_feat


def backward(params: Mapping[str, np.ndarray], cache: dict, upstream: Mapping[str, np.ndarray]) -> Params:
    """Reverse-mode gradients of ``sum_t <upstream[t], logits[t]>`` w.r.t. every parameter.

    Heads absent from ``upstream`` receive zero gradients. Each task's signal
    is pushed through the trunk separately; trunk gradients are summed in
    E, S, C, D order.

    Raises:
        StateError: ``cache`` does not come from a forward pass with these
            parameter shapes, or lacks a requested task.
    """
    if not isinstance(cache, dict) or "trunk" not in cache:
        raise StateError("cache was not produced by forward()")
    if cache["shapes"] != {k: v.shape for k, v in params.items()}:
        raise StateError("parameters do not match the cached forward pass")
    grads = zeros_like_params(params)
    for t in TASKS:
        if t not in upstream:
            continue
        if t not in cache["tasks"]:
            raise StateError(f"task {t} was not evaluated in the cached forward pass")
        g = np.asarray(upstream[t], dtype=np.float64)
        if g.shape != cache["logit_shapes"][t]:
            raise StateError(f"upstream gradient for {t} has shape {g.shape}, expected {cache['logit_shapes'][t]}")
        task_grads = zeros_like_params(params)
        g_feat = _head_backward(params, cache, t, g, task_grads)
        _trunk_backward(params, cache, g_feat, task_grads)
        for k in grads:
            grads[k] += task_grads[k]
    return grads


# -- checkpoints -------------------------------------------------------------


def save_checkpoint(params: Mapping[str, np.ndarray], path) -> None:
    """Write parameters as ``MTLHG1``, u16 version, u32 count, then named f64 entries."""
    with open(path, "wb") as fh:
        fh.write(MAGIC)
        fh.write(struct.pack("<HI", FORMAT_VERSION, len(params)))
        for name, arr in params.items():
            raw = name.encode("utf-8")
            a = np.asarray(arr, dtype="<f8")
            extents = list(a.shape) + [1] * (4 - a.ndim)
            if len(extents) != 4:
                raise DimensionError(f"parameter {name!r} has more than four axes")
            fh.write(struct.pack("<H", len(raw)))
            fh.write(raw)
            fh.write(struct.pack("<4I", *extents))
            fh.write(np.ascontiguousarray(a).tobytes())


def load_checkpoint(path) -> Params:
    """Inverse of :func:`save_checkpoint`; ``.b`` entries come back one-dimensional.

    Raises:
        FormatError: bad magic, unsupported version or truncated data.
    """
    with open(path, "rb") as fh:
        blob = fh.read()
    if blob[: len(MAGIC)] != MAGIC:
        raise FormatError(f"{path}: not a checkpoint (bad magic)")
    pos = len(MAGIC)

    def take(n):
        nonlocal pos
        if pos + n > len(blob):
            raise FormatError(f"{path}: truncated checkpoint")
        chunk = blob[pos : pos + n]
        pos += n
        return chunk

    version, count = struct.unpack("<HI", take(6))
    if version != FORMAT_VERSION:
        raise FormatError(f"{path}: unsupported checkpoint version {version}")
    params: Params = {}
    for _ in range(count):
        (length,) = struct.unpack("<H", take(2))
        name = take(length).decode("utf-8")
        extents = struct.unpack("<4I", take(16))
        size = int(np.prod(extents))
        arr = np.frombuffer(take(8 * size), dtype="<f8").astype(np.float64).reshape(extents)
        params[name] = arr.reshape(-1) if name.endswith(".b") else arr
    if pos != len(blob):
        raise FormatError(f"{path}: trailing bytes after the last entry")
    return params
