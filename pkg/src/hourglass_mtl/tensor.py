"""Dense rank-4 tensors and the differentiable layer kernels built on them.

A tensor is a C-contiguous ``float64`` numpy array shaped ``(n, c, h, w)``.
All functions are pure: they never modify their inputs.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Mapping, Union

import numpy as np

from . import _kernels
from .errors import DimensionError, EvaluationError

Params = Union[np.ndarray, Mapping[str, np.ndarray]]

_AXES = ("batch", "channel", "height", "width")


def as_tensor(x, name: str = "input") -> np.ndarray:
    """Return ``x`` as a contiguous float64 rank-4 array, or raise DimensionError."""
    arr = np.ascontiguousarray(x, dtype=np.float64)
    if arr.ndim != 4:
        raise DimensionError(f"{name}: expected rank 4 (n, c, h, w), got shape {arr.shape}")
    return arr


def _check_conv(x: np.ndarray, w: np.ndarray, stride: int, pad: int) -> tuple[int, int]:
    if w.ndim != 4:
        raise DimensionError(f"weight: expected rank 4 (out_c, in_c, kh, kw), got {w.shape}")
    if x.shape[1] != w.shape[1]:
        raise DimensionError(
            f"channel axis: input has {x.shape[1]} channels, weight expects {w.shape[1]}"
        )
    if stride < 1:
        raise DimensionError(f"stride must be positive, got {stride}")
    if pad < 0:
        raise DimensionError(f"pad must be non-negative, got {pad}")
    ho = (x.shape[2] + 2 * pad - w.shape[2]) // stride + 1
    wo = (x.shape[3] + 2 * pad - w.shape[3]) // stride + 1
    if x.shape[2] + 2 * pad < w.shape[2]:
        raise DimensionError(f"height axis: padded extent {x.shape[2] + 2 * pad} < kernel {w.shape[2]}")
    if x.shape[3] + 2 * pad < w.shape[3]:
        raise DimensionError(f"width axis: padded extent {x.shape[3] + 2 * pad} < kernel {w.shape[3]}")
    return ho, wo


def _pad_wide(x: np.ndarray, pad: int, kw: int) -> tuple[np.ndarray, int, int]:
    n, c, h, w = x.shape
    hp, wp = h + 2 * pad, w + 2 * pad
    # kw spare slots: the last kernel column reads past the final padded row.
    xpf = np.zeros((n, c, hp * wp + kw))
    xpf[:, :, : hp * wp].reshape(n, c, hp, wp)[:, :, pad : pad + h, pad : pad + w] = x
    return xpf, hp, wp


def conv2d_forward(x, weight, bias, stride: int = 1, pad: int = 0) -> np.ndarray:
    """Cross-correlate ``x`` with ``weight`` and add ``bias``.

    Args:
        x: input ``(n, in_c, h, w)``.
        weight: kernel ``(out_c, in_c, kh, kw)``.
        bias: ``(out_c,)``.
        stride: step between output positions.
        pad: zero padding added on every side.

    Returns:
        ``(n, out_c, ho, wo)`` with ``ho = (h + 2*pad - kh) // stride + 1``.
    """
    x = as_tensor(x)
    w = np.ascontiguousarray(weight, dtype=np.float64)
    b = np.ascontiguousarray(bias, dtype=np.float64).reshape(-1)
    ho, wo = _check_conv(x, w, stride, pad)
    if b.shape[0] != w.shape[0]:
        raise DimensionError(f"bias axis: {b.shape[0]} entries for {w.shape[0]} output channels")
    n, cout = x.shape[0], w.shape[0]
    if stride == 1:
        xpf, _, wp = _pad_wide(x, pad, w.shape[3])
        length = ho * wp
        outw = np.empty((n, cout, length))
        _kernels.conv_fwd_wide(xpf, w, b, wp, length, outw)
        return np.ascontiguousarray(outw.reshape(n, cout, ho, wp)[:, :, :, :wo])
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    out = np.empty((n, cout, ho, wo))
    _kernels.conv_fwd_strided(xp, w, b, stride, out)
    return out


def conv2d_backward(x, weight, grad_out, stride: int = 1, pad: int = 0):
    """Gradients of :func:`conv2d_forward` for upstream gradient ``grad_out``.

    Returns ``(grad_input, grad_weight, grad_bias)``.
    """
    x = as_tensor(x)
    w = np.ascontiguousarray(weight, dtype=np.float64)
    g = as_tensor(grad_out, "upstream gradient")
    ho, wo = _check_conv(x, w, stride, pad)
    expected = (x.shape[0], w.shape[0], ho, wo)
    for axis, (got, want) in enumerate(zip(g.shape, expected)):
        if got != want:
            raise DimensionError(f"upstream gradient {_AXES[axis]} axis: got {got}, expected {want}")
    n, cin, h, wd = x.shape
    cout = w.shape[0]
    gw = np.empty_like(w)
    gb = _kernels.channel_sums(g)
    if stride == 1:
        xpf, hp, wp = _pad_wide(x, pad, w.shape[3])
        length = ho * wp
        gwide = np.zeros((n, cout, ho, wp))
        gwide[:, :, :, :wo] = g
        gwide = gwide.reshape(n, cout, length)
        _kernels.conv_bwd_w_wide(xpf, gwide, wp, length, gw)
        gxpf = np.empty_like(xpf)
        _kernels.conv_bwd_x_wide(w, gwide, wp, length, gxpf)
        gx = gxpf[:, :, : hp * wp].reshape(n, cin, hp, wp)[:, :, pad : pad + h, pad : pad + wd]
        return np.ascontiguousarray(gx), gw, gb
    xp = np.pad(x, ((0, 0), (0, 0), (pad, pad), (pad, pad)))
    _kernels.conv_bwd_w_strided(xp, g, stride, gw)
    gxp = np.empty_like(xp)
    _kernels.conv_bwd_x_strided(w, g, stride, gxp)
    return np.ascontiguousarray(gxp[:, :, pad : pad + h, pad : pad + wd]), gw, gb


def maxpool2x2(x) -> tuple[np.ndarray, np.ndarray]:
    """2x2 max pooling with stride 2.

    Returns the pooled tensor and, for each output element, the flat index
    ``row * w + col`` of the winning input position within its channel plane.
    Ties go to the lowest flat index.
    """
    x = as_tensor(x)
    n, c, h, w = x.shape
    if h % 2 or w % 2:
        axis = "height" if h % 2 else "width"
        raise DimensionError(f"{axis} axis must be even for 2x2 pooling, got {x.shape}")
    win = x.reshape(n, c, h // 2, 2, w // 2, 2).transpose(0, 1, 2, 4, 3, 5).reshape(n, c, h // 2, w // 2, 4)
    # argmax returns the first maximum; window order (0,0),(0,1),(1,0),(1,1)
    # is increasing in flat index, so this is the lowest-index tie rule.
    k = np.argmax(win, axis=-1)
    out = np.take_along_axis(win, k[..., None], axis=-1)[..., 0]
    rows = 2 * np.arange(h // 2)[:, None] + k // 2
    cols = 2 * np.arange(w // 2)[None, :] + k % 2
    return np.ascontiguousarray(out), (rows * w + cols).astype(np.int64)


def _check_indices(x: np.ndarray, indices: np.ndarray) -> None:
    if indices.shape != x.shape:
        raise DimensionError(f"indices shape {indices.shape} does not match pooled shape {x.shape}")
    w2 = 2 * x.shape[3]
    rows, cols = np.divmod(indices, w2)
    wr = np.arange(x.shape[2])[:, None]
    wc = np.arange(x.shape[3])[None, :]
    if indices.size and not (np.all(rows // 2 == wr) and np.all(cols // 2 == wc) and np.all(indices >= 0)):
        raise DimensionError("pool indices point outside their own 2x2 windows")


def maxunpool2x2(x, indices) -> np.ndarray:
    """Place each pooled value at its recorded argmax; zeros elsewhere."""
    x = as_tensor(x)
    indices = np.asarray(indices)
    _check_indices(x, indices)
    n, c, h, w = x.shape
    out = np.zeros((n, c, 4 * h * w))
    np.put_along_axis(out, indices.reshape(n, c, -1), x.reshape(n, c, -1), axis=-1)
    return out.reshape(n, c, 2 * h, 2 * w)


def maxpool2x2_backward(grad_out, indices) -> np.ndarray:
    """Route each pooled gradient back to its argmax position."""
    return maxunpool2x2(grad_out, indices)


def maxunpool2x2_backward(grad_out, indices) -> np.ndarray:
    g = as_tensor(grad_out, "upstream gradient")
    indices = np.asarray(indices)
    n, c, h, w = indices.shape
    if g.shape != (n, c, 2 * h, 2 * w):
        raise DimensionError(f"upstream gradient shape {g.shape} does not match indices {indices.shape}")
    flat = np.take_along_axis(g.reshape(n, c, -1), indices.reshape(n, c, -1), axis=-1)
    return flat.reshape(n, c, h, w)


def relu(x) -> np.ndarray:
    return np.maximum(np.asarray(x, dtype=np.float64), 0.0)


def relu_backward(x, grad_out) -> np.ndarray:
    """Derivative of relu at pre-activation ``x`` (zero at ``x == 0``)."""
    return np.where(np.asarray(x) > 0.0, grad_out, 0.0)


def sigmoid(x) -> np.ndarray:
    x = np.asarray(x, dtype=np.float64)
    e = np.exp(-np.abs(x))
    return np.where(x >= 0.0, 1.0 / (1.0 + e), e / (1.0 + e))


def sigmoid_backward(y, grad_out) -> np.ndarray:
    """Derivative of sigmoid given its cached output ``y``."""
    y = np.asarray(y, dtype=np.float64)
    return grad_out * y * (1.0 - y)


@dataclass(frozen=True)
class GradCheckReport:
    max_rel_error: float
    n_checked: int
    passed: bool
    tolerance: float


def _as_dict(params: Params) -> tuple[dict[str, np.ndarray], bool]:
    if isinstance(params, np.ndarray):
        return {"x": params}, True
    return dict(params), False


def grad_check(
    f: Callable,
    params: Params,
    tolerance: float = 1e-4,
    step: float = 1e-5,
    fraction: float = 1.0,
    seed: int = 0,
) -> GradCheckReport:
    """Compare the analytic gradient of a scalar map with central differences.

    Args:
        f: called as ``f(params)`` and returning ``(value, grads)``, where
            ``grads`` has the same structure as ``params`` (a single array or
            a mapping of named arrays).
        params: point at which to check; never modified.
        tolerance: maximum admissible relative error.
        step: central-difference half step.
        fraction: share of entries to check, drawn without replacement.
        seed: seed for that draw.

    The relative error of each entry is ``|a - n| / max(|a|, |n|, 1e-8)``.

    Raises:
        EvaluationError: ``f`` returned a non-finite value or gradient.
    """
    base, single = _as_dict(params)
    work = {k: np.array(v, dtype=np.float64, copy=True) for k, v in base.items()}

    def call():
        value, grads = f(work["x"] if single else work)
        value = float(value)
        if not np.isfinite(value):
            raise EvaluationError(f"function value is not finite: {value}")
        return value, grads

    _, grads = call()
    grads = {"x": grads} if single else dict(grads)
    for k, g in grads.items():
        if not np.all(np.isfinite(g)):
            raise EvaluationError(f"analytic gradient for {k!r} is not finite")

    rng = np.random.default_rng(seed)
    worst = 0.0
    count = 0
    for name, arr in work.items():
        flat = arr.reshape(-1)
        analytic = np.asarray(grads[name], dtype=np.float64).reshape(-1)
        if fraction >= 1.0:
            picks = np.arange(flat.size)
        else:
            k = max(1, int(round(fraction * flat.size)))
            picks = np.sort(rng.choice(flat.size, size=k, replace=False))
        for j in picks:
            orig = flat[j]
            flat[j] = orig + step
            fp, _ = call()
            flat[j] = orig - step
            fm, _ = call()
            flat[j] = orig
            num = (fp - fm) / (2.0 * step)
            a = analytic[j]
            err = abs(a - num) / max(abs(a), abs(num), 1e-8)
            worst = max(worst, err)
            count += 1
    return GradCheckReport(worst, count, worst <= tolerance, tolerance)
