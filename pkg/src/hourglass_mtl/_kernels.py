"""Compiled convolution kernels.

Every kernel accumulates each output element in one fixed order (bias first,
then input channel, kernel row, kernel column) and parallelises only over
independent output elements, so results are bit-identical for any thread
count.

The stride-1 kernels use a "wide row" layout: the zero-padded input plane is
flattened and the output is computed on a grid as wide as the padded input,
which turns the innermost loop into one long contiguous run. Columns past the
true output width are junk and are cropped (forward) or zeroed (backward).
"""

import os
import warnings

import numba
import numpy as np
from numba import njit, prange

# The bundled TBB is often too old; try OpenMP first so numba never warns.
if "NUMBA_THREADING_LAYER" not in os.environ:
    numba.config.THREADING_LAYER_PRIORITY = ["omp", "workqueue", "tbb"]
warnings.filterwarnings("ignore", message=".*TBB.*", category=numba.NumbaWarning)


def set_threads_from_env() -> int:
    """Cap the worker pool at ``MTL_THREADS`` if set; return the active count."""
    raw = os.environ.get("MTL_THREADS")
    if raw:
        try:
            want = int(raw)
        except ValueError:
            want = 0
        if want > 0:
            numba.set_num_threads(min(want, numba.config.NUMBA_NUM_THREADS))
    return numba.get_num_threads()


@njit(cache=True, parallel=True)
def conv_fwd_wide(xpf, w, b, wp, length, outw):
    n, cout = outw.shape[0], outw.shape[1]
    cin, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    for t in prange(n * cout):
        i = t // cout
        co = t % cout
        o = outw[i, co]
        bv = b[co]
        for p in range(length):
            o[p] = bv
        for ci in range(cin):
            src = xpf[i, ci]
            for ki in range(kh):
                for kj in range(kw):
                    wv = w[co, ci, ki, kj]
                    off = ki * wp + kj
                    s = src[off:off + length]
                    for p in range(length):
                        o[p] += wv * s[p]


@njit(cache=True, fastmath={"reassoc"})
def _dot(a, b, length):
    # Reassociation lets LLVM vectorize the reduction; the compiled lane order is
    # fixed, so the result depends only on the inputs, never on the thread count.
    acc = 0.0
    for p in range(length):
        acc += a[p] * b[p]
    return acc


@njit(cache=True, parallel=True)
def conv_bwd_w_wide(xpf, gwide, wp, length, gw):
    cout, cin, kh, kw = gw.shape
    n = gwide.shape[0]
    for t in prange(cout * cin):
        co = t // cin
        ci = t % cin
        for ki in range(kh):
            for kj in range(kw):
                off = ki * wp + kj
                acc = 0.0
                for i in range(n):
                    acc += _dot(gwide[i, co], xpf[i, ci, off:off + length], length)
                gw[co, ci, ki, kj] = acc


@njit(cache=True, parallel=True)
def conv_bwd_x_wide(w, gwide, wp, length, gxpf):
    n, cin = gxpf.shape[0], gxpf.shape[1]
    cout, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    for t in prange(n * cin):
        i = t // cin
        ci = t % cin
        gx = gxpf[i, ci]
        gx[:] = 0.0
        for co in range(cout):
            g = gwide[i, co]
            for ki in range(kh):
                for kj in range(kw):
                    wv = w[co, ci, ki, kj]
                    off = ki * wp + kj
                    d = gx[off:off + length]
                    for p in range(length):
                        d[p] += wv * g[p]


@njit(cache=True, parallel=True)
def conv_fwd_strided(xp, w, b, stride, out):
    n, cout, ho, wo = out.shape
    cin, kh, kw = w.shape[1], w.shape[2], w.shape[3]
    for t in prange(n * cout):
        i = t // cout
        co = t % cout
        o = out[i, co]
        o[:, :] = b[co]
        for ci in range(cin):
            for ki in range(kh):
                for kj in range(kw):
                    wv = w[co, ci, ki, kj]
                    for y in range(ho):
                        row = xp[i, ci, y * stride + ki]
                        for x in range(wo):
                            o[y, x] += wv * row[x * stride + kj]


@njit(cache=True, parallel=True)
def conv_bwd_w_strided(xp, g, stride, gw):
    cout, cin, kh, kw = gw.shape
    n, _, ho, wo = g.shape
    for t in prange(cout * cin):
        co = t // cin
        ci = t % cin
        for ki in range(kh):
            for kj in range(kw):
                acc = 0.0
                for i in range(n):
                    for y in range(ho):
                        row = xp[i, ci, y * stride + ki]
                        for x in range(wo):
                            acc += g[i, co, y, x] * row[x * stride + kj]
                gw[co, ci, ki, kj] = acc


@njit(cache=True, parallel=True)
def conv_bwd_x_strided(w, g, stride, gxp):
    n, cin = gxp.shape[0], gxp.shape[1]
    cout, kh, kw = w.shape[0], w.shape[2], w.shape[3]
    ho, wo = g.shape[2], g.shape[3]
    for t in prange(n * cin):
        i = t // cin
        ci = t % cin
        gx = gxp[i, ci]
        gx[:, :] = 0.0
        for co in range(cout):
            for ki in range(kh):
                for kj in range(kw):
                    wv = w[co, ci, ki, kj]
                    for y in range(ho):
                        for x in range(wo):
                            gx[y * stride + ki, x * stride + kj] += wv * g[i, co, y, x]


@njit(cache=True)
def channel_sums(g):
    """Sum over (batch, rows, cols) per channel in row-major order."""
    n, c, h, w = g.shape
    out = np.zeros(c)
    for co in range(c):
        acc = 0.0
        for i in range(n):
            for y in range(h):
                for x in range(w):
                    acc += g[i, co, y, x]
        out[co] = acc
    return out
