"""2D convolution: a cache-blocked im2col + GEMM fast path and a
direct-loop oracle.

Stride is always 1. Square odd kernels only; 3x3 layers use
padding = dilation so feature maps keep their spatial size, 1x1 layers use
padding 0. The naive implementation exists purely as an independent
reference for testing the fast path and is never called by the network.

The fast path flattens each padded sample plane so that every kernel tap
becomes one contiguous slice, gathers a band of output rows into a small
column block (sized to stay cache resident), and runs one GEMM per band
over the padded width. The out-of-row overhang columns are garbage and get
trimmed when the band is written back.
"""

from __future__ import annotations

import threading

import numpy as np

from .errors import ParameterError, UnsupportedError
from .tensor import Tensor, _make

__all__ = ["conv2d", "conv2d_raw", "conv2d_naive", "conv_output_size"]

# column blocks above this size stop fitting comfortably in L2/L3
_BLOCK_BYTES = 1 << 19

_scratch_tls = threading.local()


def _scratch(tag: str, shape: tuple[int, ...], dtype) -> np.ndarray:
    """Reusable per-thread buffer; avoids large-allocation churn per call."""
    store = getattr(_scratch_tls, "store", None)
    if store is None:
        store = _scratch_tls.store = {}
    key = (tag, shape, np.dtype(dtype).str)
    buf = store.get(key)
    if buf is None:
        buf = store[key] = np.empty(shape, dtype)
    return buf


def conv_output_size(size: int, k: int, dilation: int, padding: int) -> int:
    return size + 2 * padding - dilation * (k - 1)


def _band_shape(n: int, oh: int, ckk: int, wp: int, itemsize: int) -> tuple[int, int]:
    """Rows per band and samples per group so one column block stays within
    the cache budget; whole samples are grouped when they fit."""
    per_row = max(1, ckk * wp * itemsize)
    rows = max(1, min(oh, _BLOCK_BYTES // per_row))
    if rows < oh:
        return rows, 1
    return oh, max(1, min(n, _BLOCK_BYTES // (per_row * oh)))


def _check_conv_args(x_shape, w_shape, dilation: int, padding: int) -> None:
    n, cin, h, w = x_shape
    cout, cin_w, kh, kw = w_shape
    if kh != kw:
        raise UnsupportedError(f"kernel must be square, got {kh}x{kw}")
    if kh % 2 == 0:
        raise UnsupportedError(f"even kernel size {kh} is not supported")
    if cin != cin_w:
        raise ParameterError(f"input has {cin} channels but weight expects {cin_w}")
    if dilation < 1:
        raise ParameterError(f"dilation must be >= 1, got {dilation}")
    if padding < 0:
        raise ParameterError(f"padding must be >= 0, got {padding}")
    if conv_output_size(h, kh, dilation, padding) < 1 or conv_output_size(w, kh, dilation, padding) < 1:
        raise ParameterError(
            f"kernel {kh}x{kh} dilation {dilation} does not fit input {h}x{w} with padding {padding}")


def _flat_padded(x: np.ndarray, padding: int, overhang: int) -> tuple[np.ndarray, int, int]:
    """Copy ``x`` into flattened zero-padded planes with ``overhang`` spare
    elements at the end of each plane (so every tap slice stays in bounds)."""
    n, c, h, w = x.shape
    hp, wp = h + 2 * padding, w + 2 * padding
    flat = _scratch("flat", (n, c, hp * wp + overhang), x.dtype)
    if padding or overhang:
        flat.fill(0)
    planes = flat[:, :, :hp * wp].reshape(n, c, hp, wp)
    planes[:, :, padding:padding + h, padding:padding + w] = x
    return flat, hp, wp


def conv2d_raw(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
               dilation: int = 1, padding: int = 0,
               out: np.ndarray | None = None) -> np.ndarray:
    """Forward convolution on plain arrays; shared by forward and backward."""
    _check_conv_args(x.shape, weight.shape, dilation, padding)
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    oh = conv_output_size(h, k, dilation, padding)
    ow = conv_output_size(w, k, dilation, padding)
    b_col = None if bias is None else np.asarray(bias).reshape(cout, 1)

    if k == 1 and padding == 0:
        wm = weight.reshape(cout, cin)
        res = np.matmul(wm, x.reshape(n, cin, h * w), out=None if out is None else out.reshape(n, cout, h * w))
        res = res.reshape(n, cout, oh, ow)
        if b_col is not None:
            res += b_col.reshape(1, cout, 1, 1)
        return res

    span = dilation * (k - 1)
    flat, hp, wp = _flat_padded(x, padding, span)
    wm = weight.reshape(cout, cin * k * k)
    result = np.empty((n, cout, oh, ow), dtype=x.dtype) if out is None else out

    rows, group = _band_shape(n, oh, cin * k * k, wp, x.dtype.itemsize)
    col = _scratch("col", (group, cin, k * k, rows * wp), x.dtype)
    band_out = _scratch("band_out", (group, cout, rows * wp), x.dtype)

    offsets = [(ki * dilation * wp + kj * dilation, ki * k + kj)
               for ki in range(k) for kj in range(k)]
    for g0 in range(0, n, group):
        ng = min(group, n - g0)
        planes = flat[g0:g0 + ng]
        for r0 in range(0, oh, rows):
            nr = min(rows, oh - r0)
            cols = nr * wp
            cblk = col[:ng, :, :, :cols]
            for off, tap in offsets:
                start = off + r0 * wp
                cblk[:, :, tap, :] = planes[:, :, start:start + cols]
            oblk = band_out[:ng, :, :cols]
            np.matmul(wm, cblk.reshape(ng, cin * k * k, cols), out=oblk)
            if b_col is not None:
                oblk += b_col
            result[g0:g0 + ng, :, r0:r0 + nr, :] = (
                oblk.reshape(ng, cout, nr, wp)[:, :, :, :ow])
    return result


def _conv2d_grad_w(g: np.ndarray, x: np.ndarray, w_shape, dilation: int, padding: int) -> np.ndarray:
    """Weight gradient via the same banded column blocks as the forward."""
    n, cin, h, w = x.shape
    cout, _, k, _ = w_shape
    oh, ow = g.shape[2], g.shape[3]

    if k == 1 and padding == 0:
        gm = np.matmul(g.reshape(n, cout, oh * ow), x.reshape(n, cin, oh * ow).transpose(0, 2, 1))
        return gm.sum(axis=0, dtype=x.dtype).reshape(w_shape)

    span = dilation * (k - 1)
    flat, hp, wp = _flat_padded(x, padding, span)
    rows, group = _band_shape(n, oh, cin * k * k, wp, x.dtype.itemsize)
    col = _scratch("col", (group, cin, k * k, rows * wp), x.dtype)
    # gradient rows embedded at the padded width, overhang columns zeroed so
    # they cancel the garbage columns of the column block
    gwide = _scratch("gwide", (group, cout, rows * wp), x.dtype)
    gwide.fill(0)
    gw = np.zeros((cout, cin * k * k), dtype=np.float64)

    offsets = [(ki * dilation * wp + kj * dilation, ki * k + kj)
               for ki in range(k) for kj in range(k)]
    for g0 in range(0, n, group):
        ng = min(group, n - g0)
        planes = flat[g0:g0 + ng]
        for r0 in range(0, oh, rows):
            nr = min(rows, oh - r0)
            cols = nr * wp
            cblk = col[:ng, :, :, :cols]
            for off, tap in offsets:
                start = off + r0 * wp
                cblk[:, :, tap, :] = planes[:, :, start:start + cols]
            gblk = gwide[:ng, :, :cols].reshape(ng, cout, nr, wp)
            gblk[:, :, :, :ow] = g[g0:g0 + ng, :, r0:r0 + nr, :]
            part = np.matmul(gwide[:ng, :, :cols],
                             cblk.reshape(ng, cin * k * k, cols).transpose(0, 2, 1))
            gw += part.sum(axis=0)
    return gw.astype(x.dtype).reshape(w_shape)


def _conv2d_grads(g: np.ndarray, x: np.ndarray, weight: np.ndarray,
                  dilation: int, padding: int,
                  need_x: bool, need_w: bool):
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape

    gx = gw = None
    if need_w:
        gw = _conv2d_grad_w(g, x, weight.shape, dilation, padding)
    if need_x:
        # Gradient w.r.t. the padded input is the full correlation of g with
        # the spatially flipped kernel (channels swapped); slice off the pad.
        wt = np.ascontiguousarray(weight.transpose(1, 0, 2, 3)[:, :, ::-1, ::-1])
        full = conv2d_raw(g, wt, None, dilation=dilation, padding=dilation * (k - 1))
        if padding:
            gx = np.ascontiguousarray(full[:, :, padding:padding + h, padding:padding + w])
        else:
            gx = full
    gb = g.sum(axis=(0, 2, 3))
    return gx, gw, gb


def conv2d(x: Tensor, weight: Tensor, bias: Tensor | None = None,
           dilation: int = 1, padding: int = 0) -> Tensor:
    """Differentiable convolution of ``x`` with ``weight`` plus ``bias``.

    ``bias`` is stored rank-4 as (1, cout, 1, 1); gradients are defined for
    all three operands.
    """
    cout = weight.shape[0]
    if bias is not None and bias.shape != (1, cout, 1, 1):
        raise ParameterError(f"bias must have shape {(1, cout, 1, 1)}, got {bias.shape}")
    b_arr = bias.data if bias is not None else None
    out = conv2d_raw(x.data, weight.data, b_arr, dilation, padding)
    inputs = (x, weight) if bias is None else (x, weight, bias)

    def bwd(g):
        gx, gw, gb = _conv2d_grads(
            g, x.data, weight.data, dilation, padding,
            need_x=x.requires_grad, need_w=weight.requires_grad)
        if bias is None:
            return (gx, gw)
        return (gx, gw, gb.reshape(1, cout, 1, 1))

    return _make("conv2d", out, inputs, bwd)


def conv2d_naive(x: np.ndarray, weight: np.ndarray, bias: np.ndarray | None,
                 dilation: int = 1, padding: int = 0) -> np.ndarray:
    """Direct-loop reference convolution. Slow; for verification only."""
    _check_conv_args(x.shape, weight.shape, dilation, padding)
    n, cin, h, w = x.shape
    cout, _, k, _ = weight.shape
    oh = conv_output_size(h, k, dilation, padding)
    ow = conv_output_size(w, k, dilation, padding)
    xp = np.asarray(x, dtype=np.float64)
    if padding:
        xp = np.pad(xp, ((0, 0), (0, 0), (padding, padding), (padding, padding)))
    wgt = np.asarray(weight, dtype=np.float64)
    out = np.zeros((n, cout, oh, ow))
    for ni in range(n):
        for co in range(cout):
            for i in range(oh):
                for j in range(ow):
                    acc = 0.0
                    for ci in range(cin):
                        for ki in range(k):
                            for kj in range(k):
                                acc += (xp[ni, ci, i + ki * dilation, j + kj * dilation]
                                        * wgt[co, ci, ki, kj])
                    out[ni, co, i, j] = acc
            if bias is not None:
                out[ni, co] += bias.reshape(-1)[co]
    return out
