"""Differentiable ops on NCHW tensors.

Every op computes forward with plain numpy and, when a tape is active and an
input is tracked, records a closure returning one gradient per input. Spatial
resampling (average pooling, bilinear resize) is expressed through explicit
row/column weight matrices so the backward pass is the exact transpose.
"""

from __future__ import annotations

from contextlib import contextmanager
from functools import lru_cache

import numpy as np

from .tensor import ShapeError, Tensor, record

_PAD_MODES = ("zeros", "edge")


class FlopMeter:
    """Accumulates analytic floating-point operation counts per op call."""

    __slots__ = ("total",)

    def __init__(self):
        self.total = 0

    def add(self, n: int) -> None:
        self.total += int(n)


_meter: FlopMeter | None = None


@contextmanager
def metered_flops():
    """Count analytic FLOPs for every op executed inside the block."""
    global _meter
    if _meter is not None:
        raise RuntimeError("flop meter already active")
    _meter = FlopMeter()
    try:
        yield _meter
    finally:
        _meter = None


def active_meter() -> FlopMeter | None:
    return _meter


def _tally(n: int) -> None:
    if _meter is not None:
        _meter.add(n)


def _pair(v):
    if isinstance(v, (tuple, list)):
        a, b = v
        return int(a), int(b)
    return int(v), int(v)


def _check_4d(op: str, t: Tensor) -> None:
    if t.ndim != 4:
        raise ShapeError(f"{op}: expected NCHW input, got rank {t.ndim} shape {t.shape}")


# ---------------------------------------------------------------------------
# convolution


def _im2col(xp: np.ndarray, kh: int, kw: int, sh: int, sw: int, oh: int, ow: int):
    n, c = xp.shape[:2]
    cols = np.empty((n, c, kh, kw, oh, ow), dtype=xp.dtype)
    for i in range(kh):
        for j in range(kw):
            cols[:, :, i, j] = xp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw]
    return cols.reshape(n, c * kh * kw, oh * ow)


def _col2im(dcols: np.ndarray, xp_shape, kh, kw, sh, sw, oh, ow):
    n, c, hp, wp = xp_shape
    dxp = np.zeros(xp_shape, dtype=dcols.dtype)
    dcols = dcols.reshape(n, c, kh, kw, oh, ow)
    for i in range(kh):
        for j in range(kw):
            dxp[:, :, i : i + sh * oh : sh, j : j + sw * ow : sw] += dcols[:, :, i, j]
    return dxp


def _fold_padding(dxp: np.ndarray, ph: int, pw: int, mode: str) -> np.ndarray:
    if ph == 0 and pw == 0:
        return dxp
    if mode == "zeros":
        return dxp[:, :, ph : dxp.shape[2] - ph, pw : dxp.shape[3] - pw]
    # edge padding replicates border samples, so fold pad strips back on
    if ph:
        dxp[:, :, ph, :] += dxp[:, :, :ph, :].sum(axis=2)
        dxp[:, :, -ph - 1, :] += dxp[:, :, -ph:, :].sum(axis=2)
        dxp = dxp[:, :, ph:-ph, :]
    if pw:
        dxp[:, :, :, pw] += dxp[:, :, :, :pw].sum(axis=3)
        dxp[:, :, :, -pw - 1] += dxp[:, :, :, -pw:].sum(axis=3)
        dxp = dxp[:, :, :, pw:-pw]
    return dxp


def conv_output_size(in_len: int, kernel: int, stride: int, padding: int) -> int:
    out = (in_len + 2 * padding - kernel) // stride + 1
    if out < 1:
        raise ShapeError(
            f"conv2d: kernel {kernel} with padding {padding} exceeds input extent {in_len}"
        )
    return out


def conv2d(
    x: Tensor,
    weight: Tensor,
    bias: Tensor | None = None,
    stride=1,
    padding=0,
    pad_mode: str = "zeros",
) -> Tensor:
    """2-D cross-correlation, zero padding by default.

    weight is (C_out, C_in, KH, KW); output extent per axis is
    (L + 2*pad - K) // stride + 1.
    """
    _check_4d("conv2d", x)
    if pad_mode not in _PAD_MODES:
        raise ValueError(f"conv2d: pad_mode must be one of {_PAD_MODES}")
    n, c, h, w = x.shape
    cout, cin, kh, kw = weight.shape
    if cin != c:
        raise ShapeError(f"conv2d: input has {c} channels, weight expects {cin}")
    sh, sw = _pair(stride)
    ph, pw = _pair(padding)
    oh = conv_output_size(h, kh, sh, ph)
    ow = conv_output_size(w, kw, sw, pw)

    if ph or pw:
        np_mode = "constant" if pad_mode == "zeros" else "edge"
        xp = np.pad(x.data, ((0, 0), (0, 0), (ph, ph), (pw, pw)), mode=np_mode)
    else:
        xp = x.data
    cols = _im2col(xp, kh, kw, sh, sw, oh, ow)
    wmat = weight.data.reshape(cout, cin * kh * kw)
    out = np.matmul(wmat, cols).reshape(n, cout, oh, ow)
    if bias is not None:
        out = out + bias.data[None, :, None, None]
    _tally(out.size * 2 * cin * kh * kw + (0 if bias is None else out.size))
    result = Tensor(out)

    inputs = (x, weight) if bias is None else (x, weight, bias)

    def backward_fn(g):
        gmat = g.reshape(n, cout, oh * ow)
        dw = np.matmul(gmat, cols.transpose(0, 2, 1)).sum(axis=0).reshape(weight.shape)
        dcols = np.matmul(wmat.T, gmat)
        dxp = _col2im(dcols, xp.shape, kh, kw, sh, sw, oh, ow)
        dx = _fold_padding(dxp, ph, pw, pad_mode)
        if bias is None:
            return dx, dw
        return dx, dw, g.sum(axis=(0, 2, 3))

    record(inputs, result, backward_fn)
    return result


# ---------------------------------------------------------------------------
# batch normalization


def batchnorm2d(
    x: Tensor,
    gamma: Tensor,
    beta: Tensor,
    running_mean: np.ndarray,
    running_var: np.ndarray,
    eps: float,
    momentum: float,
    training: bool,
) -> Tensor:
    """Per-channel normalization with affine transform.

    Train mode normalizes with biased batch statistics over (N, H, W) and
    updates the running buffers in place as
    running <- (1 - momentum) * running + momentum * batch.
    """
    _check_4d("batchnorm2d", x)
    c = x.shape[1]
    if gamma.shape != (c,) or beta.shape != (c,):
        raise ShapeError(f"batchnorm2d: affine shape {gamma.shape} vs {c} channels")
    if training:
        mean = x.data.mean(axis=(0, 2, 3))
        var = x.data.var(axis=(0, 2, 3))
        running_mean *= 1.0 - momentum
        running_mean += momentum * mean
        running_var *= 1.0 - momentum
        running_var += momentum * var
    else:
        mean = running_mean
        var = running_var
    inv_std = 1.0 / np.sqrt(var + eps)
    xhat = (x.data - mean[None, :, None, None]) * inv_std[None, :, None, None]
    _tally(2 * x.size)
    out = Tensor(gamma.data[None, :, None, None] * xhat + beta.data[None, :, None, None])

    def backward_fn(g):
        dgamma = (g * xhat).sum(axis=(0, 2, 3))
        dbeta = g.sum(axis=(0, 2, 3))
        scale = (gamma.data * inv_std)[None, :, None, None]
        if not training:
            return g * scale, dgamma, dbeta
        m = x.data.shape[0] * x.data.shape[2] * x.data.shape[3]
        dx = (scale / m) * (
            m * g
            - dbeta[None, :, None, None]
            - xhat * dgamma[None, :, None, None]
        )
        return dx, dgamma, dbeta

    record((x, gamma, beta), out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# activations and channel softmax


def relu(x: Tensor) -> Tensor:
    _tally(x.size)
    out = Tensor(np.maximum(x.data, 0))

    def backward_fn(g):
        return (g * (x.data > 0),)

    record((x,), out, backward_fn)
    return out


def sigmoid(x: Tensor) -> Tensor:
    _tally(4 * x.size)
    d = x.data
    y = np.empty_like(d)
    pos = d >= 0
    y[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
    ex = np.exp(d[~pos])
    y[~pos] = ex / (1.0 + ex)
    out = Tensor(y)

    def backward_fn(g):
        return (g * y * (1.0 - y),)

    record((x,), out, backward_fn)
    return out


def softplus(x: Tensor) -> Tensor:
    """log(1 + exp(x)) in the overflow-safe split form."""
    _tally(4 * x.size)
    d = x.data
    y = np.maximum(d, 0) + np.log1p(np.exp(-np.abs(d)))
    out = Tensor(y)

    def backward_fn(g):
        s = np.empty_like(d)
        pos = d >= 0
        s[pos] = 1.0 / (1.0 + np.exp(-d[pos]))
        ex = np.exp(d[~pos])
        s[~pos] = ex / (1.0 + ex)
        return (g * s,)

    record((x,), out, backward_fn)
    return out


def softmax_channels(x: Tensor) -> Tensor:
    _check_4d("softmax_channels", x)
    _tally(5 * x.size)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    e = np.exp(shifted)
    y = e / e.sum(axis=1, keepdims=True)
    out = Tensor(y)

    def backward_fn(g):
        dot = (g * y).sum(axis=1, keepdims=True)
        return (y * (g - dot),)

    record((x,), out, backward_fn)
    return out


def log_softmax_channels(x: Tensor) -> Tensor:
    _check_4d("log_softmax_channels", x)
    _tally(5 * x.size)
    shifted = x.data - x.data.max(axis=1, keepdims=True)
    lse = np.log(np.exp(shifted).sum(axis=1, keepdims=True))
    y = shifted - lse
    out = Tensor(y)

    def backward_fn(g):
        return (g - np.exp(y) * g.sum(axis=1, keepdims=True),)

    record((x,), out, backward_fn)
    return out


# ---------------------------------------------------------------------------
# spatial resampling via row/column weight matrices


@lru_cache(maxsize=512)
def _pool_matrix(in_len: int, kernel: int, stride: int, dtype_name: str) -> np.ndarray:
    pad = (kernel - 1) // 2
    if in_len + 2 * pad < kernel:
        raise ShapeError(f"avgpool2d: kernel {kernel} exceeds padded extent {in_len + 2 * pad}")
    out_len = (in_len + 2 * pad - kernel) // stride + 1
    m = np.zeros((out_len, in_len), dtype=np.dtype(dtype_name))
    for o in range(out_len):
        start = o * stride - pad
        lo, hi = max(0, start), min(in_len, start + kernel)
        m[o, lo:hi] = 1.0 / (hi - lo)
    return m


@lru_cache(maxsize=512)
def _resize_matrix(in_len: int, out_len: int, dtype_name: str) -> np.ndarray:
    # half-pixel mapping: src = (dst + 0.5) * in/out - 0.5, clamped
    m = np.zeros((out_len, in_len), dtype=np.dtype(dtype_name))
    if in_len == 1:
        m[:, 0] = 1.0
        return m
    scale = in_len / out_len
    for d in range(out_len):
        s = (d + 0.5) * scale - 0.5
        s = min(max(s, 0.0), in_len - 1.0)
        i0 = min(int(np.floor(s)), in_len - 2)
        frac = s - i0
        m[d, i0] += 1.0 - frac
        m[d, i0 + 1] += frac
    return m


def _rowcol_apply(arr: np.ndarray, mh: np.ndarray, mw: np.ndarray) -> np.ndarray:
    n, c, h, w = arr.shape
    flat = arr.reshape(n * c, h, w)
    out = np.matmul(np.matmul(mh, flat), mw.T)
    return out.reshape(n, c, mh.shape[0], mw.shape[0])


def _linear_spatial(op: str, x: Tensor, mh: np.ndarray, mw: np.ndarray) -> Tensor:
    _check_4d(op, x)
    out = Tensor(_rowcol_apply(x.data, mh, mw))

    def backward_fn(g):
        return (_rowcol_apply(g, mh.T, mw.T),)

    record((x,), out, backward_fn)
    return out


def avgpool2d(x: Tensor, kernel, stride) -> Tensor:
    """Average pooling with symmetric (kernel-1)//2 padding.

    Padded cells never enter the mean (count excludes padding), so a constant
    map pools to the same constant.
    """
    kh, kw = _pair(kernel)
    sh, sw = _pair(stride)
    mh = _pool_matrix(x.shape[2], kh, sh, x.dtype.name)
    mw = _pool_matrix(x.shape[3], kw, sw, x.dtype.name)
    _tally(x.shape[0] * x.shape[1] * mh.shape[0] * mw.shape[0] * kh * kw)
    return _linear_spatial("avgpool2d", x, mh, mw)


def global_avgpool(x: Tensor) -> Tensor:
    _check_4d("global_avgpool", x)
    dt = x.dtype
    mh = np.full((1, x.shape[2]), 1.0 / x.shape[2], dtype=dt)
    mw = np.full((1, x.shape[3]), 1.0 / x.shape[3], dtype=dt)
    _tally(x.size)
    return _linear_spatial("global_avgpool", x, mh, mw)


def bilinear_resize(x: Tensor, out_h: int, out_w: int) -> Tensor:
    """Bilinear resize under the half-pixel convention, edges clamped."""
    if out_h < 1 or out_w < 1:
        raise ShapeError(f"bilinear_resize: bad target size {out_h}x{out_w}")
    mh = _resize_matrix(x.shape[2], int(out_h), x.dtype.name)
    mw = _resize_matrix(x.shape[3], int(out_w), x.dtype.name)
    _tally(8 * x.shape[0] * x.shape[1] * int(out_h) * int(out_w))
    return _linear_spatial("bilinear_resize", x, mh, mw)


# ---------------------------------------------------------------------------
# elementwise and channel ops


def add(a: Tensor, b: Tensor) -> Tensor:
    if a.shape != b.shape:
        raise ShapeError(f"add: shape mismatch {a.shape} vs {b.shape}")
    _tally(a.size)
    out = Tensor(a.data + b.data)

    def backward_fn(g):
        return g, g

    record((a, b), out, backward_fn)
    return out


def mul(a: Tensor, b: Tensor) -> Tensor:
    """Elementwise product; one operand may have a single channel (gate maps)."""
    if a.shape != b.shape:
        if not (
            a.ndim == 4
            and b.ndim == 4
            and a.shape[0] == b.shape[0]
            and a.shape[2:] == b.shape[2:]
            and (a.shape[1] == 1 or b.shape[1] == 1)
        ):
            raise ShapeError(f"mul: shape mismatch {a.shape} vs {b.shape}")
    out = Tensor(a.data * b.data)
    _tally(out.size)

    def backward_fn(g):
        da = g * b.data
        db = g * a.data
        if da.shape != a.shape:
            da = da.sum(axis=1, keepdims=True)
        if db.shape != b.shape:
            db = db.sum(axis=1, keepdims=True)
        return da, db

    record((a, b), out, backward_fn)
    return out


def affine(x: Tensor, a: float, b: float = 0.0) -> Tensor:
    """y = a*x + b with python-scalar coefficients."""
    _tally(2 * x.size)
    out = Tensor(a * x.data + b)

    def backward_fn(g):
        return (a * g,)

    record((x,), out, backward_fn)
    return out


def scale(x: Tensor, c: float) -> Tensor:
    return affine(x, c, 0.0)


def concat_channels(tensors) -> Tensor:
    tensors = list(tensors)
    if not tensors:
        raise ShapeError("concat_channels: empty input list")
    for t in tensors:
        _check_4d("concat_channels", t)
    base = tensors[0].shape
    for t in tensors[1:]:
        if t.shape[0] != base[0] or t.shape[2:] != base[2:]:
            raise ShapeError(f"concat_channels: incompatible {t.shape} vs {base}")
    widths = [t.shape[1] for t in tensors]
    out = Tensor(np.concatenate([t.data for t in tensors], axis=1))

    def backward_fn(g):
        grads = []
        start = 0
        for wdt in widths:
            grads.append(g[:, start : start + wdt])
            start += wdt
        return tuple(grads)

    record(tuple(tensors), out, backward_fn)
    return out


def sum_channels(x: Tensor) -> Tensor:
    """Reduce over the channel axis, keeping a singleton channel."""
    _check_4d("sum_channels", x)
    _tally(x.size)
    out = Tensor(x.data.sum(axis=1, keepdims=True))

    def backward_fn(g):
        return (np.broadcast_to(g, x.shape).copy(),)

    record((x,), out, backward_fn)
    return out


def reduce_sum(x: Tensor) -> Tensor:
    """Sum every element down to a rank-0 tensor."""
    _tally(x.size)
    out = Tensor(x.data.sum())

    def backward_fn(g):
        return (np.full(x.shape, g, dtype=x.dtype),)

    record((x,), out, backward_fn)
    return out
