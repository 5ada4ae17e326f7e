"""Differentiable kernels on rank-4 ``(batch, channel, row, col)`` arrays.

Tensors are plain contiguous numpy arrays. Kernels preserve the input
dtype: float32 is the training precision, float64 is used for gradient
checking.

Conventions fixed here (the network code relies on them):

* ``same`` padding is zero padding; for stride 2 the extra pad row/column
  goes at the bottom/right.
* ``conv_transpose2d`` is defined as the exact adjoint of the stride-2
  ``same`` convolution, so its output is always twice the input size.
* Bilinear x2 upsampling uses half-pixel centres (align-corners off) with
  edge clamping.
* Max-pool ties resolve to the first element of the window in row-major
  order; ReLU uses subgradient 0 at exactly 0.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import kernels

FLOAT = np.float32

# cap on im2col buffer size (elements) before the batch is chunked
_COLS_BUDGET = 1 << 24


class DimensionError(ValueError):
    """Raised when tensor shapes do not fit an operation."""


def as_tensor(x, dtype=None) -> np.ndarray:
    x = np.ascontiguousarray(x, dtype=dtype if dtype is not None else None)
    if x.ndim != 4:
        raise DimensionError(f"expected a rank-4 tensor (n, c, h, w), got shape {x.shape}")
    if min(x.shape) < 1:
        raise DimensionError(f"all tensor dimensions must be >= 1, got {x.shape}")
    return x


def _check(cond, msg):
    if not cond:
        raise DimensionError(msg)


# --------------------------------------------------------------------------
# convolution


def _same_pads(size, k, stride):
    out = -(-size // stride)
    total = max((out - 1) * stride + k - size, 0)
    return out, total // 2


def conv_geometry(h, w, kh, kw, stride, pad):
    """Output size and top/left padding for a convolution."""
    if pad == "same":
        _check(kh % 2 == 1 and kw % 2 == 1, f"same padding needs odd kernels, got {kh}x{kw}")
        out_h, pad_t = _same_pads(h, kh, stride)
        out_w, pad_l = _same_pads(w, kw, stride)
    elif pad == "valid":
        out_h, out_w, pad_t, pad_l = (h - kh) // stride + 1, (w - kw) // stride + 1, 0, 0
        _check(out_h >= 1 and out_w >= 1, f"kernel {kh}x{kw} larger than input {h}x{w}")
    else:
        raise ValueError(f"unknown padding mode {pad!r}")
    return out_h, out_w, pad_t, pad_l


def _chunks(n, per_item):
    step = max(1, _COLS_BUDGET // max(per_item, 1))
    for start in range(0, n, step):
        yield start, min(n, start + step)


def _cols(x, kh, kw, stride, pt, pl, oh, ow):
    """im2col over a batch slice -> (c*kh*kw, b*oh*ow)."""
    if x.shape[0] == 1:
        return kernels.im2col(x[0], kh, kw, stride, pt, pl, oh, ow)
    return kernels.im2col_batch(np.ascontiguousarray(x), kh, kw, stride, pt, pl, oh, ow)


def _check_conv(x, k, b):
    _check(x.ndim == 4, f"input must be rank 4, got shape {x.shape}")
    _check(k.ndim == 4, f"kernel must be (out_c, in_c, kh, kw), got shape {k.shape}")
    _check(
        k.shape[1] == x.shape[1],
        f"channel axis mismatch: input has {x.shape[1]} channels, kernel expects {k.shape[1]}",
    )
    if b is not None:
        _check(b.shape == (k.shape[0],), f"bias shape {b.shape} != ({k.shape[0]},)")


def conv2d(x, k, b=None, pad="same", stride=1):
    """2-D cross-correlation of ``x`` (n, in_c, h, w) with ``k`` (out_c, in_c, kh, kw)."""
    _check_conv(x, k, b)
    _check(stride in (1, 2), f"stride must be 1 or 2, got {stride}")
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    oc, _, kh, kw = k.shape
    oh, ow, pt, pl = conv_geometry(h, w, kh, kw, stride, pad)
    w2 = k.reshape(oc, -1)
    out = np.empty((n, oc, oh, ow), dtype=x.dtype)
    for s, e in _chunks(n, c * kh * kw * oh * ow):
        cols = _cols(x[s:e], kh, kw, stride, pt, pl, oh, ow)
        y = w2 @ cols
        out[s:e] = y.reshape(oc, e - s, oh, ow).transpose(1, 0, 2, 3)
    if b is not None:
        out += b.reshape(1, oc, 1, 1)
    return out


def conv2d_backward(x, k, grad_out, pad="same", stride=1, need_x=True):
    """Gradients of :func:`conv2d` w.r.t. input, kernel and bias."""
    _check_conv(x, k, None)
    x = np.ascontiguousarray(x)
    n, c, h, w = x.shape
    oc, _, kh, kw = k.shape
    oh, ow, pt, pl = conv_geometry(h, w, kh, kw, stride, pad)
    _check(
        grad_out.shape == (n, oc, oh, ow),
        f"grad_out shape {grad_out.shape} != conv output shape {(n, oc, oh, ow)}",
    )
    w2 = k.reshape(oc, -1)
    gk = np.zeros_like(w2)
    gx = np.empty_like(x) if need_x else None
    for s, e in _chunks(n, c * kh * kw * oh * ow):
        g2 = grad_out[s:e].transpose(1, 0, 2, 3).reshape(oc, -1)
        cols = _cols(x[s:e], kh, kw, stride, pt, pl, oh, ow)
        gk += g2 @ cols.T
        if need_x:
            gcols = w2.T @ g2
            gx[s:e] = kernels.col2im_batch(gcols, e - s, c, h, w, kh, kw, stride, pt, pl, oh, ow)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gx, gk.reshape(k.shape), gb


def conv_transpose2d(y, k, b=None):
    """Stride-2 transposed convolution, the adjoint of ``conv2d(., k, stride=2)``.

    ``k`` has shape (in_c, out_c, kh, kw): it is the kernel of the stride-2
    convolution mapping out_c -> in_c whose adjoint this is. The output has
    exactly twice the spatial size of ``y``.
    """
    _check(y.ndim == 4 and k.ndim == 4, "conv_transpose2d needs rank-4 input and kernel")
    _check(
        k.shape[0] == y.shape[1],
        f"channel axis mismatch: input has {y.shape[1]} channels, kernel expects {k.shape[0]}",
    )
    y = np.ascontiguousarray(y)
    n, ic, hi, wi = y.shape
    _, oc, kh, kw = k.shape
    if b is not None:
        _check(b.shape == (oc,), f"bias shape {b.shape} != ({oc},)")
    H, W = 2 * hi, 2 * wi
    oh, ow, pt, pl = conv_geometry(H, W, kh, kw, 2, "same")
    w2 = k.reshape(ic, -1)
    out = np.empty((n, oc, H, W), dtype=y.dtype)
    for i in range(n):
        gcols = w2.T @ y[i].reshape(ic, -1)
        out[i] = kernels.col2im(gcols, oc, H, W, kh, kw, 2, pt, pl, oh, ow)
    if b is not None:
        out += b.reshape(1, oc, 1, 1)
    return out


def conv_transpose2d_backward(y, k, grad_out, need_x=True):
    """Gradients of :func:`conv_transpose2d` w.r.t. input, kernel and bias."""
    n, ic, hi, wi = y.shape
    _, oc, kh, kw = k.shape
    _check(
        grad_out.shape == (n, oc, 2 * hi, 2 * wi),
        f"grad_out shape {grad_out.shape} != {(n, oc, 2 * hi, 2 * wi)}",
    )
    H, W = 2 * hi, 2 * wi
    oh, ow, pt, pl = conv_geometry(H, W, kh, kw, 2, "same")
    g = np.ascontiguousarray(grad_out)
    w2 = k.reshape(ic, -1)
    gk = np.zeros_like(w2)
    gy = np.empty_like(y) if need_x else None
    for s, e in _chunks(n, oc * kh * kw * oh * ow):
        cols = _cols(g[s:e], kh, kw, 2, pt, pl, oh, ow)
        y2 = y[s:e].transpose(1, 0, 2, 3).reshape(ic, -1)
        gk += y2 @ cols.T
        if need_x:
            gy[s:e] = (w2 @ cols).reshape(ic, e - s, hi, wi).transpose(1, 0, 2, 3)
    gb = grad_out.sum(axis=(0, 2, 3))
    return gy, gk.reshape(k.shape), gb


# --------------------------------------------------------------------------
# pooling and resampling


@dataclass
class PoolIndexMap:
    """Argmax positions of a 2x2 max-pool, one entry per pooled element.

    ``flat`` holds the row-major position 0..3 inside each window.
    """

    flat: np.ndarray

    @property
    def rows(self):
        return self.flat // 2

    @property
    def cols(self):
        return self.flat % 2


def maxpool2(x):
    x = np.ascontiguousarray(x)
    _check(x.ndim == 4, f"input must be rank 4, got shape {x.shape}")
    _check(
        x.shape[2] % 2 == 0 and x.shape[3] % 2 == 0,
        f"max-pool needs even spatial dims, got rows={x.shape[2]} cols={x.shape[3]}",
    )
    out, idx = kernels.maxpool2_forward(x)
    _monitor("pool", idx)
    return out, PoolIndexMap(idx)


def maxpool2_backward(grad_out, index: PoolIndexMap):
    _check(grad_out.shape == index.flat.shape, "grad_out does not match the pool index map")
    return kernels.maxpool2_backward(np.ascontiguousarray(grad_out), index.flat)


def upsample_bilinear2(x):
    return kernels.upsample2_forward(np.ascontiguousarray(x))


def upsample_bilinear2_backward(grad_out):
    _check(
        grad_out.shape[2] % 2 == 0 and grad_out.shape[3] % 2 == 0,
        f"grad_out spatial dims must be even, got {grad_out.shape[2:]}",
    )
    return kernels.upsample2_backward(np.ascontiguousarray(grad_out))


# --------------------------------------------------------------------------
# elementwise


def relu(x):
    _monitor("relu", x)
    return np.maximum(x, 0)


def relu_backward(y, grad_out):
    """Backward of relu given its *output* ``y`` (0 at the kink)."""
    return grad_out * (y > 0)


def sigmoid(x):
    # split by sign so exp never overflows
    out = np.empty_like(x)
    pos = x >= 0
    out[pos] = 1.0 / (1.0 + np.exp(-x[pos]))
    ex = np.exp(x[~pos])
    out[~pos] = ex / (1.0 + ex)
    return out


def sigmoid_backward(y, grad_out):
    return grad_out * y * (1 - y)


def tanh(x):
    return np.tanh(x)


def tanh_backward(y, grad_out):
    return grad_out * (1 - y * y)


def add(a, b):
    _check(a.shape == b.shape, f"add: shape mismatch {a.shape} vs {b.shape}")
    return a + b


def hadamard(a, b):
    _check(a.shape == b.shape, f"hadamard: shape mismatch {a.shape} vs {b.shape}")
    return a * b


def hadamard_backward(a, b, grad_out):
    return grad_out * b, grad_out * a


def concat_channels(a, b):
    _check(
        a.shape[0] == b.shape[0] and a.shape[2:] == b.shape[2:],
        f"concat: batch/spatial mismatch {a.shape} vs {b.shape}",
    )
    return np.concatenate([a, b], axis=1)


def concat_channels_backward(grad_out, ca):
    return np.ascontiguousarray(grad_out[:, :ca]), np.ascontiguousarray(grad_out[:, ca:])


def softmax(logits, axis=1):
    z = logits - logits.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def softmax_backward(p, grad_out, axis=1):
    return p * (grad_out - (grad_out * p).sum(axis=axis, keepdims=True))


# --------------------------------------------------------------------------
# non-smooth event monitor, used by the gradient checker to discard finite
# differences that straddle a relu kink or a max-pool argmax switch

_MONITOR: list | None = None


def _monitor(kind, arr):
    if _MONITOR is not None:
        if kind == "relu":
            _MONITOR.append(np.packbits(arr > 0).tobytes())
        else:
            _MONITOR.append(arr.tobytes())


class branch_monitor:
    """Context manager recording relu sign patterns and pool argmaxes."""

    def __enter__(self):
        global _MONITOR
        self._prev = _MONITOR
        _MONITOR = []
        self.events = _MONITOR
        return self

    def __exit__(self, *exc):
        global _MONITOR
        _MONITOR = self._prev
        return False

    def signature(self):
        return hash(tuple(self.events))
