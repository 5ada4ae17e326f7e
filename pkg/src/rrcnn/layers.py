"""Stateful layers built on the kernels in :mod:`rrcnn.tensor`.

A layer keeps a *stack* of forward caches. Each ``forward`` pushes one
entry and each ``backward`` pops one, so a layer that is applied several
times inside an unrolled recurrence (shared weights) back-propagates
correctly as long as the backward calls come in reverse order. Gradients
accumulate into the owning :class:`ParamBlock` until ``zero_grad``.
"""
from __future__ import annotations

import numpy as np

from . import tensor as T


class ParamBlock:
    """A learnable weight array plus optional per-channel bias.

    Carries gradient buffers and the two Adam moment buffers for each array.
    """

    def __init__(self, weight, bias=None):
        self.name = ""
        self.w = np.ascontiguousarray(weight)
        self.b = None if bias is None else np.ascontiguousarray(bias)
        self._alloc()

    def _alloc(self):
        self.gw = np.zeros_like(self.w)
        self.mw = np.zeros_like(self.w)
        self.vw = np.zeros_like(self.w)
        if self.b is not None:
            self.gb = np.zeros_like(self.b)
            self.mb = np.zeros_like(self.b)
            self.vb = np.zeros_like(self.b)
        else:
            self.gb = self.mb = self.vb = None

    @property
    def size(self) -> int:
        return self.w.size + (0 if self.b is None else self.b.size)

    def slots(self):
        """(value, grad, m, v) for every array in the block."""
        yield self.w, self.gw, self.mw, self.vw
        if self.b is not None:
            yield self.b, self.gb, self.mb, self.vb

    def zero_grad(self):
        self.gw[...] = 0
        if self.gb is not None:
            self.gb[...] = 0

    def astype(self, dtype):
        self.w = self.w.astype(dtype)
        if self.b is not None:
            self.b = self.b.astype(dtype)
        self._alloc()

    def __repr__(self):
        b = "" if self.b is None else f", bias={self.b.shape}"
        return f"ParamBlock({self.name!r}, w={self.w.shape}{b})"


class Layer:
    """Base class: owned ParamBlocks, named sub-layers and a cache stack."""

    def __init__(self):
        self._blocks: list[tuple[str, ParamBlock]] = []
        self._children: list[tuple[str, Layer]] = []
        self._cache: list = []

    # structure -------------------------------------------------------
    def add_block(self, name, block):
        self._blocks.append((name, block))
        return block

    def add(self, name, layer):
        self._children.append((name, layer))
        return layer

    def named_params(self, prefix=""):
        for name, block in self._blocks:
            yield prefix + name, block
        for name, child in self._children:
            yield from child.named_params(f"{prefix}{name}.")

    def params(self) -> list[ParamBlock]:
        return [b for _, b in self.named_params()]

    def layers(self):
        yield self
        for _, child in self._children:
            yield from child.layers()

    def param_count(self) -> int:
        return sum(b.size for b in self.params())

    def zero_grad(self):
        for b in self.params():
            b.zero_grad()

    def clear(self):
        for layer in self.layers():
            layer._cache.clear()

    def astype(self, dtype):
        for b in self.params():
            b.astype(dtype)
        return self

    # cache -----------------------------------------------------------
    def _push(self, item):
        self._cache.append(item)

    def _pop(self):
        if not self._cache:
            raise RuntimeError(f"{type(self).__name__}.backward called without a matching forward")
        return self._cache.pop()

    def __call__(self, x):
        return self.forward(x)

    def forward(self, x):
        raise NotImplementedError

    def backward(self, grad):
        raise NotImplementedError


def he_normal(rng, shape, fan_in, dtype):
    return (rng.standard_normal(shape) * np.sqrt(2.0 / fan_in)).astype(dtype)


def glorot_uniform(rng, shape, fan_in, fan_out, dtype):
    """U(-a, a) with a = sqrt(6 / (fan_in + fan_out))."""
    a = np.sqrt(6.0 / (fan_in + fan_out))
    return rng.uniform(-a, a, size=shape).astype(dtype)


class Conv2D(Layer):
    def __init__(self, in_c, out_c, k=3, bias=True, rng=None, dtype=T.FLOAT):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_c, self.out_c, self.k = in_c, out_c, k
        w = glorot_uniform(rng, (out_c, in_c, k, k), in_c * k * k, out_c * k * k, dtype)
        b = np.zeros(out_c, dtype=dtype) if bias else None
        self.p = self.add_block("conv", ParamBlock(w, b))

    def forward(self, x):
        self._push(x)
        return T.conv2d(x, self.p.w, self.p.b)

    def backward(self, grad):
        x = self._pop()
        gx, gk, gb = T.conv2d_backward(x, self.p.w, grad)
        self.p.gw += gk
        if self.p.b is not None:
            self.p.gb += gb
        return gx


class ConvTranspose2D(Layer):
    """Stride-2 3x3 transposed convolution (decoder "TC" stage)."""

    def __init__(self, in_c, out_c, k=3, rng=None, dtype=T.FLOAT):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        w = glorot_uniform(rng, (in_c, out_c, k, k), out_c * k * k, in_c * k * k, dtype)
        self.p = self.add_block("tconv", ParamBlock(w, np.zeros(out_c, dtype=dtype)))

    def forward(self, x):
        self._push(x)
        return T.conv_transpose2d(x, self.p.w, self.p.b)

    def backward(self, grad):
        x = self._pop()
        gx, gk, gb = T.conv_transpose2d_backward(x, self.p.w, grad)
        self.p.gw += gk
        self.p.gb += gb
        return gx


class ReLU(Layer):
    def forward(self, x):
        y = T.relu(x)
        self._push(y)
        return y

    def backward(self, grad):
        return T.relu_backward(self._pop(), grad)


class MaxPool2(Layer):
    def forward(self, x):
        y, idx = T.maxpool2(x)
        self._push(idx)
        return y

    def backward(self, grad):
        return T.maxpool2_backward(grad, self._pop())


class Upsample2(Layer):
    def forward(self, x):
        self._push(None)
        return T.upsample_bilinear2(x)

    def backward(self, grad):
        self._pop()
        return T.upsample_bilinear2_backward(grad)


class Sequential(Layer):
    def __init__(self, *layers):
        super().__init__()
        self.seq = [self.add(str(i), layer) for i, layer in enumerate(layers)]

    def forward(self, x):
        for layer in self.seq:
            x = layer.forward(x)
        return x

    def backward(self, grad):
        for layer in reversed(self.seq):
            grad = layer.backward(grad)
        return grad


class Identity(Layer):
    def forward(self, x):
        return x

    def backward(self, grad):
        return grad


def make_skip(kind, in_c, out_c, rng, dtype):
    """Shortcut path for residual units.

    ``auto`` is the identity when channel counts agree and a 1x1
    projection otherwise; ``conv1``/``conv3`` always project.
    """
    if kind == "auto":
        return Identity() if in_c == out_c else Conv2D(in_c, out_c, 1, rng=rng, dtype=dtype)
    if kind == "identity":
        if in_c != out_c:
            raise T.DimensionError(f"identity skip needs in_c == out_c, got {in_c} -> {out_c}")
        return Identity()
    if kind in ("conv1", "conv3"):
        return Conv2D(in_c, out_c, 1 if kind == "conv1" else 3, rng=rng, dtype=dtype)
    raise ValueError(f"unknown skip kind {kind!r}")


class ResidualBlock(Layer):
    """``y = relu(conv2(relu(conv1(x))) + skip(x))`` with 3x3 convolutions."""

    def __init__(self, in_c, out_c, skip="auto", rng=None, dtype=T.FLOAT):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_c, self.out_c = in_c, out_c
        self.conv1 = self.add("conv1", Conv2D(in_c, out_c, rng=rng, dtype=dtype))
        self.conv2 = self.add("conv2", Conv2D(out_c, out_c, rng=rng, dtype=dtype))
        self.skip = self.add("skip", make_skip(skip, in_c, out_c, rng, dtype))

    def forward(self, x):
        if x.shape[1] != self.in_c:
            raise T.DimensionError(f"channel axis: block expects {self.in_c}, got {x.shape[1]}")
        h1 = T.relu(self.conv1.forward(x))
        y = T.relu(self.conv2.forward(h1) + self.skip.forward(x))
        self._push((h1, y))
        return y

    def backward(self, grad):
        h1, y = self._pop()
        g = T.relu_backward(y, grad)
        gs = self.skip.backward(g)
        g1 = T.relu_backward(h1, self.conv2.backward(g))
        return self.conv1.backward(g1) + gs


class SoftmaxHead(Layer):
    """1x1 convolution to class logits followed by a per-pixel softmax."""

    def __init__(self, in_c, n_classes=2, rng=None, dtype=T.FLOAT):
        super().__init__()
        self.conv = self.add("conv", Conv2D(in_c, n_classes, 1, rng=rng, dtype=dtype))

    def forward(self, x):
        p = T.softmax(self.conv.forward(x))
        self._push(p)
        return p

    def backward(self, grad):
        """Back-propagate a gradient w.r.t. the probabilities."""
        p = self._pop()
        return self.conv.backward(T.softmax_backward(p, grad))

    def backward_logits(self, grad_logits):
        """Back-propagate a gradient already taken w.r.t. the logits."""
        self._pop()
        return self.conv.backward(grad_logits)


def unet_decoder_stage(in_c, out_c, rng=None, dtype=T.FLOAT):
    """Bilinear x2 upsampling then a 3x3 conv + relu ("US(C(3x3, out_c))")."""
    return Sequential(Upsample2(), Conv2D(in_c, out_c, rng=rng, dtype=dtype), ReLU())


class SkipMerge(Layer):
    """Channel concatenation ``(encoder, decoder)`` of same-size feature maps."""

    def forward(self, enc, dec):
        if enc.shape[2:] != dec.shape[2:]:
            raise T.DimensionError(f"skip merge: spatial mismatch {enc.shape[2:]} vs {dec.shape[2:]}")
        self._push(enc.shape[1])
        return T.concat_channels(enc, dec)

    def backward(self, grad):
        return T.concat_channels_backward(grad, self._pop())


def skip_merge(enc, dec):
    return SkipMerge().forward(enc, dec)
