"""Recurrent convolutional units with hand-written backprop-through-time.

* :class:`RCL` - recurrent convolutional layer with shared feed-forward and
  recurrent kernels, unrolled for ``t_steps`` refinements.
* :class:`RRCU` - two RCLs inside a residual shortcut.
* :class:`ConvLSTM` - peephole convolutional LSTM run over a sequence.
* :class:`RCLSTM` - the residual block with ConvLSTM+relu sub-units in
  place of RCLs, and :class:`SingleConvLSTMBlock`, one such sub-unit alone.

A static image is turned into a sequence either by *replicating* it for
``t_steps`` steps or, for stacked multitemporal input, by *slicing* its
channels back into per-acquisition frames.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from . import tensor as T
from .layers import Conv2D, Identity, Layer, ParamBlock, glorot_uniform, make_skip


@dataclass(frozen=True)
class RCLConfig:
    in_c: int
    out_c: int
    t_steps: int = 2
    state_init: str = "zero"
    k: int = 3

    def __post_init__(self):
        if self.t_steps < 1:
            raise ValueError(f"t_steps must be >= 1, got {self.t_steps}")
        if self.state_init not in ("zero", "projected"):
            raise ValueError(f"unknown state_init {self.state_init!r}")


class RCL(Layer):
    """Recurrent convolutional layer.

    ``s0 = relu(conv_f(x))`` and ``s_k = relu(conv_f(x) + conv_r(s_{k-1}))``
    for ``k = 1..t_steps``; the output is the last state. ``conv_f`` and
    ``conv_r`` are the same two kernels at every step. With
    ``state_init="projected"`` the recurrence starts from a 1x1 projection
    of the input instead of zero, so ``s0`` also gets a recurrent term.
    """

    def __init__(self, cfg: RCLConfig, rng=None, dtype=T.FLOAT):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.cfg = cfg
        self.conv_f = self.add("conv_f", Conv2D(cfg.in_c, cfg.out_c, cfg.k, rng=rng, dtype=dtype))
        self.conv_r = self.add("conv_r", Conv2D(cfg.out_c, cfg.out_c, cfg.k, rng=rng, dtype=dtype))
        # the unrolled recurrence adds up t_steps contributions of conv_r;
        # shrinking its initial kernel keeps stacked units from blowing up
        self.conv_r.p.w *= 1.0 / cfg.t_steps
        self.proj = None
        if cfg.state_init == "projected":
            self.proj = self.add("proj", Conv2D(cfg.in_c, cfg.out_c, 1, rng=rng, dtype=dtype))

    def forward(self, x):
        if x.shape[1] != self.cfg.in_c:
            raise T.DimensionError(f"channel axis: RCL expects {self.cfg.in_c}, got {x.shape[1]}")
        ff = self.conv_f.forward(x)
        z = ff if self.proj is None else ff + self.conv_r.forward(self.proj.forward(x))
        states = [T.relu(z)]
        for _ in range(self.cfg.t_steps):
            states.append(T.relu(ff + self.conv_r.forward(states[-1])))
        self._push(states)
        return states[-1]

    def backward(self, grad):
        states = self._pop()
        g_ff = None
        g = grad
        for k in range(len(states) - 1, 0, -1):
            gz = T.relu_backward(states[k], g)
            g_ff = gz if g_ff is None else g_ff + gz
            g = self.conv_r.backward(gz)
        gz = T.relu_backward(states[0], g)
        g_ff = gz if g_ff is None else g_ff + gz
        gx = self.conv_f.backward(g_ff)
        if self.proj is not None:
            gx = gx + self.proj.backward(self.conv_r.backward(gz))
        return gx


def rcl_forward(x, layer: RCL):
    return layer.forward(x)


class RRCU(Layer):
    """Recurrent residual convolutional unit: ``skip(x) + rcl2(rcl1(x))``.

    ``skip="auto"`` gives the identity (or a 1x1 projection when channel
    counts differ); ``skip="unit"`` makes the shortcut itself an RCL.
    """

    def __init__(self, in_c, out_c, t_steps=2, skip="auto", state_init="zero",
                 rng=None, dtype=T.FLOAT):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_c, self.out_c = in_c, out_c
        self.rcl1 = self.add("rcl1", RCL(RCLConfig(in_c, out_c, t_steps, state_init), rng, dtype))
        self.rcl2 = self.add("rcl2", RCL(RCLConfig(out_c, out_c, t_steps, state_init), rng, dtype))
        if skip == "unit":
            self.skip = self.add("skip", RCL(RCLConfig(in_c, out_c, t_steps, state_init), rng, dtype))
        else:
            self.skip = self.add("skip", make_skip(skip, in_c, out_c, rng, dtype))

    def forward(self, x):
        if x.shape[1] != self.in_c:
            raise T.DimensionError(f"channel axis: RRCU expects {self.in_c}, got {x.shape[1]}")
        return self.skip.forward(x) + self.rcl2.forward(self.rcl1.forward(x))

    def backward(self, grad):
        return self.skip.backward(grad) + self.rcl1.backward(self.rcl2.backward(grad))


# --------------------------------------------------------------------------
# ConvLSTM


@dataclass
class ConvLSTMState:
    C: np.ndarray
    H: np.ndarray

    @classmethod
    def zeros(cls, n, hid_c, h, w, dtype=T.FLOAT):
        return cls(np.zeros((n, hid_c, h, w), dtype), np.zeros((n, hid_c, h, w), dtype))


class ConvLSTMParams:
    """Gate kernels stacked in the order (i, f, c, o) along the output axis.

    ``wx`` maps the input (with the gate biases), ``wh`` maps the previous
    hidden state, and ``peep`` holds the per-channel peephole gains
    ``(W_ci, W_cf, W_co)``.
    """

    def __init__(self, in_c, hid_c, peephole=True, rng=None, dtype=T.FLOAT, k=3):
        rng = rng if rng is not None else np.random.default_rng(0)
        self.in_c, self.hid_c = in_c, hid_c
        bias = np.zeros(4 * hid_c, dtype=dtype)
        bias[hid_c:2 * hid_c] = 1.0  # forget gate starts open
        self.wx = ParamBlock(glorot_uniform(rng, (4 * hid_c, in_c, k, k), in_c * k * k, 4 * hid_c * k * k, dtype),
                             bias)
        self.wh = ParamBlock(glorot_uniform(rng, (4 * hid_c, hid_c, k, k), hid_c * k * k, 4 * hid_c * k * k, dtype))
        self.peep = None
        if peephole:
            self.peep = ParamBlock((rng.standard_normal((3, hid_c)) * 0.1).astype(dtype))

    def blocks(self):
        yield "wx", self.wx
        yield "wh", self.wh
        if self.peep is not None:
            yield "peep", self.peep


def _bc(v):
    return v.reshape(1, -1, 1, 1)


def convlstm_step(x_t, state: ConvLSTMState, p: ConvLSTMParams, cache=None):
    """One peephole ConvLSTM step; returns the new state.

    If ``cache`` is a list, the intermediates needed by the backward pass
    are appended to it.
    """
    if x_t.shape[1] != p.in_c:
        raise T.DimensionError(f"channel axis: ConvLSTM expects {p.in_c} input channels, got {x_t.shape[1]}")
    if state.C.shape != state.H.shape or state.H.shape[1] != p.hid_c:
        raise T.DimensionError(f"state shapes {state.C.shape}/{state.H.shape} do not match hid_c={p.hid_c}")
    a = T.conv2d(x_t, p.wx.w, p.wx.b)
    return _lstm_tail(a, x_t, state, p, cache)


def _lstm_tail(a, x_t, state, p, cache, skip_h=False):
    hc = p.hid_c
    if not skip_h:
        a = a + T.conv2d(state.H, p.wh.w)
    ai, af, ag, ao = a[:, :hc], a[:, hc:2 * hc], a[:, 2 * hc:3 * hc], a[:, 3 * hc:]
    C_prev = state.C
    if p.peep is not None:
        ai = ai + _bc(p.peep.w[0]) * C_prev
        af = af + _bc(p.peep.w[1]) * C_prev
    i = T.sigmoid(ai)
    f = T.sigmoid(af)
    g = T.tanh(ag)
    C = f * C_prev + i * g
    if p.peep is not None:
        ao = ao + _bc(p.peep.w[2]) * C
    o = T.sigmoid(ao)
    tc = T.tanh(C)
    H = o * tc
    if cache is not None:
        cache.append((x_t, state.H, C_prev, i, f, g, o, C, tc, skip_h))
    return ConvLSTMState(C, H)


class ConvLSTM(Layer):
    """Peephole ConvLSTM over a sequence, zero initial state.

    ``forward(seq)`` takes a list of (n, in_c, h, w) frames and returns the
    list of hidden states. When every frame is the same array (a replicated
    static input) the input convolution is computed once.
    """

    def __init__(self, in_c, hid_c, peephole=True, rng=None, dtype=T.FLOAT, k=3):
        super().__init__()
        self.p = ConvLSTMParams(in_c, hid_c, peephole, rng, dtype, k)
        for name, block in self.p.blocks():
            self.add_block(name, block)

    def forward(self, seq, replicated=False):
        """With ``replicated=True`` all frames must be the same array; the
        input gradient is then returned summed into the first slot."""
        x0 = seq[0]
        n, _, h, w = x0.shape
        state = ConvLSTMState.zeros(n, self.p.hid_c, h, w, x0.dtype)
        if replicated and not all(x is x0 for x in seq):
            raise ValueError("replicated=True needs the same frame at every step")
        ax = T.conv2d(x0, self.p.wx.w, self.p.wx.b) if replicated else None
        steps, hs = [], []
        for t, x in enumerate(seq):
            if x.shape[1] != self.p.in_c:
                raise T.DimensionError(
                    f"channel axis: ConvLSTM expects {self.p.in_c} input channels, got {x.shape[1]}")
            a = ax if replicated else T.conv2d(x, self.p.wx.w, self.p.wx.b)
            # H_{-1} = 0, so the recurrent convolution is skipped at t = 0
            state = _lstm_tail(a, x, state, self.p, steps, skip_h=(t == 0))
            hs.append(state.H)
        self._push((steps, replicated))
        return hs

    def backward(self, grads):
        """``grads[t]`` is dL/dH_t (or None); returns dL/dx_t per step."""
        steps, replicated = self._pop()
        p = self.p
        dH_next = dC_next = None
        gxs = [None] * len(steps)
        da_sum = None
        for t in range(len(steps) - 1, -1, -1):
            x, H_prev, C_prev, i, f, g, o, C, tc, skip_h = steps[t]
            dH = grads[t]
            if dH_next is not None:
                dH = dH_next if dH is None else dH + dH_next
            if dH is None:
                dH = np.zeros_like(C)
            do = dH * tc
            dC = dH * o * (1 - tc * tc)
            if dC_next is not None:
                dC = dC + dC_next
            dao = do * o * (1 - o)
            if p.peep is not None:
                dC = dC + dao * _bc(p.peep.w[2])
                p.peep.gw[2] += (dao * C).sum(axis=(0, 2, 3))
            dai = dC * g * i * (1 - i)
            daf = dC * C_prev * f * (1 - f)
            dag = dC * i * (1 - g * g)
            dC_prev = dC * f
            if p.peep is not None:
                dC_prev = dC_prev + dai * _bc(p.peep.w[0]) + daf * _bc(p.peep.w[1])
                p.peep.gw[0] += (dai * C_prev).sum(axis=(0, 2, 3))
                p.peep.gw[1] += (daf * C_prev).sum(axis=(0, 2, 3))
            da = np.concatenate([dai, daf, dag, dao], axis=1)
            if not skip_h:
                gh, gwh, _ = T.conv2d_backward(H_prev, p.wh.w, da)
                p.wh.gw += gwh
                dH_next = gh
            else:
                dH_next = None
            dC_next = dC_prev
            if replicated:
                da_sum = da if da_sum is None else da_sum + da
            else:
                gx, gwx, gbx = T.conv2d_backward(x, p.wx.w, da)
                p.wx.gw += gwx
                p.wx.gb += gbx
                gxs[t] = gx
        if replicated:
            gx, gwx, gbx = T.conv2d_backward(steps[0][0], p.wx.w, da_sum)
            p.wx.gw += gwx
            p.wx.gb += gbx
            gxs = [gx] + [None] * (len(steps) - 1)
        return gxs


class ConvLSTMSubunit(Layer):
    """ConvLSTM followed by relu on its hidden states.

    Input is a tensor (replicated for ``t_steps`` steps) or a list of frames.
    Returns relu(H_T), or the whole relu(H_t) sequence when
    ``return_sequence`` is set.
    """

    def __init__(self, in_c, out_c, t_steps=2, peephole=True, return_sequence=False,
                 rng=None, dtype=T.FLOAT):
        super().__init__()
        if t_steps < 1:
            raise ValueError(f"t_steps must be >= 1, got {t_steps}")
        self.t_steps = t_steps
        self.return_sequence = return_sequence
        self.lstm = self.add("lstm", ConvLSTM(in_c, out_c, peephole, rng, dtype))

    def forward(self, x):
        as_list = isinstance(x, list)
        seq = x if as_list else [x] * self.t_steps
        hs = [T.relu(h) for h in self.lstm.forward(seq, replicated=not as_list)]
        self._push((hs, as_list))
        return hs if self.return_sequence else hs[-1]

    def backward(self, grad):
        hs, as_list = self._pop()
        if self.return_sequence:
            grads = [T.relu_backward(h, g) for h, g in zip(hs, grad)]
        else:
            grads = [None] * (len(hs) - 1) + [T.relu_backward(hs[-1], grad)]
        gxs = self.lstm.backward(grads)
        if as_list:
            return gxs
        # replicated input: ConvLSTM already summed the gradient over steps
        return gxs[0]


def split_frames(x, frames):
    n, c, h, w = x.shape
    if frames < 1 or c % frames:
        raise T.DimensionError(f"temporal slicing: {c} channels not divisible into {frames} frames")
    per = c // frames
    return [np.ascontiguousarray(x[:, t * per:(t + 1) * per]) for t in range(frames)]


class RCLSTM(Layer):
    """Residual ConvLSTM block: ``skip(x) + sub2(sub1(x))``.

    Each sub-unit is a ConvLSTM whose hidden states pass through relu.
    ``temporal="replicate"`` feeds the (static) input at every one of
    ``t_steps`` steps. ``temporal="slice"`` splits the stacked channels
    into ``frames`` acquisitions and feeds them in order; sub1 then hands
    its whole hidden sequence to sub2. ``skip="unit"`` makes the shortcut a
    ConvLSTM sub-unit of its own.
    """

    def __init__(self, in_c, out_c, t_steps=2, temporal="replicate", frames=None,
                 skip="auto", peephole=True, rng=None, dtype=T.FLOAT):
        super().__init__()
        rng = rng if rng is not None else np.random.default_rng(0)
        if temporal not in ("replicate", "slice"):
            raise ValueError(f"unknown temporal mode {temporal!r}")
        self.in_c, self.out_c, self.temporal = in_c, out_c, temporal
        cell_in = in_c
        if temporal == "slice":
            if not frames or in_c % frames:
                raise T.DimensionError(
                    f"temporal slicing needs in_c divisible by the frame count, got {in_c} / {frames}")
            cell_in = in_c // frames
        self.frames = frames
        seq = temporal == "slice"
        self.sub1 = self.add("sub1", ConvLSTMSubunit(cell_in, out_c, t_steps, peephole, seq, rng, dtype))
        self.sub2 = self.add("sub2", ConvLSTMSubunit(out_c, out_c, t_steps, peephole, False, rng, dtype))
        if skip == "unit":
            self.skip = self.add("skip", ConvLSTMSubunit(cell_in, out_c, t_steps, peephole, False, rng, dtype))
            self._skip_seq = seq
        else:
            self.skip = self.add("skip", make_skip(skip, in_c, out_c, rng, dtype))
            self._skip_seq = False

    def forward(self, x):
        if x.shape[1] != self.in_c:
            raise T.DimensionError(f"channel axis: RCLSTM expects {self.in_c}, got {x.shape[1]}")
        inp = split_frames(x, self.frames) if self.temporal == "slice" else x
        s = self.skip.forward(inp if self._skip_seq else x)
        return s + self.sub2.forward(self.sub1.forward(inp))

    def backward(self, grad):
        g1 = self.sub1.backward(self.sub2.backward(grad))
        gs = self.skip.backward(grad)
        if self.temporal == "slice":
            g1 = np.concatenate(g1, axis=1)
            if self._skip_seq:
                gs = np.concatenate(gs, axis=1)
        return g1 + gs


class SingleConvLSTMBlock(Layer):
    """One ConvLSTM+relu sub-unit with no residual path."""

    def __init__(self, in_c, out_c, t_steps=2, peephole=True, rng=None, dtype=T.FLOAT):
        super().__init__()
        self.in_c = in_c
        self.sub = self.add("sub", ConvLSTMSubunit(in_c, out_c, t_steps, peephole, False, rng, dtype))

    def forward(self, x):
        if x.shape[1] != self.in_c:
            raise T.DimensionError(f"channel axis: ConvLSTM block expects {self.in_c}, got {x.shape[1]}")
        return self.sub.forward(x)

    def backward(self, grad):
        return self.sub.backward(grad)


__all__ = [
    "RCLConfig", "RCL", "RRCU", "ConvLSTMState", "ConvLSTMParams", "convlstm_step",
    "ConvLSTM", "ConvLSTMSubunit", "RCLSTM", "SingleConvLSTMBlock", "split_frames", "Identity",
]
