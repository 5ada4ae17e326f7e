"""Loss, optimiser, early stopping, the training loop and gradient checks."""
from __future__ import annotations

import csv
import logging
import math
import time
from dataclasses import dataclass, field

import numpy as np

from . import tensor as T
from .checkpoint import Checkpoint

log = logging.getLogger(__name__)

IGNORE = 2


class EmptyLossSupport(ValueError):
    """Every pixel of the batch carries the ignore label."""


class TrainingDiverged(FloatingPointError):
    pass


class GradCheckError(AssertionError):
    pass


@dataclass(frozen=True)
class LossConfig:
    weights: tuple = (0.2, 0.8)
    ignore: int = IGNORE
    clamp: float = 1e-12

    def __post_init__(self):
        if any(w < 0 for w in self.weights):
            raise ValueError("class weights must be non-negative")


@dataclass(frozen=True)
class OptimConfig:
    lr: float = 1e-3
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-7
    batch_size: int = 32

    def __post_init__(self):
        if not (0 < self.beta1 < 1 and 0 < self.beta2 < 1):
            raise ValueError("Adam betas must lie in (0, 1)")


def wcce_loss(pred, target, cfg: LossConfig = LossConfig()):
    """Weighted categorical cross-entropy over non-ignored pixels.

    ``pred`` holds probabilities (n, K, h, w), ``target`` integer labels
    (n, h, w). Returns ``(loss, grad)`` where ``grad`` is taken with
    respect to the pre-softmax logits: ``w_y (p - onehot_y) / M`` per
    pixel, zero at ignored pixels.
    """
    n, k, h, w = pred.shape
    if target.shape != (n, h, w):
        raise T.DimensionError(f"target shape {target.shape} does not match predictions {pred.shape}")
    weights = np.asarray(cfg.weights, dtype=np.float64)
    if weights.size != k:
        raise ValueError(f"{weights.size} class weights for {k} classes")
    keep = target != cfg.ignore
    m = int(keep.sum())
    if m == 0:
        raise EmptyLossSupport("empty loss support: every pixel is ignored")
    y = np.where(keep, target, 0).astype(np.intp)
    if y.max() >= k or y.min() < 0:
        raise ValueError(f"labels outside 0..{k - 1} (ignore id {cfg.ignore})")
    p_true = np.take_along_axis(pred, y[:, None], axis=1)[:, 0]
    wy = weights[y] * keep
    loss = -float(np.sum(wy * np.log(np.maximum(p_true, cfg.clamp)))) / m
    grad = pred.copy()
    np.put_along_axis(grad, y[:, None], p_true[:, None] - 1, axis=1)
    grad *= (wy / m).astype(pred.dtype)[:, None]
    return loss, grad


class Adam:
    """Bias-corrected Adam; moments live in each ParamBlock."""

    def __init__(self, params, cfg: OptimConfig = OptimConfig()):
        self.params = list(params)
        self.cfg = cfg
        self.t = 0

    def step(self):
        c = self.cfg
        self.t += 1
        corr1 = 1 - c.beta1 ** self.t
        corr2 = 1 - c.beta2 ** self.t
        for block in self.params:
            for value, grad, m, v in block.slots():
                m *= c.beta1
                m += (1 - c.beta1) * grad
                v *= c.beta2
                v += (1 - c.beta2) * grad * grad
                value -= c.lr * (m / corr1) / (np.sqrt(v / corr2) + c.eps)


def adam_step(params, opt: Adam):
    opt.step()


@dataclass
class EarlyStopState:
    patience: int = 10
    best: float = math.inf
    best_epoch: int = -1
    counter: int = 0

    def update(self, epoch, val_loss) -> bool:
        """Record one epoch; True when this epoch is the new best."""
        if val_loss < self.best:
            self.best, self.best_epoch, self.counter = val_loss, epoch, 0
            return True
        self.counter += 1
        return False

    @property
    def should_stop(self):
        return self.counter >= self.patience


@dataclass
class TrainConfig:
    max_epochs: int = 500
    patience: int = 10
    seed: int = 0
    loss: LossConfig = field(default_factory=LossConfig)
    optim: OptimConfig = field(default_factory=OptimConfig)
    eval_batch: int = 16
    monitor: str = "val_loss"  # or "train_loss" (memorisation runs)
    target_loss: float | None = None  # stop as soon as the monitored loss drops below


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_loss: float
    seconds: float


class ArrayPatches:
    """Minimal in-memory patch source: ``X`` (N, C, h, w), ``Y`` (N, h, w)."""

    def __init__(self, X, Y):
        if len(X) != len(Y):
            raise ValueError("X and Y lengths differ")
        self.X, self.Y = X, Y

    def __len__(self):
        return len(self.X)

    def get(self, idx):
        return self.X[idx], self.Y[idx]


def _as_source(data):
    if isinstance(data, tuple):
        return ArrayPatches(*data)
    return data


def evaluate_loss(net, source, cfg: TrainConfig):
    """Mean loss per non-ignored pixel over a patch source (no caching)."""
    dtype = net.params()[0].w.dtype
    wsum = 0.0
    msum = 0
    for i in range(0, len(source), cfg.eval_batch):
        x, y = source.get(np.arange(i, min(i + cfg.eval_batch, len(source))))
        p = net.forward(x.astype(dtype, copy=False))
        net.clear()
        m = int((y != cfg.loss.ignore).sum())
        if m:
            wsum += wcce_loss(p, y, cfg.loss)[0] * m
            msum += m
    return wsum / msum if msum else math.nan


def train(net, train_data, val_data=None, cfg: TrainConfig = TrainConfig(), history_path=None, meta=None,
          on_epoch=None, timings=True):
    """Mini-batch Adam with seeded shuffling and early stopping.

    Returns ``(checkpoint, history)``: the checkpoint of the best epoch
    (by validation loss, or training loss when ``cfg.monitor`` says so)
    and one :class:`EpochRecord` per epoch. The network is left holding
    the best weights. ``on_epoch(record)`` may return True to stop early.
    """
    tr = _as_source(train_data)
    va = _as_source(val_data) if val_data is not None else None
    if len(tr) == 0 or (va is not None and len(va) == 0):
        raise ValueError("training and validation sets must be non-empty")
    if cfg.monitor == "val_loss" and va is None:
        raise ValueError("validation data required when monitoring val_loss")
    dtype = net.params()[0].w.dtype
    rng = np.random.default_rng(cfg.seed)
    opt = Adam(net.params(), cfg.optim)
    stop = EarlyStopState(cfg.patience)
    best = Checkpoint.from_network(net, meta)
    history = []
    bs = cfg.optim.batch_size
    step = 0
    for epoch in range(cfg.max_epochs):
        t0 = time.perf_counter()
        order = rng.permutation(len(tr))
        wsum, msum = 0.0, 0
        for i in range(0, len(order), bs):
            x, y = tr.get(np.sort(order[i:i + bs]))
            m = int((y != cfg.loss.ignore).sum())
            if m == 0:
                continue
            net.zero_grad()
            p = net.forward(x.astype(dtype, copy=False))
            loss, g = wcce_loss(p, y, cfg.loss)
            if not math.isfinite(loss):
                net.clear()
                raise TrainingDiverged(f"non-finite loss {loss} at epoch {epoch}, step {step}")
            net.backward_logits(g)
            opt.step()
            step += 1
            wsum += loss * m
            msum += m
        train_loss = wsum / msum if msum else math.nan
        val_loss = evaluate_loss(net, va, cfg) if va is not None else math.nan
        rec = EpochRecord(epoch, train_loss, val_loss, time.perf_counter() - t0)
        history.append(rec)
        monitored = val_loss if cfg.monitor == "val_loss" else train_loss
        if not math.isfinite(monitored):
            raise TrainingDiverged(f"non-finite {cfg.monitor} at epoch {epoch}, step {step}")
        if stop.update(epoch, monitored):
            best = Checkpoint.from_network(net, meta)
        log.info("epoch %d train %.5f val %.5f (%.1fs)", epoch, train_loss, val_loss, rec.seconds)
        halt = bool(on_epoch(rec)) if on_epoch is not None else False
        if halt or stop.should_stop or (cfg.target_loss is not None and monitored < cfg.target_loss):
            break
    best.meta.update({"best_epoch": stop.best_epoch, "best_loss": stop.best})
    best.restore(net)
    if history_path is not None:
        write_history(history, history_path, timings)
    return best, history


def write_history(history, path, timings=True):
    """CSV with columns epoch, train_loss, val_loss, seconds.

    With ``timings=False`` the wall-clock column is written as ``NA`` so
    that seeded runs produce byte-identical files.
    """
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["epoch", "train_loss", "val_loss", "seconds"])
        for r in history:
            w.writerow([r.epoch, repr(r.train_loss), repr(r.val_loss), f"{r.seconds:.3f}" if timings else "NA"])


# ---------------------------------------------------------------- gradient check


@dataclass
class GradCheckEntry:
    name: str
    kind: str  # "coords" | "direction" | "input"
    checked: int
    skipped: int
    rel_err: float


@dataclass
class GradCheckReport:
    entries: list
    tolerance: float

    @property
    def max_rel_err(self):
        return max((e.rel_err for e in self.entries), default=0.0)

    @property
    def failures(self):
        return [e for e in self.entries if not e.rel_err <= self.tolerance]

    @property
    def ok(self):
        return not self.failures

    @property
    def skipped(self):
        return sum(e.skipped for e in self.entries)

    def raise_if_failed(self):
        if not self.ok:
            names = ", ".join(f"{e.name} ({e.kind}: {e.rel_err:.2e})" for e in self.failures[:8])
            raise GradCheckError(f"gradient check above {self.tolerance:g}: {names}")

    def summary(self):
        status = "PASS" if self.ok else "FAIL"
        return (f"{status} max_rel_err={self.max_rel_err:.3e} tol={self.tolerance:g} "
                f"entries={len(self.entries)} skipped_kinks={self.skipped}")


def _rel(a, b, scale=0.0):
    """``||a - b|| / max(||a||, ||b||, scale)``; 0 when everything is zero."""
    a = np.asarray(a, dtype=np.float64).ravel()
    b = np.asarray(b, dtype=np.float64).ravel()
    den = max(np.linalg.norm(a), np.linalg.norm(b), scale)
    if den == 0:
        return 0.0
    return float(np.linalg.norm(a - b) / den)


def _sample_scale(grads, n_checked):
    """Expected norm of ``n_checked`` random entries of the full gradient:
    ``||g|| * sqrt(k / N)``. Used as a floor for the error denominator, so a
    sample that happens to hit near-zero entries is judged against the
    block's gradient scale (the sampled estimate of the block-wise error)
    rather than against round-off."""
    total = sum(g.size for g in grads)
    norm = math.sqrt(sum(float(np.sum(g * g)) for g in grads))
    return norm * math.sqrt(n_checked / total) if total else 0.0


def prepare_check_point(model, seed=0, bias_scale=0.1, gate_bias=1.0, lstm_gain=2.0):
    """Move a freshly initialised model to a well-conditioned check point.

    Zero biases leave exact zeros in front of many relus (kinks that every
    finite-difference sample straddles), and default-initialised ConvLSTM
    stacks shrink their signal so much that deep gradients fall below what
    64-bit central differences can resolve. This adds small random biases
    everywhere, opens the ConvLSTM input/output gates and scales the gate
    kernels. Any parameter point is as good as another for verifying the
    backward pass; this one just keeps every gradient measurable.
    """
    from .recurrent import ConvLSTM

    rng = np.random.default_rng(seed)
    for _, block in model.named_params():
        if block.b is not None:
            block.b += rng.normal(0.0, bias_scale, block.b.shape).astype(block.b.dtype)
    for layer in model.layers():
        if isinstance(layer, ConvLSTM):
            h = layer.p.hid_c
            layer.p.wx.b[:h] += gate_bias
            layer.p.wx.b[3 * h:] += gate_bias
            layer.p.wx.w *= lstm_gain
            layer.p.wh.w *= lstm_gain
    return model


def grad_check(model, x, y=None, tolerance=1e-6, coords=50, directions=0, input_coords=None,
               eps=1e-6, seed=0, loss_cfg: LossConfig = LossConfig()):
    """Central finite differences against the analytic backward pass (64-bit).

    For a :class:`~rrcnn.architectures.Network` with labels ``y`` the
    scalar is the weighted cross-entropy; otherwise it is the probe
    ``sum(r * model(x))`` for a fixed random ``r``. Per ParamBlock,
    ``coords`` coordinates (or all, if fewer) are compared, plus
    ``directions`` random whole-block directional derivatives. Input
    gradients use all entries unless ``input_coords`` caps them.

    A finite-difference sample whose +/- evaluations change a relu sign or a
    pooling argmax anywhere in the model straddles a kink; it is retried
    with a 10x smaller step and skipped (counted) if that still straddles.
    The error per coordinate entry is ``||num - ana|| / max(||num||, ||ana||, s)``
    where ``s = ||g|| sqrt(k / N)`` is the expected norm of ``k`` random entries
    of the block's full analytic gradient ``g`` (``N`` entries): an estimate of
    the block-wise norm-wise relative error that is not dominated by
    finite-difference round-off when the sample hits near-zero entries. A
    directional entry divides ``|num - ana|`` by the block gradient norm.
    """
    rng = np.random.default_rng(seed)
    if any(b.w.dtype != np.float64 for b in model.params()):
        raise TypeError("grad_check needs a 64-bit model (use .astype(np.float64))")
    x = np.array(x, dtype=np.float64)
    is_net = y is not None and hasattr(model, "backward_logits")
    if is_net:
        def value():
            p = model.forward(x)
            model.clear()
            return wcce_loss(p, y, loss_cfg)[0]
    else:
        model.clear()
        probe = rng.standard_normal(model.forward(x).shape)
        model.clear()

        def value():
            out = model.forward(x)
            model.clear()
            return float(np.sum(probe * out))

    # analytic gradients
    model.clear()
    model.zero_grad()
    out = model.forward(x)
    if is_net:
        gx = model.backward_logits(wcce_loss(out, y, loss_cfg)[1])
    else:
        gx = model.backward(probe)
    model.clear()

    def signed_value():
        with T.branch_monitor() as mon:
            v = value()
        return v, mon.signature()

    _, base_sig = signed_value()

    def fd(shift):
        """``shift(h)`` sets the variable(s) to base + h; ``shift(0)`` restores exactly."""
        h = eps
        try:
            for _ in range(2):
                shift(h)
                fp, sp = signed_value()
                shift(-h)
                fm, sm = signed_value()
                if sp == base_sig and sm == base_sig:
                    return (fp - fm) / (2 * h)
                h /= 10
            return None
        finally:
            shift(0.0)

    def coord_entry(name, arr, grad, n_max):
        flat, gflat = arr.reshape(-1), grad.reshape(-1)
        idx = np.arange(flat.size) if n_max is None or flat.size <= n_max else \
            np.sort(rng.choice(flat.size, size=n_max, replace=False))
        num, ana, skipped = [], [], 0
        for i in idx:
            def shift(d, i=i, old=flat[i]):
                flat[i] = old + d
            v = fd(shift)
            if v is None:
                skipped += 1
                continue
            num.append(v)
            ana.append(gflat[i])
        return GradCheckEntry(name, "coords" if name != "input" else "input", len(num), skipped,
                              _rel(num, ana, _sample_scale([grad], len(num))))

    entries = [coord_entry("input", x, gx, input_coords)]
    for name, block in model.named_params():
        slots = list(block.slots())
        sizes = [s[0].size for s in slots]
        total = sum(sizes)
        n_take = None if total <= coords else coords
        # share the coordinate budget between weights and bias by size
        num, ana, skipped = [], [], 0
        picks = np.arange(total) if n_take is None else np.sort(rng.choice(total, size=n_take, replace=False))
        offs = np.cumsum([0] + sizes)
        for j in picks:
            s = int(np.searchsorted(offs, j, side="right") - 1)
            value_arr, grad_arr = slots[s][0].reshape(-1), slots[s][1].reshape(-1)
            k = j - offs[s]

            def shift(d, a=value_arr, k=k, old=value_arr[k]):
                a[k] = old + d
            v = fd(shift)
            if v is None:
                skipped += 1
                continue
            num.append(v)
            ana.append(grad_arr[k])
        entries.append(GradCheckEntry(name, "coords", len(num), skipped,
                                      _rel(num, ana, _sample_scale([sl[1] for sl in slots], len(num)))))
        for _ in range(directions):
            dirs = [rng.standard_normal(s[0].shape) for s in slots]
            norm = math.sqrt(sum(float(np.sum(d * d)) for d in dirs))
            dirs = [d / norm for d in dirs]
            ana_d = sum(float(np.sum(d * s[1])) for d, s in zip(dirs, slots))

            bases = [s[0].copy() for s in slots]

            def shift(dlt, dirs=dirs, slots=slots, bases=bases):
                for d, s, b0 in zip(dirs, slots, bases):
                    s[0][...] = b0 + dlt * d
            v = fd(shift)
            # scale by the block gradient norm, the largest possible unit-direction derivative
            gnorm = math.sqrt(sum(float(np.sum(s[1] * s[1])) for s in slots))
            err = 0.0 if v is None else abs(v - ana_d) / max(gnorm, abs(v), 1e-300)
            entries.append(GradCheckEntry(name, "direction", 0 if v is None else 1, 1 if v is None else 0, err))
    return GradCheckReport(entries, tolerance)
