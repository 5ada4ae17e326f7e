"""Desk-scale experiments on synthetic scenes.

* :func:`overfit` — memorise a fixed handful of patches (capacity and
  gradient-plumbing sanity check);
* :func:`temporal_run` / :func:`temporal_benchmark` — train on a synthetic
  scene in bitemporal and multitemporal mode and score held-out tiles.

Both run reduced-width networks on small patches so that the whole suite
fits on one CPU core; the scale knobs are fields of the config objects.
"""
from __future__ import annotations

import dataclasses
import logging
import time
from dataclasses import dataclass, field

import numpy as np

from . import data as D
from . import metrics as M
from .architectures import ArchitectureId, build
from .checkpoint import Checkpoint
from .synthetic import SceneConfig, generate
from .train import OptimConfig, TrainConfig, train

log = logging.getLogger(__name__)


# ---------------------------------------------------------------- memorisation


@dataclass(frozen=True)
class OverfitConfig:
    n_patches: int = 8
    patch: int = 64
    width_scale: float = 0.25
    lr: float = 5e-3
    max_epochs: int = 200
    target_f1: float = 0.95
    scene_size: int = 256
    seed: int = 0


@dataclass
class OverfitResult:
    arch: str
    f1: float
    epochs: int
    seconds: float
    reached: bool


def overfit_set(cfg: OverfitConfig):
    """``n_patches`` multitemporal patches (X, Y) with deforestation in each."""
    stack, labels = generate(SceneConfig(height=cfg.scene_size, width=cfg.scene_size, seed=cfg.seed))
    grid = D.make_tiles(cfg.scene_size, cfg.scene_size, cfg.scene_size, cfg.scene_size)
    pats = D.extract_patches(grid, labels, [0], patch=cfg.patch, stride=D.min_stride(D.MAX_OVERLAP, cfg.patch),
                             aug_ids=(0,))
    if len(pats) < cfg.n_patches:
        raise ValueError(f"scene yields only {len(pats)} eligible patches")
    rng = np.random.default_rng(cfg.seed)
    pats = [pats[i] for i in sorted(rng.choice(len(pats), cfg.n_patches, replace=False))]
    data = D.normalize(stack.data, D.channel_stats(stack))
    return D.PatchDataset(data, labels, grid, pats, patch=cfg.patch).get(np.arange(cfg.n_patches))


def score(net, X, Y, batch_size=8):
    p = net.predict(X, batch_size=batch_size)
    return M.accumulate(M.threshold(p[:, 1]), Y)


def overfit(arch, cfg: OverfitConfig = OverfitConfig(), data=None) -> OverfitResult:
    """Train on the fixed set until its F1 reaches ``target_f1`` or epochs run out."""
    X, Y = data if data is not None else overfit_set(cfg)
    net = build(arch, X.shape[1], width_scale=cfg.width_scale, seed=cfg.seed)
    f1s = []
    hit = []
    t0 = time.perf_counter()

    def on_epoch(rec):
        f1s.append(M.f1(score(net, X, Y)).value)
        if f1s[-1] >= cfg.target_f1:
            hit.append(Checkpoint.from_network(net))
        return bool(hit)

    tcfg = TrainConfig(max_epochs=cfg.max_epochs, patience=cfg.max_epochs, seed=cfg.seed,
                       optim=OptimConfig(lr=cfg.lr, batch_size=cfg.n_patches))
    train(net, (X, Y), (X, Y), tcfg, on_epoch=on_epoch)
    if hit:  # train() restores the lowest-loss epoch; keep the one that met the target
        hit[0].restore(net)
    f1 = M.f1(score(net, X, Y)).value
    return OverfitResult(ArchitectureId.parse(arch).value, f1, len(f1s), time.perf_counter() - t0,
                         f1 >= cfg.target_f1)


# ---------------------------------------------------------------- temporal benchmark


@dataclass(frozen=True)
class TemporalConfig:
    size: int = 512
    timesteps: int = 7
    recovery_db: float = 1.0
    tile: int = 128
    folds: int = 4
    test_fold: int = 0
    patch: int = 32
    train_patches: int = 256
    val_patches: int = 64
    val_fraction: float = 0.2
    width_scale: float = 0.25
    lr: float = 3e-3
    batch_size: int = 16
    max_epochs: int = 15
    patience: int = 3
    seeds: tuple = (0, 1, 2)

    def scene(self, seed):
        return SceneConfig(height=self.size, width=self.size, timesteps=self.timesteps,
                           recovery_db=self.recovery_db, seed=seed)

    def to_dict(self):
        return dataclasses.asdict(self)


@dataclass
class RunResult:
    arch: str
    mode: str
    seed: int
    precision: float
    recall: float
    f1: float
    epochs: int
    seconds: float
    counts: dict = field(default_factory=dict)


@dataclass
class PreparedScene:
    """Everything about one seeded scene that does not depend on the model."""

    stack: D.RasterStack
    labels: np.ndarray
    grid: D.TileGrid
    train_tiles: list
    test_tiles: list
    train_patches: list
    val_patches: list


def prepare_scene(cfg: TemporalConfig, seed: int) -> PreparedScene:
    stack, labels = generate(cfg.scene(seed))
    grid = D.make_tiles(cfg.size, cfg.size, cfg.tile, cfg.tile)
    plan = D.assign_folds(grid, cfg.folds, seed=seed)
    train_tiles, test_tiles = plan.train_tiles(cfg.test_fold), plan.test_tiles(cfg.test_fold)
    stride = D.min_stride(D.MAX_OVERLAP, cfg.patch)
    pats = D.extract_patches(grid, labels, train_tiles, training=True, patch=cfg.patch, stride=stride)
    tr, va = D.split_validation(pats, cfg.val_fraction, seed=seed)
    rng = np.random.default_rng(seed)
    tr = sorted(tr[i] for i in rng.choice(len(tr), min(cfg.train_patches, len(tr)), replace=False))
    va = [p for p in va if p.aug == 0]
    va = sorted(va[i] for i in rng.choice(len(va), min(cfg.val_patches, len(va)), replace=False))
    assert not ({p.tile for p in tr + va} & set(test_tiles)), "test tile leaked into training patches"
    return PreparedScene(stack, labels, grid, train_tiles, test_tiles, tr, va)


def temporal_run(arch, mode, seed, cfg: TemporalConfig = TemporalConfig(), scene: PreparedScene | None = None):
    """Train one model on one scene/mode and score the held-out tiles."""
    t0 = time.perf_counter()
    scene = scene or prepare_scene(cfg, seed)
    stack = D.select_epochs(scene.stack, mode)
    stats = D.channel_stats(stack, scene.grid, scene.train_tiles)
    data = D.normalize(stack.data, stats)
    tr = D.PatchDataset(data, scene.labels, scene.grid, scene.train_patches, patch=cfg.patch)
    va = D.PatchDataset(data, scene.labels, scene.grid, scene.val_patches, patch=cfg.patch)
    net = build(arch, data.shape[0], width_scale=cfg.width_scale, seed=seed)
    tcfg = TrainConfig(max_epochs=cfg.max_epochs, patience=cfg.patience, seed=seed,
                       optim=OptimConfig(lr=cfg.lr, batch_size=cfg.batch_size))
    _, hist = train(net, tr, va, tcfg)
    counts = M.ConfusionCounts()
    for t in scene.test_tiles:
        prob = D.patch_grid_predict(net, data, scene.grid, t, patch=cfg.tile, stride=cfg.tile)
        ys, xs = scene.grid.window(t)
        counts = M.accumulate(M.threshold(prob[1]), scene.labels[ys, xs], counts)
    rep = M.report(counts)
    res = RunResult(ArchitectureId.parse(arch).value, mode, seed, rep["precision"], rep["recall"], rep["f1"],
                    len(hist), time.perf_counter() - t0, counts.as_dict())
    log.info("%s %s seed %d: F1 %.3f (%d epochs, %.0fs)", res.arch, mode, seed, res.f1, res.epochs, res.seconds)
    return res


def temporal_benchmark(archs, cfg: TemporalConfig = TemporalConfig(), modes=("bitemporal", "multitemporal"),
                       on_result=None):
    results = []
    for seed in cfg.seeds:
        scene = prepare_scene(cfg, seed)
        for arch in archs:
            for mode in modes:
                r = temporal_run(arch, mode, seed, cfg, scene)
                results.append(r)
                if on_result is not None:
                    on_result(r)
    return results


def summarize(results):
    """Mean F1 per (arch, mode) and the multitemporal-minus-bitemporal gain per arch."""
    table = {}
    for r in results:
        table.setdefault(r.arch, {}).setdefault(r.mode, []).append(r.f1)
    out = {}
    for arch, modes in table.items():
        means = {m: float(np.mean(v)) for m, v in modes.items()}
        if "bitemporal" in means and "multitemporal" in means:
            means["gain"] = means["multitemporal"] - means["bitemporal"]
        out[arch] = means
    return out


def summary_markdown(summary):
    lines = ["| architecture | F1 bitemporal | F1 multitemporal | gain |", "|---|---|---|---|"]
    for arch, m in summary.items():
        lines.append(f"| {arch} | {m.get('bitemporal', float('nan')):.3f} | "
                     f"{m.get('multitemporal', float('nan')):.3f} | {m.get('gain', float('nan')):+.3f} |")
    return "\n".join(lines) + "\n"
