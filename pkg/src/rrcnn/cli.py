"""Command-line interface: ``rrcnn <command> [--config FILE] [options]``.

Commands: synth, train, predict, evaluate, gradcheck, params, render.

Settings come from an optional flat ``key = value`` file (``--config``);
command-line flags always win over the file, and the file wins over the
built-in defaults. Two environment variables are honoured when neither a
flag nor the file sets the value: ``RRCNN_THREADS`` (BLAS thread count)
and ``RRCNN_OUT`` (output root).

Exit codes: 0 success; 1 usage or configuration error; 2 data or format
error; 3 numerical failure (non-finite loss, gradient-check breach). On
failure a single line ``error[<code>]: <kind>: <reason>`` goes to stderr.
"""
from __future__ import annotations

import argparse
import dataclasses
import hashlib
import json
import logging
import os
import platform
import sys
from contextlib import contextmanager
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from . import __version__
from . import config as cfgmod
from . import data as D
from . import kernels
from . import metrics as M
from .architectures import ARCHITECTURES, ArchitectureId, build, count_table, reconcile_counts
from .checkpoint import Checkpoint, CheckpointError
from .synthetic import SceneConfig, describe, generate_scene
from .tensor import DimensionError
from .train import GradCheckError, LossConfig, OptimConfig, TrainConfig, TrainingDiverged, grad_check, \
    prepare_check_point, train

log = logging.getLogger("rrcnn")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3


class UsageError(Exception):
    pass


# ---------------------------------------------------------------- run configuration


@dataclass
class RunConfig:
    arch: str = "rrcnn1"
    mode: str = "multitemporal"
    stack: str = ""
    labels: str = ""
    model: str = ""
    predictions: str = ""
    fold: str = "all"
    folds: int = 6
    seed: int = 0
    lr: float = 1e-3
    batch_size: int = 32
    max_epochs: int = 500
    patience: int = 10
    class_weights: tuple = (0.2, 0.8)
    width_scale: float = 1.0
    tile_h: int = 961
    tile_w: int = 932
    patch: int = 128
    stride: int = D.STRIDE
    min_def: float = D.MIN_DEF_FRACTION
    val_fraction: float = 0.2
    max_train_patches: int = 0  # 0 = all
    inference: str = "overlap"  # or "disjoint"
    out: str = ""
    threads: int = 0  # 0 = library default
    deterministic: bool = False

    def validate(self, need=()):
        try:
            ArchitectureId.parse(self.arch)
        except ValueError as exc:
            raise cfgmod.ConfigError(str(exc)) from exc
        if self.mode not in ("bitemporal", "multitemporal"):
            raise cfgmod.ConfigError(f"mode must be bitemporal or multitemporal, got {self.mode!r}")
        if self.inference not in ("overlap", "disjoint"):
            raise cfgmod.ConfigError(f"inference must be overlap or disjoint, got {self.inference!r}")
        if not 2 <= self.folds:
            raise cfgmod.ConfigError("folds must be at least 2")
        if self.fold != "all":
            try:
                f = int(self.fold)
            except ValueError:
                raise cfgmod.ConfigError(f"fold must be an index or 'all', got {self.fold!r}") from None
            if not 0 <= f < self.folds:
                raise cfgmod.ConfigError(f"fold index {f} outside 0..{self.folds - 1}")
        for key in need:
            value = getattr(self, key)
            if not value:
                raise cfgmod.ConfigError(f"setting {key!r} is required")
            if not Path(value).exists():
                raise cfgmod.ConfigError(f"{key} path does not exist: {value}")
        return self

    def fold_indices(self):
        return list(range(self.folds)) if self.fold == "all" else [int(self.fold)]

    def to_dict(self):
        return dataclasses.asdict(self)


SCENE_KEYS = {f.name for f in dataclasses.fields(SceneConfig)}
RUN_KEYS = {f.name for f in dataclasses.fields(RunConfig)}


def resolve(args, keys, cls):
    """Merge defaults < environment < config file < flags into ``cls``."""
    values = {}
    env_threads = os.environ.get("RRCNN_THREADS")
    env_out = os.environ.get("RRCNN_OUT")
    if "threads" in keys and env_threads:
        values["threads"] = cfgmod.parse_value(env_threads)
    if "out" in keys and env_out:
        values["out"] = env_out
    if getattr(args, "config", None):
        file_values = cfgmod.load(args.config)
        unknown = set(file_values) - keys - RUN_KEYS - SCENE_KEYS
        if unknown:
            raise cfgmod.ConfigError(f"{args.config}: unknown settings {sorted(unknown)}")
        values.update({k: v for k, v in file_values.items() if k in keys})
    for k in keys:
        v = getattr(args, k, None)
        if v is not None:
            values[k] = v
    if "fold" in values:
        values["fold"] = str(values["fold"])
    return cfgmod.coerce_dataclass(cls, values)


# ---------------------------------------------------------------- helpers


def sha256(path):
    h = hashlib.sha256()
    with open(path, "rb") as fh:
        for chunk in iter(lambda: fh.read(1 << 20), b""):
            h.update(chunk)
    return h.hexdigest()


def write_manifest(out_dir: Path, command, settings: dict, inputs=(), deterministic=False):
    """Config snapshot, seed, versions and input checksums for the run."""
    manifest = {
        "command": command,
        "settings": settings,
        "versions": {"rrcnn": __version__, "python": platform.python_version(), "numpy": np.__version__,
                     "kernels": kernels.BACKEND},
        "inputs": {str(p): sha256(p) for p in inputs if p and Path(p).is_file()},
        "deterministic": deterministic,
    }
    if not deterministic:
        import datetime

        manifest["started"] = datetime.datetime.now(datetime.timezone.utc).isoformat(timespec="seconds")
    path = out_dir / "manifest.json"
    path.write_text(json.dumps(manifest, indent=2, sort_keys=True) + "\n")
    return path


@contextmanager
def thread_limit(threads, deterministic):
    n = 1 if deterministic else threads
    if not n:
        yield
        return
    from threadpoolctl import threadpool_limits

    with threadpool_limits(limits=n):
        yield


def out_dir(rc_out, default):
    path = Path(rc_out or default)
    path.mkdir(parents=True, exist_ok=True)
    return path


def load_inputs(rc: RunConfig):
    stack = D.select_epochs(D.ingest(rc.stack), rc.mode)
    labels = D.ingest_labels(rc.labels, shape=stack.shape)
    grid = D.make_tiles(*stack.shape, tile_h=rc.tile_h, tile_w=rc.tile_w)
    if rc.patch > min(rc.tile_h, rc.tile_w):
        raise cfgmod.ConfigError(f"patch {rc.patch} larger than tile {rc.tile_h}x{rc.tile_w}")
    if rc.folds > grid.n_tiles:
        raise cfgmod.ConfigError(f"{rc.folds} folds need at least {rc.folds} tiles, grid has {grid.n_tiles}")
    return stack, labels, grid


def model_paths(model):
    p = Path(model)
    if p.is_dir():
        found = sorted(p.glob("fold_*/model.rrcw"))
        if not found:
            raise cfgmod.ConfigError(f"no fold_*/model.rrcw under {p}")
        return found
    return [p]


# ---------------------------------------------------------------- commands


def cmd_synth(args):
    sc = resolve(args, SCENE_KEYS, SceneConfig)
    out = out_dir(args.out or os.environ.get("RRCNN_OUT"), "synthetic")
    scene = generate_scene(sc)
    D.write_stack(scene.stack, out / "scene.sarc")
    D.write_labels(scene.labels, out / "labels.sarl")
    (out / "scene.cfg").write_text(sc.dumps())
    record = describe(sc, scene)
    (out / "provenance.json").write_text(json.dumps(record, indent=2, sort_keys=True) + "\n")
    write_manifest(out, "synth", sc.to_dict(), deterministic=True)
    print(f"wrote {out / 'scene.sarc'} ({sc.timesteps} timesteps, {sc.height}x{sc.width}) and {out / 'labels.sarl'}; "
          f"deforestation fraction {record['fractions']['deforestation']:.4f}")
    return EXIT_OK


def cmd_train(args):
    rc = resolve(args, RUN_KEYS, RunConfig).validate(need=("stack", "labels"))
    stack, labels, grid = load_inputs(rc)
    out = out_dir(rc.out, "runs")
    plan = D.assign_folds(grid, rc.folds, seed=rc.seed)
    write_manifest(out, "train", rc.to_dict(), [rc.stack, rc.labels], rc.deterministic)
    with thread_limit(rc.threads, rc.deterministic):
        for f in rc.fold_indices():
            train_tiles, test_tiles = plan.train_tiles(f), plan.test_tiles(f)
            stats = D.channel_stats(stack, grid, train_tiles)
            data = D.normalize(stack.data, stats)
            pats = D.extract_patches(grid, labels, train_tiles, training=True, patch=rc.patch, stride=rc.stride,
                                     min_def=rc.min_def)
            tr, va = D.split_validation(pats, rc.val_fraction, seed=rc.seed + f)
            if rc.max_train_patches and len(tr) > rc.max_train_patches:
                rng = np.random.default_rng(rc.seed + f)
                tr = sorted(tr[i] for i in rng.choice(len(tr), rc.max_train_patches, replace=False))
            if not tr or not va:
                raise D.FormatError(f"fold {f}: no training/validation patches pass the "
                                    f"{rc.min_def:.0%} deforestation filter")
            net = build(rc.arch, data.shape[0], width_scale=rc.width_scale, seed=rc.seed + f)
            meta = {"fold": f, "folds": rc.folds, "seed": rc.seed, "mode": rc.mode, "test_tiles": test_tiles,
                    "train_tiles": train_tiles, "norm": stats.to_dict(), "tile": [rc.tile_h, rc.tile_w],
                    "patch": rc.patch, "stride": rc.stride}
            tcfg = TrainConfig(max_epochs=rc.max_epochs, patience=rc.patience, seed=rc.seed + f,
                               loss=LossConfig(weights=tuple(rc.class_weights)),
                               optim=OptimConfig(lr=rc.lr, batch_size=rc.batch_size))
            fold_dir = out / f"fold_{f}"
            fold_dir.mkdir(exist_ok=True)
            ckpt, hist = train(net, D.PatchDataset(data, labels, grid, tr, rc.patch),
                               D.PatchDataset(data, labels, grid, va, rc.patch), tcfg,
                               history_path=fold_dir / "history.csv", meta=meta, timings=not rc.deterministic)
            ckpt.save(fold_dir / "model.rrcw")
            print(f"fold {f}: {len(tr)} train / {len(va)} val patches, {len(hist)} epochs, "
                  f"best val loss {ckpt.meta['best_loss']:.5f} at epoch {ckpt.meta['best_epoch']}")
    return EXIT_OK


def cmd_predict(args):
    rc = resolve(args, RUN_KEYS, RunConfig).validate(need=("stack", "model"))
    paths = model_paths(rc.model)
    out = out_dir(rc.out, "predictions")
    write_manifest(out, "predict", rc.to_dict(), [rc.stack, *paths], rc.deterministic)
    tiles_dir = out / "tiles"
    tiles_dir.mkdir(exist_ok=True)
    full = None
    grid = None
    with thread_limit(rc.threads, rc.deterministic):
        for path in paths:
            ckpt = Checkpoint.load(path)
            meta = ckpt.meta
            stack = D.select_epochs(D.ingest(rc.stack), meta.get("mode", rc.mode))
            grid = D.make_tiles(*stack.shape, *meta.get("tile", [rc.tile_h, rc.tile_w]))
            data = D.normalize(stack.data, D.NormStats.from_dict(meta["norm"]))
            net = ckpt.to_network()
            patch = meta.get("patch", rc.patch)
            stride = patch if rc.inference == "disjoint" else meta.get("stride", rc.stride)
            if full is None:
                full = np.full(stack.shape, M.NO_PRED, dtype=np.uint8)
            for t in meta.get("test_tiles", range(grid.n_tiles)):
                prob = D.patch_grid_predict(net, data, grid, t, patch=patch, stride=stride)
                r, c = grid.position(t)
                D.write_stack(D.RasterStack(prob.astype(np.float32)), tiles_dir / f"tile_r{r}_c{c}.sarc")
                ys, xs = grid.window(t)
                full[ys, xs] = M.threshold(prob[1])
    D.write_labels(full, out / "prediction.sarl")
    n_pred = int(np.count_nonzero(full != M.NO_PRED))
    print(f"wrote {out / 'prediction.sarl'} ({n_pred} predicted pixels of {full.size}) and per-tile probabilities "
          f"under {tiles_dir}")
    return EXIT_OK


def cmd_evaluate(args):
    rc = resolve(args, RUN_KEYS, RunConfig).validate(need=("predictions", "labels"))
    pred = D.ingest_labels(rc.predictions)
    ref = D.ingest_labels(rc.labels, shape=pred.shape)
    out = out_dir(rc.out, "evaluation")
    counts = M.accumulate(pred, ref)
    rep = M.write_report(counts, out / "confusion.csv", out / "report.txt")
    M.render(M.ChangeMap.from_labels(pred, ref), out / "change_map.png")
    write_manifest(out, "evaluate", rc.to_dict(), [rc.predictions, rc.labels], rc.deterministic)
    print(f"precision {rep['precision']:.4f} recall {rep['recall']:.4f} F1 {rep['f1']:.4f}"
          f"{' (degenerate)' if rep['degenerate'] else ''}")
    return EXIT_OK


def cmd_render(args):
    rc = resolve(args, RUN_KEYS, RunConfig).validate(need=("predictions", "labels"))
    pred = D.ingest_labels(rc.predictions)
    ref = D.ingest_labels(rc.labels, shape=pred.shape)
    target = Path(args.png or Path(rc.out or ".") / "change_map.png")
    target.parent.mkdir(parents=True, exist_ok=True)
    M.render(M.ChangeMap.from_labels(pred, ref), target)
    print(f"wrote {target}")
    return EXIT_OK


def cmd_gradcheck(args):
    archs = [ArchitectureId.parse(a) for a in args.arch.split(",")] if args.arch else list(ARCHITECTURES)
    channels = [int(c) for c in args.channels.split(",")]
    rng = np.random.default_rng(args.seed)
    failed = []
    for a in archs:
        for c in channels:
            net = prepare_check_point(build(a, c, dtype=np.float64, seed=args.seed, width_scale=args.width_scale))
            x = rng.standard_normal((1, c, args.size, args.size))
            y = rng.integers(0, 3, size=(1, args.size, args.size))
            rep = grad_check(net, x, y, tolerance=args.tolerance, coords=args.coords, directions=args.directions,
                             input_coords=args.coords, eps=args.eps, seed=args.seed)
            print(f"{a.value:8s} channels={c:<3d} {rep.summary()}")
            if not rep.ok:
                failed.append((a.value, c, rep))
    if failed:
        a, c, rep = failed[0]
        worst = max(rep.failures, key=lambda e: e.rel_err)
        raise GradCheckError(f"{len(failed)} check(s) failed; first {a}/{c}ch at {worst.name} "
                             f"rel err {worst.rel_err:.2e} > {rep.tolerance:.0e}")
    return EXIT_OK


def cmd_params(args):
    rows = count_table()
    print("| architecture | bitemporal | target | deviation | multitemporal | target | deviation | delta |")
    print("|---|---|---|---|---|---|---|---|")
    for r in rows:
        (pb, pm), (db, dm) = r.published, r.deviation
        print(f"| {r.arch.value} | {r.bi:,} | {pb:,} | {db:+.3%} | {r.multi:,} | {pm:,} | {dm:+.3%} | {r.delta:,} |")
    if args.reconciliation:
        Path(args.reconciliation).write_text(reconcile_counts(explore=args.explore).to_markdown())
        print(f"wrote {args.reconciliation}")
    return EXIT_OK


# ---------------------------------------------------------------- parser


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def _add_run_flags(p, keys):
    for f in dataclasses.fields(RunConfig):
        if f.name not in keys:
            continue
        flag = "--" + f.name.replace("_", "-")
        if f.type in ("bool", bool):
            p.add_argument(flag, dest=f.name, action="store_true", default=None)
        elif f.name == "class_weights":
            p.add_argument(flag, dest=f.name, type=lambda s: tuple(float(v) for v in s.split(",")), default=None)
        else:
            conv = {"int": int, "float": float}.get(str(f.type), str)
            p.add_argument(flag, dest=f.name, type=conv, default=None)


def make_parser():
    parser = _Parser(prog="rrcnn", description="Deforestation segmentation networks from scratch in numpy.")
    parser.add_argument("--version", action="version", version=f"rrcnn {__version__}")
    parser.add_argument("-v", "--verbose", action="store_true", help="log progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("synth", help="generate a synthetic multitemporal scene")
    p.add_argument("--config")
    p.add_argument("--out")
    for f in dataclasses.fields(SceneConfig):
        p.add_argument("--" + f.name.replace("_", "-"), dest=f.name, default=None,
                       type={"int": int, "float": float}.get(str(f.type), str))
    p.set_defaults(func=cmd_synth)

    common = {"arch", "mode", "fold", "folds", "seed", "out", "threads", "deterministic", "tile_h", "tile_w"}
    p = sub.add_parser("train", help="train one model per fold")
    p.add_argument("--config")
    _add_run_flags(p, common | {"stack", "labels", "lr", "batch_size", "max_epochs", "patience", "class_weights",
                                "width_scale", "patch", "stride", "min_def", "val_fraction", "max_train_patches"})
    p.set_defaults(func=cmd_train)

    p = sub.add_parser("predict", help="per-tile probabilities and a mosaic label raster")
    p.add_argument("--config")
    _add_run_flags(p, common | {"stack", "model", "inference", "patch"})
    p.set_defaults(func=cmd_predict)

    p = sub.add_parser("evaluate", help="confusion counts, precision/recall/F1 and a change map")
    p.add_argument("--config")
    _add_run_flags(p, {"predictions", "labels", "out", "deterministic", "threads"})
    p.set_defaults(func=cmd_evaluate)

    p = sub.add_parser("render", help="render a change map PNG from stored predictions")
    p.add_argument("--config")
    p.add_argument("--png")
    _add_run_flags(p, {"predictions", "labels", "out"})
    p.set_defaults(func=cmd_render)

    p = sub.add_parser("gradcheck", help="finite-difference gradient check of whole networks (64-bit)")
    p.add_argument("--arch", help="comma-separated ids (default: all six)")
    p.add_argument("--channels", default="4,14")
    p.add_argument("--size", type=int, default=16)
    p.add_argument("--coords", type=int, default=5)
    p.add_argument("--directions", type=int, default=1)
    p.add_argument("--tolerance", type=float, default=1e-5)
    p.add_argument("--eps", type=float, default=1e-4)
    p.add_argument("--width-scale", dest="width_scale", type=float, default=1.0)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_gradcheck)

    p = sub.add_parser("params", help="parameter counts against the published targets")
    p.add_argument("--reconciliation", help="also write the reconciliation document (markdown) here")
    p.add_argument("--explore", action="store_true", help="include the variant sweep in the document")
    p.set_defaults(func=cmd_params)
    return parser


def _fail(code, kind, exc):
    reason = " ".join(str(exc).split()) or exc.__class__.__name__
    print(f"error[{code}]: {kind}: {reason}", file=sys.stderr)
    return code


def main(argv=None):
    try:
        args = make_parser().parse_args(argv)
    except UsageError as exc:
        return _fail(EXIT_USAGE, "usage", exc)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except (UsageError, cfgmod.ConfigError) as exc:
        return _fail(EXIT_USAGE, "config", exc)
    except (D.FormatError, CheckpointError, DimensionError, FileNotFoundError, IsADirectoryError) as exc:
        return _fail(EXIT_DATA, "data", exc)
    except (TrainingDiverged, GradCheckError, FloatingPointError) as exc:
        return _fail(EXIT_NUMERIC, "numerical", exc)
    except OSError as exc:
        return _fail(EXIT_DATA, "io", exc)
    except ValueError as exc:
        return _fail(EXIT_DATA, "data", exc)


if __name__ == "__main__":
    sys.exit(main())
