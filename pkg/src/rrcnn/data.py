"""Raster containers, temporal stacking, tiling, folds, patches, augmentation
and normalization.

Container layout (little-endian), shared by rasters and label maps::

    offset  size  field
    0       4     magic  b"SARC" (rasters) or b"SARL" (labels)
    4       2     version (u16) = 1
    6       4     H (u32)
    10      4     W (u32)
    14      4     C (u32)            labels: C = 1
    18      1     dtype code (u8)    0 = float32, 2 = uint8
    19      5     reserved, zero
    24      ...   C planes of H*W values, row-major, channel order
    end-4   4     CRC32 (u32) of every preceding byte

Per-timestep acquisition tags are not part of the container; they travel
in an optional ``<file>.tags.json`` sidecar.
"""
from __future__ import annotations

import json
import struct
import zlib
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .tensor import DimensionError

HEADER = struct.Struct("<4sHIIIB5x")
VERSION = 1
DTYPE_CODES = {0: np.dtype("<f4"), 2: np.dtype("u1")}
RASTER_MAGIC, LABEL_MAGIC = b"SARC", b"SARL"
NO_DEF, DEF, PAST_DEF = 0, 1, 2
PATCH = 128
STRIDE = 39
MIN_DEF_FRACTION = 0.02
MAX_OVERLAP = 0.70


class FormatError(Exception):
    """Base class for container errors."""


class BadMagicError(FormatError):
    pass


class DimensionMismatchError(FormatError):
    pass


class TruncatedPayloadError(FormatError):
    pass


class ChecksumError(FormatError):
    pass


# ---------------------------------------------------------------- containers


@dataclass
class RasterStack:
    """Time-major stack of (VV, VH) planes: channels t0VV, t0VH, t1VV, ..."""

    data: np.ndarray  # (2D, H, W) float32
    tags: list = field(default_factory=list)

    def __post_init__(self):
        if self.data.ndim != 3:
            raise DimensionError(f"raster stack must be (C, H, W), got {self.data.shape}")
        if self.data.shape[0] % 2:
            raise DimensionError(f"channel count {self.data.shape[0]} is not 2 x timesteps")
        if self.tags and len(self.tags) != self.timesteps:
            raise ValueError(f"{len(self.tags)} tags for {self.timesteps} timesteps")

    @property
    def timesteps(self):
        return self.data.shape[0] // 2

    @property
    def shape(self):
        return self.data.shape[1:]

    def frame(self, t):
        """(VV, VH) planes of timestep ``t``."""
        return self.data[2 * t:2 * t + 2]


def _encode(magic, planes, code):
    c, h, w = planes.shape
    body = HEADER.pack(magic, VERSION, h, w, c, code) + np.ascontiguousarray(planes, DTYPE_CODES[code]).tobytes()
    return body + struct.pack("<I", zlib.crc32(body))


def _decode(data: bytes, magic, path="<bytes>"):
    if len(data) < HEADER.size + 4:
        raise TruncatedPayloadError(f"{path}: {len(data)} bytes is shorter than the header")
    got, ver, h, w, c, code = HEADER.unpack_from(data)
    if got != magic:
        raise BadMagicError(f"{path}: bad magic {got!r}, expected {magic!r}")
    if ver != VERSION:
        raise FormatError(f"{path}: unsupported version {ver}")
    if code not in DTYPE_CODES:
        raise FormatError(f"{path}: unknown dtype code {code}")
    dt = DTYPE_CODES[code]
    need = HEADER.size + c * h * w * dt.itemsize + 4
    if len(data) < need:
        raise TruncatedPayloadError(f"{path}: payload has {len(data)} bytes, header needs {need}")
    if len(data) > need:
        raise DimensionMismatchError(f"{path}: {len(data) - need} bytes beyond the {c}x{h}x{w} payload")
    (crc,) = struct.unpack_from("<I", data, need - 4)
    if crc != zlib.crc32(data[:need - 4]):
        raise ChecksumError(f"{path}: checksum mismatch")
    planes = np.frombuffer(data, dt, count=c * h * w, offset=HEADER.size).reshape(c, h, w)
    return planes, code


def _tags_path(path):
    return Path(str(path) + ".tags.json")


def write_stack(stack: RasterStack, path):
    path = Path(path)
    path.write_bytes(_encode(RASTER_MAGIC, stack.data, 0))
    if stack.tags:
        _tags_path(path).write_text(json.dumps(list(stack.tags)))
    return path


def ingest(path) -> RasterStack:
    path = Path(path)
    planes, code = _decode(path.read_bytes(), RASTER_MAGIC, path)
    if code != 0:
        raise FormatError(f"{path}: raster container must hold float32 planes (code 0), got code {code}")
    if planes.shape[0] % 2:
        raise DimensionMismatchError(f"{path}: {planes.shape[0]} channels is not a whole number of (VV, VH) pairs")
    tp = _tags_path(path)
    tags = json.loads(tp.read_text()) if tp.exists() else []
    return RasterStack(planes.astype(np.float32), tags)


def write_labels(labels, path):
    labels = np.asarray(labels)
    check_labels(labels)
    Path(path).write_bytes(_encode(LABEL_MAGIC, labels.astype(np.uint8)[None], 2))
    return Path(path)


def ingest_labels(path, shape=None) -> np.ndarray:
    """Read a label map; ``shape`` (H, W) is checked against the header when given."""
    path = Path(path)
    planes, code = _decode(path.read_bytes(), LABEL_MAGIC, path)
    if code != 2 or planes.shape[0] != 1:
        raise DimensionMismatchError(f"{path}: label container must be one uint8 plane")
    labels = planes[0].copy()
    if shape is not None and labels.shape != tuple(shape):
        raise DimensionMismatchError(f"{path}: labels are {labels.shape}, raster is {tuple(shape)}")
    check_labels(labels)
    return labels


def check_labels(labels):
    if labels.ndim != 2:
        raise DimensionError(f"label map must be 2-D, got {labels.shape}")
    if labels.size and labels.max() > PAST_DEF:
        raise ValueError(f"label codes must be in {{0, 1, 2}}, found {int(labels.max())}")


def select_epochs(stack: RasterStack, mode: str) -> RasterStack:
    """``bitemporal`` keeps the first and last timesteps, ``multitemporal`` all."""
    if stack.timesteps < 2:
        raise ValueError(f"need at least 2 timesteps, stack has {stack.timesteps}")
    if mode == "multitemporal":
        return stack
    if mode != "bitemporal":
        raise ValueError(f"unknown temporal mode {mode!r}")
    last = stack.timesteps - 1
    data = np.concatenate([stack.frame(0), stack.frame(last)])
    tags = [stack.tags[0], stack.tags[last]] if stack.tags else []
    return RasterStack(data, tags)


# ---------------------------------------------------------------- tiles and folds


@dataclass(frozen=True)
class TileGrid:
    height: int
    width: int
    tile_h: int
    tile_w: int

    @property
    def rows(self):
        return self.height // self.tile_h

    @property
    def cols(self):
        return self.width // self.tile_w

    @property
    def n_tiles(self):
        return self.rows * self.cols

    @property
    def margins(self):
        """Truncated (bottom rows, right columns)."""
        return self.height - self.rows * self.tile_h, self.width - self.cols * self.tile_w

    def origin(self, r, c):
        return r * self.tile_h, c * self.tile_w

    def tile_id(self, r, c):
        return r * self.cols + c

    def position(self, tile_id):
        if not 0 <= tile_id < self.n_tiles:
            raise IndexError(f"tile {tile_id} outside a {self.rows}x{self.cols} grid")
        return divmod(tile_id, self.cols)

    def window(self, tile_id):
        r, c = self.position(tile_id)
        y0, x0 = self.origin(r, c)
        return slice(y0, y0 + self.tile_h), slice(x0, x0 + self.tile_w)


def make_tiles(h, w, tile_h=961, tile_w=932) -> TileGrid:
    """Non-overlapping grid by floor division; remainders are truncated.

    The defaults reproduce 60 tiles (6 rows x 10 columns) on a 5767 x 9327
    scene, i.e. tiles 932 pixels wide and 961 high.
    """
    if h < tile_h or w < tile_w:
        raise ValueError(f"raster {h}x{w} is smaller than one {tile_h}x{tile_w} tile")
    return TileGrid(h, w, tile_h, tile_w)


@dataclass(frozen=True)
class FoldPlan:
    k: int
    tile_fold: tuple  # fold index per tile id
    seed: int

    def test_tiles(self, fold):
        self._check(fold)
        return [t for t, f in enumerate(self.tile_fold) if f == fold]

    def train_tiles(self, fold):
        self._check(fold)
        return [t for t, f in enumerate(self.tile_fold) if f != fold]

    def _check(self, fold):
        if not 0 <= fold < self.k:
            raise IndexError(f"fold {fold} outside 0..{self.k - 1}")


def assign_folds(grid: TileGrid | int, k=6, seed=0) -> FoldPlan:
    """Seeded shuffle of tile ids split into ``k`` near-equal test groups."""
    n = grid if isinstance(grid, int) else grid.n_tiles
    if k > n:
        raise ValueError(f"{k} folds need at least {k} tiles, grid has {n}")
    order = np.random.default_rng(seed).permutation(n)
    fold = np.empty(n, dtype=int)
    for f, group in enumerate(np.array_split(order, k)):
        fold[group] = f
    return FoldPlan(k, tuple(int(v) for v in fold), seed)


# ---------------------------------------------------------------- patches


def overlap(stride, patch=PATCH):
    return max(patch - stride, 0) / patch


def min_stride(max_overlap=MAX_OVERLAP, patch=PATCH):
    """Smallest stride whose consecutive-patch overlap stays within ``max_overlap``."""
    s = 1
    while overlap(s, patch) > max_overlap + 1e-12:
        s += 1
    return s


def offsets(length, patch=PATCH, stride=STRIDE):
    """Raster-scan offsets along one axis, with the last patch snapped to the edge.

    The snapped patch replaces the last regular offset, so it never sits
    closer than ``stride`` to its predecessor, unless that would open a
    coverage gap (only possible for strides above half a patch); then it
    is appended instead.
    """
    if length < patch:
        raise ValueError(f"axis of {length} pixels cannot hold a {patch}-pixel patch")
    end = length - patch
    out = list(range(0, end + 1, stride))
    if out[-1] != end:
        if len(out) > 1 and end - out[-2] <= patch:
            out[-1] = end
        else:
            out.append(end)
    return out


@dataclass(frozen=True, order=True)
class Patch:
    tile: int
    row: int  # offset inside the tile
    col: int
    aug: int = 0


def extract_patches(grid: TileGrid, labels, tile_ids, training=True, patch=PATCH, stride=STRIDE,
                    min_def=MIN_DEF_FRACTION, aug_ids=range(8)):
    """Patch list for the given tiles, sorted by (tile, row, col, aug).

    Training patches need at least ``min_def`` of all their pixels in the
    deforestation class and are expanded over ``aug_ids``; inference
    patches are kept unfiltered with the identity transform.
    """
    need = min_def * patch * patch
    out = []
    for t in sorted(tile_ids):
        ys, xs = grid.window(t)
        tile_lab = labels[ys, xs]
        for r in offsets(grid.tile_h, patch, stride):
            for c in offsets(grid.tile_w, patch, stride):
                if training:
                    n_def = np.count_nonzero(tile_lab[r:r + patch, c:c + patch] == DEF)
                    if n_def < need:
                        continue
                    out.extend(Patch(t, r, c, a) for a in aug_ids)
                else:
                    out.append(Patch(t, r, c, 0))
    return sorted(out)


def split_validation(patches, fraction=0.2, seed=0):
    """Seeded split of training patch positions (all augmentations stay together)."""
    keys = sorted({(p.tile, p.row, p.col) for p in patches})
    rng = np.random.default_rng(seed)
    n_val = int(round(fraction * len(keys)))
    val_keys = {keys[i] for i in rng.choice(len(keys), size=n_val, replace=False)} if n_val else set()
    train = [p for p in patches if (p.tile, p.row, p.col) not in val_keys]
    val = [p for p in patches if (p.tile, p.row, p.col) in val_keys]
    return train, val


# ---------------------------------------------------------------- augmentation


def augment(x, y, aug_id):
    """Dihedral transform ``aug_id`` in 0..7: ``aug_id % 4`` quarter turns, then a
    horizontal flip when ``aug_id >= 4``. ``x`` is (C, h, w) or (h, w); ``y`` is (h, w)."""
    if not 0 <= aug_id < 8:
        raise ValueError(f"augmentation id {aug_id} outside 0..7")
    if x.shape[-1] != x.shape[-2] or (y is not None and y.shape[-1] != y.shape[-2]):
        raise DimensionError(f"augmentation needs square patches, got {x.shape}")
    k, flip = aug_id % 4, aug_id >= 4

    def tf(a):
        a = np.rot90(a, k, axes=(-2, -1))
        return np.flip(a, axis=-1) if flip else a

    return np.ascontiguousarray(tf(x)), None if y is None else np.ascontiguousarray(tf(y))


def deaugment(x, aug_id):
    """Inverse of :func:`augment` for an array of shape (..., h, w)."""
    k, flip = aug_id % 4, aug_id >= 4
    if flip:
        x = np.flip(x, axis=-1)
    return np.ascontiguousarray(np.rot90(x, -k, axes=(-2, -1)))


# ---------------------------------------------------------------- normalization


@dataclass
class NormStats:
    mean: np.ndarray
    std: np.ndarray
    floored: np.ndarray  # bool per channel: std was below the floor

    STD_FLOOR = 1e-6

    def to_dict(self):
        return {"mean": [float(v) for v in self.mean], "std": [float(v) for v in self.std],
                "floored": [bool(v) for v in self.floored]}

    @classmethod
    def from_dict(cls, d):
        return cls(np.asarray(d["mean"], np.float64), np.asarray(d["std"], np.float64),
                   np.asarray(d.get("floored", [False] * len(d["mean"])), bool))


def channel_stats(stack: RasterStack, grid: TileGrid | None = None, tile_ids=None) -> NormStats:
    """Per-channel mean/std over the given (training) tiles only."""
    if grid is None:
        pix = stack.data.reshape(stack.data.shape[0], -1).astype(np.float64)
    else:
        parts = []
        for t in tile_ids:
            ys, xs = grid.window(t)
            parts.append(stack.data[:, ys, xs].reshape(stack.data.shape[0], -1))
        if not parts:
            raise ValueError("no tiles to compute statistics from")
        pix = np.concatenate(parts, axis=1).astype(np.float64)
    mean = pix.mean(axis=1)
    std = pix.std(axis=1)
    floored = std < NormStats.STD_FLOOR
    return NormStats(mean, np.maximum(std, NormStats.STD_FLOOR), floored)


def normalize(data, stats: NormStats):
    """Standardize (C, H, W) or (N, C, H, W) data with precomputed statistics."""
    c_axis = data.ndim - 3
    shape = [1] * data.ndim
    shape[c_axis] = -1
    if data.shape[c_axis] != len(stats.mean):
        raise DimensionError(f"{data.shape[c_axis]} channels, statistics for {len(stats.mean)}")
    out = (data - stats.mean.reshape(shape)) / stats.std.reshape(shape)
    return out.astype(np.float32)


# ---------------------------------------------------------------- datasets


class PatchDataset:
    """Patch source for :func:`rrcnn.train.train`: ``get(idx)`` -> (X, Y)."""

    def __init__(self, data, labels, grid: TileGrid, patches, patch=PATCH):
        self.data, self.labels, self.grid, self.patches, self.patch = data, labels, grid, list(patches), patch

    def __len__(self):
        return len(self.patches)

    def tiles(self):
        """Provenance: tile ids any patch reads from."""
        return {p.tile for p in self.patches}

    def window(self, p: Patch):
        y0, x0 = self.grid.origin(*self.grid.position(p.tile))
        return slice(y0 + p.row, y0 + p.row + self.patch), slice(x0 + p.col, x0 + p.col + self.patch)

    def get(self, idx):
        idx = np.atleast_1d(idx)
        xs, ys = [], []
        for i in idx:
            p = self.patches[int(i)]
            wy, wx = self.window(p)
            x, y = augment(self.data[:, wy, wx], self.labels[wy, wx], p.aug)
            xs.append(x)
            ys.append(y)
        return np.stack(xs).astype(np.float32), np.stack(ys)


def patch_grid_predict(net, data, grid: TileGrid, tile_id, patch=PATCH, stride=STRIDE, batch_size=16):
    """Average class probabilities over overlapping patches of one tile."""
    from .metrics import ProbabilityAccumulator

    ys, xs = grid.window(tile_id)
    tile = data[:, ys, xs]
    acc = ProbabilityAccumulator(grid.tile_h, grid.tile_w, net.spec.n_classes)
    pos = [(r, c) for r in offsets(grid.tile_h, patch, stride) for c in offsets(grid.tile_w, patch, stride)]
    for i in range(0, len(pos), batch_size):
        chunk = pos[i:i + batch_size]
        x = np.stack([tile[:, r:r + patch, c:c + patch] for r, c in chunk]).astype(np.float32)
        probs = net.predict(x, batch_size=batch_size)
        for (r, c), p in zip(chunk, probs):
            acc.add(p, r, c)
    return acc.mean()


def stride_for_mode(mode):
    """Inference stride: ``overlap`` uses the training stride, ``disjoint`` full patches."""
    if mode == "overlap":
        return STRIDE
    if mode == "disjoint":
        return PATCH
    raise ValueError(f"unknown inference mode {mode!r}")


def max_consecutive_overlap(offs, patch=PATCH):
    return max((overlap(b - a, patch) for a, b in zip(offs, offs[1:])), default=0.0)

