"""Confusion counting, precision/recall/F1, tile mosaics and change maps."""
from __future__ import annotations

import csv
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .tensor import DimensionError

NO_DEF, DEF, PAST_DEF = 0, 1, 2
NO_PRED = 2  # prediction rasters: pixel not predicted

# change-map categories and their legend colours
TN, TP, FP, FN, PAST = 0, 1, 2, 3, 4
CATEGORY_NAMES = ("TN", "TP", "FP", "FN", "past-deforestation")
LEGEND = {
    PAST: (0x65, 0x65, 0x65),
    TP: (0x9A, 0x00, 0x00),
    TN: (0x00, 0x00, 0x9B),
    FP: (0xFF, 0xC7, 0x02),
    FN: (0x2A, 0xEB, 0xE4),
}


@dataclass
class ConfusionCounts:
    tp: int = 0
    tn: int = 0
    fp: int = 0
    fn: int = 0

    def __post_init__(self):
        if min(self.tp, self.tn, self.fp, self.fn) < 0:
            raise ValueError("confusion counts must be non-negative")

    @property
    def total(self):
        return self.tp + self.tn + self.fp + self.fn

    def __add__(self, other):
        return ConfusionCounts(self.tp + other.tp, self.tn + other.tn, self.fp + other.fp, self.fn + other.fn)

    def as_dict(self):
        return {"tp": self.tp, "tn": self.tn, "fp": self.fp, "fn": self.fn}


def accumulate(pred, ref, counts: ConfusionCounts | None = None) -> ConfusionCounts:
    """Add one prediction/reference pair to the running counts.

    Reference pixels labelled past-deforestation are skipped, and so are
    prediction pixels coded 2 (no prediction: truncated margins or tiles
    outside the evaluated folds); other predictions are 0/1 labels.
    """
    pred = np.asarray(pred)
    ref = np.asarray(ref)
    if pred.shape != ref.shape:
        raise DimensionError(f"prediction {pred.shape} and reference {ref.shape} differ")
    keep = (ref != PAST_DEF) & (pred != NO_PRED)
    p = pred[keep] == DEF
    r = ref[keep] == DEF
    tp = int(np.count_nonzero(p & r))
    fp = int(np.count_nonzero(p & ~r))
    fn = int(np.count_nonzero(~p & r))
    tn = int(p.size - tp - fp - fn)
    new = ConfusionCounts(tp, tn, fp, fn)
    return new if counts is None else counts + new


@dataclass(frozen=True)
class Score:
    value: float
    degenerate: bool = False

    def __float__(self):
        return self.value


def _ratio(num, den):
    return Score(0.0, True) if den == 0 else Score(num / den)


def precision(c: ConfusionCounts) -> Score:
    return _ratio(c.tp, c.tp + c.fp)


def recall(c: ConfusionCounts) -> Score:
    return _ratio(c.tp, c.tp + c.fn)


def f1(c: ConfusionCounts) -> Score:
    p, r = precision(c), recall(c)
    if p.value + r.value == 0:
        return Score(0.0, True)
    return Score(2 * p.value * r.value / (p.value + r.value), p.degenerate or r.degenerate)


def report(c: ConfusionCounts) -> dict:
    p, r, f = precision(c), recall(c), f1(c)
    return {**c.as_dict(), "precision": p.value, "recall": r.value, "f1": f.value,
            "degenerate": p.degenerate or r.degenerate or f.degenerate}


def write_report(c: ConfusionCounts, csv_path=None, text_path=None):
    rep = report(c)
    if csv_path is not None:
        with open(csv_path, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(list(rep))
            w.writerow([rep[k] for k in rep])
    if text_path is not None:
        flag = " (degenerate: a zero denominator was reported as 0)" if rep["degenerate"] else ""
        Path(text_path).write_text(
            f"TP {c.tp}  TN {c.tn}  FP {c.fp}  FN {c.fn}\n"
            f"precision {rep['precision']:.4f}\nrecall    {rep['recall']:.4f}\nF1        {rep['f1']:.4f}{flag}\n")
    return rep


def threshold(prob_def, level=0.5):
    """Deforestation where the averaged probability exceeds ``level``."""
    return (np.asarray(prob_def) > level).astype(np.uint8)


# ---------------------------------------------------------------- mosaics


class ProbabilityAccumulator:
    """Averages overlapping patch probabilities over one tile."""

    def __init__(self, h, w, n_classes=2):
        self.sum = np.zeros((n_classes, h, w), dtype=np.float64)
        self.count = np.zeros((h, w), dtype=np.int32)

    def add(self, probs, r, c):
        k, ph, pw = probs.shape
        self.sum[:, r:r + ph, c:c + pw] += probs
        self.count[r:r + ph, c:c + pw] += 1

    def mean(self):
        if np.any(self.count == 0):
            raise ValueError("tile not fully covered by patches")
        return (self.sum / self.count).astype(np.float32)


def mosaic(tile_maps: dict, grid, fill=0):
    """Place per-tile 2-D maps (keyed by (row, col)) on the scene raster.

    ``grid`` is a :class:`~rrcnn.data.TileGrid`; truncated margins get ``fill``.
    """
    first = next(iter(tile_maps.values()), None)
    if first is None:
        raise ValueError("no tiles to mosaic")
    out = np.full((grid.height, grid.width), fill, dtype=first.dtype)
    for r in range(grid.rows):
        for c in range(grid.cols):
            if (r, c) not in tile_maps:
                raise KeyError(f"missing prediction for tile at grid row {r}, col {c}")
            y0, x0 = grid.origin(r, c)
            tile = tile_maps[(r, c)]
            if tile.shape != (grid.tile_h, grid.tile_w):
                raise DimensionError(f"tile ({r}, {c}) has shape {tile.shape}, expected {(grid.tile_h, grid.tile_w)}")
            out[y0:y0 + grid.tile_h, x0:x0 + grid.tile_w] = tile
    return out


# ---------------------------------------------------------------- change maps


@dataclass
class ChangeMap:
    categories: np.ndarray  # uint8 codes TN/TP/FP/FN/PAST

    @classmethod
    def from_labels(cls, pred, ref):
        pred = np.asarray(pred)
        ref = np.asarray(ref)
        if pred.shape != ref.shape:
            raise DimensionError(f"prediction {pred.shape} and reference {ref.shape} differ")
        cat = np.full(ref.shape, TN, dtype=np.uint8)
        p = pred == DEF
        r = ref == DEF
        cat[p & r] = TP
        cat[p & ~r] = FP
        cat[~p & r] = FN
        cat[(ref == PAST_DEF) | (pred == NO_PRED)] = PAST
        return cls(cat)

    @property
    def shape(self):
        return self.categories.shape

    def rgb(self):
        lut = np.zeros((256, 3), dtype=np.uint8)
        for code, col in LEGEND.items():
            lut[code] = col
        return lut[self.categories]


def render(change_map: ChangeMap, path):
    """Write the change map as an RGB PNG with the legend colours."""
    from PIL import Image

    if change_map.categories.size == 0:
        raise ValueError("cannot render an empty change map")
    try:
        Image.fromarray(change_map.rgb(), mode="RGB").save(path, format="PNG")
    except OSError as exc:
        raise OSError(f"could not write change map to {path}: {exc}") from exc
    return path


def read_png(path):
    from PIL import Image

    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"))
