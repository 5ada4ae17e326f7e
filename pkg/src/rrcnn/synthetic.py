"""Seeded multitemporal SAR-like scenes with deforestation ground truth.

Synthetic-model parameters (all invented defaults, in dB):

* forest backscatter VV -7, VH -12; pasture VV -10, VH -16;
  past-deforestation (older clearings) VV -11, VH -17;
* a deforestation event lowers the forest level by ``drop_db`` (3 dB) at
  its event time and then recovers linearly by ``recovery_db`` per
  timestep (1 dB) back to the forest level, so early events fade from the
  last acquisition;
* multiplicative gamma speckle with ``looks`` (4) looks on linear intensity.

Landcover and event regions are blobs: white noise smoothed by a Gaussian
of standard deviation ``blob_sigma`` pixels, thresholded at the quantile
that meets the target fraction.
"""
from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
from scipy import ndimage

from . import config as cfgmod
from .data import DEF, NO_DEF, PAST_DEF, RasterStack

FOREST, PASTURE, PAST = 0, 1, 2
CLASS_NAMES = {FOREST: "forest", PASTURE: "pasture", PAST: "past_deforestation"}


@dataclass(frozen=True)
class SceneConfig:
    height: int = 256
    width: int = 256
    timesteps: int = 7
    forest_fraction: float = 0.7
    past_fraction: float = 0.1
    deforestation_fraction: float = 0.05
    forest_vv_db: float = -7.0
    forest_vh_db: float = -12.0
    pasture_vv_db: float = -10.0
    pasture_vh_db: float = -16.0
    past_vv_db: float = -11.0
    past_vh_db: float = -17.0
    drop_db: float = 3.0
    recovery_db: float = 1.0
    looks: int = 4
    blob_sigma: float = 6.0
    event_sigma: float = 3.0
    seed: int = 0

    def __post_init__(self):
        for name in ("forest_fraction", "past_fraction", "deforestation_fraction"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise ValueError(f"{name} must be in [0, 1], got {v}")
        if self.forest_fraction + self.past_fraction > 1.0:
            raise ValueError("forest_fraction + past_fraction exceeds 1")
        if self.deforestation_fraction > self.forest_fraction:
            raise ValueError("deforestation_fraction exceeds the forest fraction it is carved from")
        if self.timesteps < 2:
            raise ValueError("timesteps must be at least 2")
        if self.looks < 1:
            raise ValueError("looks must be at least 1")
        if self.height < 1 or self.width < 1:
            raise ValueError("scene must be at least 1x1")
        if self.drop_db < 0 or self.recovery_db < 0:
            raise ValueError("drop and recovery must be non-negative")

    def replace(self, **kw):
        return dataclasses.replace(self, **kw)

    def to_dict(self):
        return dataclasses.asdict(self)

    def dumps(self):
        return cfgmod.dumps(self.to_dict(), header="synthetic scene configuration")

    @classmethod
    def loads(cls, text):
        return cfgmod.coerce_dataclass(cls, cfgmod.loads(text))

    def class_db(self, cls):
        return {FOREST: (self.forest_vv_db, self.forest_vh_db),
                PASTURE: (self.pasture_vv_db, self.pasture_vh_db),
                PAST: (self.past_vv_db, self.past_vh_db)}[cls]


@dataclass
class Scene:
    stack: RasterStack
    labels: np.ndarray      # (H, W) codes 0/1/2
    landcover: np.ndarray   # (H, W) FOREST/PASTURE/PAST at t0
    event_time: np.ndarray  # (H, W) int, 0 where no event
    clean_db: np.ndarray    # (2D, H, W) speckle-free dB


def _blobs(rng, shape, sigma):
    field = ndimage.gaussian_filter(rng.standard_normal(shape), sigma, mode="wrap")
    return field


def _top(field, mask, count):
    """Boolean mask of the ``count`` largest ``field`` values inside ``mask``."""
    out = np.zeros(field.shape, dtype=bool)
    if count <= 0:
        return out
    idx = np.flatnonzero(mask)
    order = np.argsort(field.reshape(-1)[idx], kind="stable")[::-1][:count]
    out.reshape(-1)[idx[order]] = True
    return out


def clean_intensity_db(cfg: SceneConfig, landcover, event_time):
    """Speckle-free dB stack (2D, H, W): class means plus drop-and-recovery at events."""
    d = cfg.timesteps
    out = np.empty((2 * d,) + landcover.shape, dtype=np.float64)
    base = np.empty((2,) + landcover.shape)
    for cls in (FOREST, PASTURE, PAST):
        vv, vh = cfg.class_db(cls)
        base[0][landcover == cls] = vv
        base[1][landcover == cls] = vh
    events = event_time > 0
    for t in range(d):
        since = t - event_time
        active = events & (since >= 0)
        deficit = np.where(active, np.maximum(cfg.drop_db - cfg.recovery_db * since, 0.0), 0.0)
        out[2 * t:2 * t + 2] = base - deficit
    return out


def generate_scene(cfg: SceneConfig) -> Scene:
    rng = np.random.default_rng(cfg.seed)
    shape = (cfg.height, cfg.width)
    n = cfg.height * cfg.width
    cover_field = _blobs(rng, shape, cfg.blob_sigma)
    clear_field = _blobs(rng, shape, cfg.blob_sigma)
    event_field = _blobs(rng, shape, cfg.event_sigma)

    forest = _top(cover_field, np.ones(shape, bool), int(round(cfg.forest_fraction * n)))
    past = _top(clear_field, ~forest, int(round(cfg.past_fraction * n)))
    landcover = np.full(shape, PASTURE, dtype=np.uint8)
    landcover[forest] = FOREST
    landcover[past] = PAST

    # events are carved from forest only, one timestep per contiguous region
    events = _top(event_field, forest, int(round(cfg.deforestation_fraction * n)))
    regions, n_regions = ndimage.label(events)
    times = rng.integers(1, cfg.timesteps, size=n_regions + 1)
    event_time = np.where(events, times[regions], 0).astype(np.int32)

    clean = clean_intensity_db(cfg, landcover, event_time)
    linear = 10.0 ** (clean / 10.0)
    speckle = rng.gamma(cfg.looks, 1.0 / cfg.looks, size=linear.shape)
    noisy_db = (10.0 * np.log10(linear * speckle)).astype(np.float32)

    labels = np.full(shape, NO_DEF, dtype=np.uint8)
    labels[landcover == PAST] = PAST_DEF
    labels[events] = DEF
    tags = [f"synthetic t{t}" for t in range(cfg.timesteps)]
    return Scene(RasterStack(noisy_db, tags), labels, landcover, event_time, clean)


def generate(cfg: SceneConfig):
    """(RasterStack, labels) for ``cfg``; bit-identical for equal configs."""
    scene = generate_scene(cfg)
    return scene.stack, scene.labels


def speckle_std_db(looks):
    """Standard deviation of 10*log10 of a unit-mean gamma(L) variable."""
    from scipy.special import polygamma

    return float(10.0 / np.log(10.0) * np.sqrt(polygamma(1, looks)))


def describe(cfg: SceneConfig, scene: Scene | None = None) -> dict:
    """Provenance: config, seed, realized fractions and per-class dB statistics."""
    scene = scene if scene is not None else generate_scene(cfg)
    n = scene.labels.size
    fractions = {CLASS_NAMES[c]: float(np.mean(scene.landcover == c)) for c in CLASS_NAMES}
    fractions["deforestation"] = float(np.count_nonzero(scene.labels == DEF) / n)
    stats = {}
    t0 = scene.stack.frame(0)
    for c, name in CLASS_NAMES.items():
        m = (scene.landcover == c) & (scene.event_time == 0)
        if m.any():
            stats[name] = {pol: {"mean_db": float(t0[i][m].mean()), "std_db": float(t0[i][m].std())}
                           for i, pol in enumerate(("vv", "vh"))}
    counts = np.bincount(scene.event_time[scene.event_time > 0], minlength=cfg.timesteps)
    return {
        "config": cfg.to_dict(),
        "seed": cfg.seed,
        "fractions": fractions,
        "class_stats_t0": stats,
        "events_per_timestep": [int(v) for v in counts[1:]],
        "speckle_std_db": speckle_std_db(cfg.looks),
    }
