import numpy as np
import pytest

from rrcnn import experiments as E

TINY = E.TemporalConfig(size=128, tile=64, folds=4, patch=32, train_patches=8, val_patches=4, width_scale=0.125,
                        batch_size=4, max_epochs=1, patience=1, seeds=(0,))


def test_overfit_set_shapes():
    cfg = E.OverfitConfig(n_patches=4, patch=32, scene_size=128)
    X, Y = E.overfit_set(cfg)
    assert X.shape == (4, 14, 32, 32) and X.dtype == np.float32
    assert Y.shape == (4, 32, 32)
    assert all(np.mean(y == 1) >= 0.02 for y in Y)


def test_overfit_runs_and_reports():
    cfg = E.OverfitConfig(n_patches=4, patch=32, scene_size=128, width_scale=0.125, max_epochs=2)
    res = E.overfit("unet", cfg)
    assert res.arch == "unet" and res.epochs == 2
    assert 0.0 <= res.f1 <= 1.0 and res.reached == (res.f1 >= cfg.target_f1)


def test_overfit_stops_at_target():
    cfg = E.OverfitConfig(n_patches=4, patch=32, scene_size=128, width_scale=0.125, max_epochs=5, target_f1=0.0)
    res = E.overfit("unet", cfg)
    assert res.epochs == 1 and res.reached


def test_prepare_scene_isolates_test_tiles():
    scene = E.prepare_scene(TINY, seed=0)
    assert len(scene.test_tiles) == 1 and len(scene.train_tiles) == 3
    assert len(scene.train_patches) <= TINY.train_patches
    assert {p.tile for p in scene.train_patches + scene.val_patches} <= set(scene.train_tiles)
    assert all(p.aug == 0 for p in scene.val_patches)


def test_temporal_benchmark_and_summary():
    seen = []
    res = E.temporal_benchmark(["unet"], TINY, on_result=seen.append)
    assert [(r.mode, r.seed) for r in res] == [("bitemporal", 0), ("multitemporal", 0)]
    assert seen == res
    assert sum(res[0].counts.values()) == sum(res[1].counts.values()) > 0  # same test pixels in both modes
    s = E.summarize(res)
    assert s["unet"]["gain"] == pytest.approx(res[1].f1 - res[0].f1)
    md = E.summary_markdown(s)
    assert md.startswith("| architecture") and "| unet |" in md
