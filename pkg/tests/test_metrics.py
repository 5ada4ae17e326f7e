import numpy as np
import pytest

from rrcnn import metrics as M
from rrcnn.data import make_tiles
from rrcnn.tensor import DimensionError


def test_hand_enumerated_4x4():
    pred = np.zeros((4, 4), int)
    ref = np.zeros((4, 4), int)
    pred[0, 0] = ref[0, 0] = 1   # TP
    pred[1, 1] = ref[1, 1] = 1   # TP
    pred[2, 2] = 1               # FP
    ref[3, 3] = 1                # FN
    c = M.accumulate(pred, ref)
    assert (c.tp, c.fp, c.fn, c.tn) == (2, 1, 1, 12)
    assert c.total == 16


def test_past_deforestation_ignored():
    ref = np.full((3, 3), 2)
    c = M.accumulate(np.ones((3, 3), int), ref)
    assert c.total == 0
    ref[0, 0] = 1
    c = M.accumulate(np.ones((3, 3), int), ref)
    assert c == M.ConfusionCounts(tp=1)


def test_unpredicted_pixels_ignored():
    pred = np.array([[1, M.NO_PRED], [0, M.NO_PRED]])
    ref = np.array([[1, 1], [0, 0]])
    assert M.accumulate(pred, ref) == M.ConfusionCounts(tp=1, tn=1)
    cm = M.ChangeMap.from_labels(pred, ref)
    assert cm.categories[:, 1].tolist() == [M.PAST, M.PAST]


def test_perfect_prediction():
    ref = np.array([[0, 1], [1, 0]])
    c = M.accumulate(ref, ref)
    assert c.fp == c.fn == 0
    assert M.precision(c).value == M.recall(c).value == M.f1(c).value == 1.0


def test_prf_hand_table():
    c = M.ConfusionCounts(tp=2, tn=12, fp=1, fn=1)
    assert M.precision(c).value == 2 / 3
    assert M.recall(c).value == 2 / 3
    assert M.f1(c).value == pytest.approx(2 / 3, abs=1e-15)
    assert not M.f1(c).degenerate


def test_degenerate_convention():
    c = M.ConfusionCounts(tp=0, fp=0, fn=5, tn=3)
    p, r, f = M.precision(c), M.recall(c), M.f1(c)
    assert p.value == 0 and p.degenerate
    assert r.value == 0 and not r.degenerate
    assert f.value == 0 and f.degenerate


def test_counts_partition_and_merge(rng):
    pred = rng.integers(0, 2, (10, 10))
    ref = rng.integers(0, 3, (10, 10))
    whole = M.accumulate(pred, ref)
    assert whole.total == np.count_nonzero(ref != 2)
    parts = M.accumulate(pred[5:], ref[5:], M.accumulate(pred[:5], ref[:5]))
    assert parts == whole


def test_f1_bounded_and_symmetric(rng):
    for _ in range(50):
        tp, fp, fn = rng.integers(1, 100, 3)
        c = M.ConfusionCounts(int(tp), 0, int(fp), int(fn))
        swapped = M.ConfusionCounts(int(tp), 0, int(fn), int(fp))
        p, r, f = M.precision(c).value, M.recall(c).value, M.f1(c).value
        assert f <= max(p, r) + 1e-15
        assert f == pytest.approx(M.f1(swapped).value)


def test_accumulate_shape_mismatch():
    with pytest.raises(DimensionError):
        M.accumulate(np.zeros((2, 2)), np.zeros((2, 3)))


def test_negative_counts_rejected():
    with pytest.raises(ValueError):
        M.ConfusionCounts(tp=-1)


def test_threshold_equals_argmax(rng):
    p1 = rng.random((50, 50))
    probs = np.stack([1 - p1, p1])
    assert np.array_equal(M.threshold(p1), probs.argmax(axis=0))


def test_overlapping_average():
    acc = M.ProbabilityAccumulator(1, 3)
    acc.add(np.array([[[0.6, 0.6]], [[0.4, 0.4]]]), 0, 0)
    acc.add(np.array([[[0.2, 0.2]], [[0.8, 0.8]]]), 0, 1)
    mean = acc.mean()
    assert mean[1, 0, 1] == pytest.approx(0.6)
    assert M.threshold(mean[1]).tolist() == [[0, 1, 1]]


def test_uncovered_tile_rejected():
    acc = M.ProbabilityAccumulator(2, 2)
    acc.add(np.ones((2, 1, 1)), 0, 0)
    with pytest.raises(ValueError, match="covered"):
        acc.mean()


def test_mosaic_placement_and_missing_tile():
    grid = make_tiles(5, 7, tile_h=2, tile_w=3)
    tiles = {(r, c): np.full((2, 3), 10 * r + c + 1) for r in range(2) for c in range(2)}
    full = M.mosaic(tiles, grid)
    assert full.shape == (5, 7)
    assert full[0, 0] == 1 and full[3, 4] == 12
    assert np.all(full[4] == 0) and np.all(full[:, 6] == 0)  # truncated margins
    del tiles[(1, 0)]
    with pytest.raises(KeyError, match="row 1, col 0"):
        M.mosaic(tiles, grid)


def test_single_tile_mosaic_identity(rng):
    grid = make_tiles(4, 4, 4, 4)
    t = rng.integers(0, 2, (4, 4))
    assert np.array_equal(M.mosaic({(0, 0): t}, grid), t)


def test_change_map_colours(tmp_path):
    pred = np.array([[1, 0, 1, 0, 1]])
    ref = np.array([[1, 0, 0, 1, 2]])
    cm = M.ChangeMap.from_labels(pred, ref)
    assert cm.categories.tolist() == [[M.TP, M.TN, M.FP, M.FN, M.PAST]]
    path = M.render(cm, tmp_path / "map.png")
    rgb = M.read_png(path)
    assert rgb[0].tolist() == [[0x9A, 0, 0], [0, 0, 0x9B], [0xFF, 0xC7, 0x02], [0x2A, 0xEB, 0xE4], [0x65, 0x65, 0x65]]
    assert np.array_equal(rgb, cm.rgb())


def test_render_errors(tmp_path):
    with pytest.raises(ValueError, match="empty"):
        M.render(M.ChangeMap(np.zeros((0, 0), np.uint8)), tmp_path / "x.png")
    cm = M.ChangeMap(np.zeros((2, 2), np.uint8))
    with pytest.raises(OSError, match="no_such_dir"):
        M.render(cm, tmp_path / "no_such_dir" / "x.png")


def test_report_files(tmp_path):
    c = M.ConfusionCounts(tp=2, tn=12, fp=1, fn=1)
    rep = M.write_report(c, tmp_path / "m.csv", tmp_path / "m.txt")
    lines = (tmp_path / "m.csv").read_text().splitlines()
    assert lines[0] == "tp,tn,fp,fn,precision,recall,f1,degenerate"
    assert lines[1].startswith("2,12,1,1,0.666")
    assert "F1        0.6667" in (tmp_path / "m.txt").read_text()
    assert rep["f1"] == pytest.approx(2 / 3)
