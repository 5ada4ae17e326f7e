import json

import numpy as np
import pytest

from rrcnn import data as D
from rrcnn import metrics as M
from rrcnn.cli import RunConfig, main
from rrcnn.config import ConfigError


@pytest.fixture(scope="module")
def scene(tmp_path_factory):
    root = tmp_path_factory.mktemp("scene")
    assert main(["synth", "--height", "128", "--width", "128", "--seed", "3", "--out", str(root)]) == 0
    return root


TRAIN = ["--arch", "unet", "--width-scale", "0.125", "--tile-h", "32", "--tile-w", "32", "--patch", "32",
         "--max-epochs", "2", "--batch-size", "8", "--max-train-patches", "16", "--fold", "0", "--deterministic"]


def run_train(scene, out, extra=()):
    return main(["train", "--stack", str(scene / "scene.sarc"), "--labels", str(scene / "labels.sarl"),
                 "--out", str(out), *TRAIN, *extra])


def test_synth_outputs(scene):
    stack = D.ingest(scene / "scene.sarc")
    assert stack.data.shape == (14, 128, 128)
    prov = json.loads((scene / "provenance.json").read_text())
    assert prov["config"]["seed"] == 3
    assert (scene / "manifest.json").exists()


def test_end_to_end(scene, tmp_path, capsys):
    assert run_train(scene, tmp_path / "run") == 0
    hist = (tmp_path / "run" / "fold_0" / "history.csv").read_text().splitlines()
    assert hist[0] == "epoch,train_loss,val_loss,seconds" and hist[1].endswith(",NA")
    assert main(["predict", "--stack", str(scene / "scene.sarc"), "--model", str(tmp_path / "run"),
                 "--out", str(tmp_path / "pred")]) == 0
    pred = D.ingest_labels(tmp_path / "pred" / "prediction.sarl")
    assert set(np.unique(pred)) <= {0, 1, M.NO_PRED}
    assert np.count_nonzero(pred != M.NO_PRED) > 0  # fold-0 test tiles
    assert list((tmp_path / "pred" / "tiles").glob("tile_r*_c*.sarc"))
    assert main(["evaluate", "--predictions", str(tmp_path / "pred" / "prediction.sarl"),
                 "--labels", str(scene / "labels.sarl"), "--out", str(tmp_path / "ev")]) == 0
    out = capsys.readouterr().out
    assert "F1" in out
    rgb = M.read_png(tmp_path / "ev" / "change_map.png")
    colours = {tuple(c) for c in rgb.reshape(-1, 3)}
    assert colours <= set(M.LEGEND.values())
    assert (tmp_path / "ev" / "confusion.csv").read_text().startswith("tp,tn,fp,fn")
    assert main(["render", "--predictions", str(tmp_path / "pred" / "prediction.sarl"),
                 "--labels", str(scene / "labels.sarl"), "--png", str(tmp_path / "again.png")]) == 0
    assert np.array_equal(M.read_png(tmp_path / "again.png"), rgb)


def test_deterministic_training_is_byte_identical(scene, tmp_path):
    for k in range(2):
        assert run_train(scene, tmp_path / f"r{k}") == 0
    for name in ("fold_0/history.csv", "fold_0/model.rrcw", "manifest.json"):
        a = (tmp_path / "r0" / name).read_bytes()
        b = (tmp_path / "r1" / name).read_bytes()
        if name == "manifest.json":
            a, b = a.replace(b"/r0", b""), b.replace(b"/r1", b"")
        assert a == b, name


def test_flags_override_config_file(scene, tmp_path):
    cfg = tmp_path / "run.cfg"
    cfg.write_text(f"stack = {scene / 'scene.sarc'}\nlabels = {scene / 'labels.sarl'}\nmax_epochs = 5\nlr = 0.5\n")
    assert main(["train", "--config", str(cfg), "--out", str(tmp_path / "o"), *TRAIN]) == 0
    manifest = json.loads((tmp_path / "o" / "manifest.json").read_text())
    assert manifest["settings"]["max_epochs"] == 2   # flag wins
    assert manifest["settings"]["lr"] == 0.5         # file value kept
    assert manifest["inputs"]                         # input checksums recorded


def test_exit_codes(scene, tmp_path, capsys):
    assert main(["no-such-command"]) == 1
    assert main(["train", "--stack", str(tmp_path / "missing.sarc"), "--labels", "x"]) == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert err[-1].startswith("error[1]: config:")
    bad = tmp_path / "bad.sarc"
    bad.write_bytes(b"JUNK" + bytes(40))
    assert main(["train", "--stack", str(bad), "--labels", str(scene / "labels.sarl"), *TRAIN]) == 2
    assert capsys.readouterr().err.strip().startswith("error[2]: data:")
    assert run_train(scene, tmp_path / "x", ["--fold", "9"]) == 1
    cfg = tmp_path / "c.cfg"
    cfg.write_text("bogus_key = 1\n")
    assert main(["train", "--config", str(cfg)]) == 1


@pytest.mark.filterwarnings("ignore::RuntimeWarning")
def test_numerical_failure_exit_code(scene, tmp_path, capsys):
    assert run_train(scene, tmp_path / "nan", ["--lr", "1e30"]) == 3
    line = capsys.readouterr().err.strip()
    assert line.startswith("error[3]: numerical:") and "\n" not in line


def test_params_command(capsys, tmp_path):
    assert main(["params", "--reconciliation", str(tmp_path / "rec.md")]) == 0
    out = capsys.readouterr().out
    assert "868,483" in out and "| unet |" in out and "2,880" in out
    assert "6,400" in out
    assert (tmp_path / "rec.md").read_text().startswith("#")


def test_gradcheck_command(capsys):
    assert main(["gradcheck", "--arch", "unet", "--channels", "4", "--width-scale", "0.125", "--coords", "3"]) == 0
    assert "PASS" in capsys.readouterr().out


def test_run_config_validation():
    with pytest.raises(ConfigError):
        RunConfig(arch="segnet").validate()
    with pytest.raises(ConfigError):
        RunConfig(fold="6").validate()
    assert RunConfig(fold="all").fold_indices() == [0, 1, 2, 3, 4, 5]
