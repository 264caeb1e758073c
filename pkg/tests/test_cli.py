import csv
import hashlib
import json
import subprocess
import sys

import numpy as np
import pytest

from pairrank.cli import ExperimentConfig, main
from pairrank.model import BackboneConfig, init_weights, load_checkpoint


def sha(path):
    return hashlib.sha256(path.read_bytes()).hexdigest()


@pytest.fixture(scope="module")
def data_dir(tmp_path_factory):
    out = tmp_path_factory.mktemp("cli") / "d1"
    assert main(["generate", "--dataset", "tumor", "--subjects", "6", "--image-size", "32", "--seed", "7",
                 "--out", str(out)]) == 0
    return out


def test_generate_counts_and_reproducible(tmp_path):
    args = ["generate", "--dataset", "starmen", "--subjects", "4", "--timepoints", "3", "--image-size", "32",
            "--seed", "7"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    rows = list(csv.reader(open(tmp_path / "a" / "manifest.csv")))
    assert len(rows) == 1 + 4 * 3
    assert len(list((tmp_path / "a" / "images").iterdir())) == 12
    for name in ("manifest.csv", "dataset.json"):  # config.json differs only in its "out" field
        assert sha(tmp_path / "a" / name) == sha(tmp_path / "b" / name)
    assert sha(tmp_path / "a" / "images" / "starman0_t002.png") == sha(tmp_path / "b" / "images" / "starman0_t002.png")


def test_generate_refuses_non_empty_dir(tmp_path, data_dir):
    assert main(["generate", "--dataset", "tumor", "--subjects", "3", "--out", str(data_dir)]) == 2


def test_usage_errors_exit_1(tmp_path):
    assert main(["generate", "--dataset", "galaxy", "--out", str(tmp_path / "x")]) == 1
    assert main(["train", "--no-such-flag"]) == 1
    assert main([]) == 1
    assert main(["train", "--lr", "fast", "--data", str(tmp_path)]) == 1


def test_missing_artifacts_exit_2(tmp_path, data_dir, capsys):
    assert main(["eval", "--checkpoint", str(tmp_path / "none.ckpt"), "--data", str(data_dir),
                 "--out", str(tmp_path / "e")]) == 2
    assert "none.ckpt" in capsys.readouterr().err
    assert main(["train", "--data", str(tmp_path / "nodata"), "--out", str(tmp_path / "t")]) == 2


def test_train_one_epoch_history(tmp_path, data_dir):
    out = tmp_path / "t1"
    assert main(["train", "--data", str(data_dir), "--task", "supervised", "--max-epochs", "1",
                 "--out", str(out)]) == 0
    lines = (out / "history.csv").read_text().splitlines()
    assert len(lines) == 2
    cfg = ExperimentConfig.load(out / "config.json")
    assert cfg.train.task == "supervised" and cfg.train.max_epochs == 1
    assert load_checkpoint(out / "model.ckpt").meta["task"] == "supervised"


def test_untrained_checkpoint_equals_init(tmp_path, data_dir):
    out = tmp_path / "u"
    assert main(["train", "--data", str(data_dir), "--ablation", "untrained", "--seed", "4",
                 "--out", str(out)]) == 0
    fresh = init_weights(BackboneConfig.preset("lite", input_size=32), seed=4)
    assert load_checkpoint(out / "model.ckpt").same_as(fresh)


def test_grid_lists_five_lrs(tmp_path, data_dir):
    out = tmp_path / "g"
    assert main(["train", "--task", "self-supervised", "--data", str(data_dir), "--lr", "grid",
                 "--max-epochs", "1", "--out", str(out)]) == 0
    grid = json.loads((out / "grid.json").read_text())
    assert [r["lr"] for r in grid["runs"]] == [1e-1, 1e-2, 1e-3, 1e-4, 1e-5]
    assert grid["best_lr"] in [r["lr"] for r in grid["runs"]]


def test_eval_and_cam(tmp_path, data_dir, capsys):
    ck = tmp_path / "u"
    main(["train", "--data", str(data_dir), "--ablation", "untrained", "--out", str(ck)])
    ev = tmp_path / "e"
    assert main(["eval", "--checkpoint", str(ck / "model.ckpt"), "--data", str(data_dir), "--dice",
                 "--robustness", "--out", str(ev)]) == 0
    assert "pearson_r" in capsys.readouterr().out
    for name in ("report.json", "pairs.csv", "dice.csv", "robustness.csv", "config.json"):
        assert (ev / name).is_file()
    assert len(json.loads((ev / "report.json").read_text())["dice_curve"]) == 7

    cam = tmp_path / "c"
    assert main(["cam", "--checkpoint", str(ck / "model.ckpt"), "--data", str(data_dir), "--pair", "tumor0:1:1",
                 "--pair", "tumor0:0:2", "--out", str(cam)]) == 0
    from PIL import Image

    dup = np.asarray(Image.open(cam / "tumor0_1_1.png")).astype(int)
    assert np.all(dup[..., 0] == dup[..., 1]) and np.all(dup[..., 1] == dup[..., 2])  # zero map: no colour
    assert (cam / "tumor0_0_2.png").is_file()
    assert main(["cam", "--checkpoint", str(ck / "model.ckpt"), "--data", str(data_dir), "--pair", "tumor0:1:9",
                 "--out", str(tmp_path / "c2")]) == 2


def test_config_file_with_flag_override(tmp_path, data_dir):
    cfg = ExperimentConfig()
    cfg.train.max_epochs = 3
    cfg.train.task = "supervised"
    cfg.save(tmp_path / "exp.json")
    out = tmp_path / "o"
    assert main(["train", "--config", str(tmp_path / "exp.json"), "--max-epochs", "1", "--data", str(data_dir),
                 "--out", str(out)]) == 0
    resolved = ExperimentConfig.load(out / "config.json")
    assert resolved.train.max_epochs == 1 and resolved.train.task == "supervised"


def test_config_round_trip(tmp_path):
    cfg = ExperimentConfig()
    cfg.train.augment = None
    cfg.dataset.split = (0.5, 0.25, 0.25)
    cfg.evaluation.dice = True
    cfg.save(tmp_path / "c.json")
    assert ExperimentConfig.load(tmp_path / "c.json") == cfg
    from pairrank.data import AugmentRanges

    cfg.train.augment = AugmentRanges()
    assert ExperimentConfig.from_dict(cfg.to_dict()) == cfg
    with pytest.raises(ValueError):
        ExperimentConfig.from_dict({"bogus": 1})


def test_gradcheck_command(capsys):
    assert main(["gradcheck"]) == 0
    out = capsys.readouterr().out
    assert "pairnet_loss[self_supervised]" in out and "FAIL" not in out


def test_console_script_exit_code(tmp_path):
    proc = subprocess.run([sys.executable, "-m", "pairrank.cli", "generate", "--dataset", "nope", "--out",
                           str(tmp_path / "z")], capture_output=True, text=True)
    assert proc.returncode == 1 and "unknown dataset" in proc.stderr


def test_repro_quick_layout(tmp_path):
    assert main(["repro", "--scenario", "all", "--quick", "--out", str(tmp_path / "r")]) == 0
    summary = json.loads((tmp_path / "r" / "summary.json").read_text())
    assert set(summary) == {"starmen", "tumor"}
    assert set(summary["tumor"]) == {"pairnet", "csr", "frozen", "untrained"}
    assert len(summary["tumor"]["pairnet"]["dice_curve"]) == 7
    assert len(summary["tumor"]["csr"]["robustness"]) == 11
    assert (tmp_path / "r" / "starmen" / "pairnet" / "grid.json").is_file()
    assert any((tmp_path / "r" / "tumor" / "pairnet" / "cam").glob("*.png"))
    assert main(["repro", "--scenario", "nope", "--out", str(tmp_path / "x")]) == 1
