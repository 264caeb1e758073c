import math

import numpy as np
import pytest

from pairrank.data import AugmentRanges, generate_starmen, split_subjects
from pairrank.evaluation import evaluate
from pairrank.model import BackboneConfig, init_weights, parameter_vector
from pairrank.training import (
    TrainConfig,
    TrainingDiverged,
    data_size_sweep,
    grid_search_lr,
    loss_gradcheck,
    subsample_train,
    train,
    validation_loss,
)

LITE32 = BackboneConfig.preset("lite", input_size=32)


def fresh():
    return init_weights(LITE32, seed=0)


def test_config_validation():
    with pytest.raises(ValueError):
        TrainConfig(batch_size=0)
    with pytest.raises(ValueError):
        TrainConfig(patience=0)
    with pytest.raises(ValueError):
        TrainConfig(task="ranking")
    cfg = TrainConfig(augment={"rotation": 5.0, "translation": 2.0, "brightness": [0.9, 1.1], "contrast": [1, 1]})
    assert isinstance(cfg.augment, AugmentRanges) and cfg.augment.brightness == (0.9, 1.1)


def test_zero_epochs_returns_input(small_starmen):
    m = fresh()
    out, hist = train(m, small_starmen, TrainConfig(max_epochs=0))
    assert out.same_as(m) and hist.val_loss == [] and hist.stopping_epoch == 0


def test_untrained_ablation(small_starmen):
    m = fresh()
    out, hist = train(m, small_starmen, TrainConfig(ablation="untrained", max_epochs=5))
    assert out.same_as(m) and hist.train_loss == []


def test_initial_self_supervised_loss_near_ln2(small_starmen):
    loss = validation_loss(fresh(), small_starmen, "self_supervised")
    assert math.log(2) - 1e-12 <= loss < math.log(2) + 0.05


def test_training_is_deterministic_and_restores_best(small_starmen):
    cfg = TrainConfig(task="self_supervised", lr=1e-2, max_epochs=6, patience=2, seed=3)
    m1, h1 = train(fresh(), small_starmen, cfg)
    m2, h2 = train(fresh(), small_starmen, cfg)
    assert h1.train_loss == h2.train_loss and h1.val_loss == h2.val_loss
    assert m1.same_as(m2)
    assert len(h1.val_loss) == h1.stopping_epoch
    assert h1.val_loss[h1.best_epoch - 1] == min(h1.val_loss)
    if h1.stopping_epoch < cfg.max_epochs:
        assert h1.stopping_epoch - h1.best_epoch == cfg.patience
    assert validation_loss(m1, small_starmen, "self_supervised") == min(h1.val_loss)


def test_input_model_not_modified(small_starmen):
    m = fresh()
    before = parameter_vector(m)
    train(m, small_starmen, TrainConfig(max_epochs=1))
    assert np.array_equal(before, parameter_vector(m))


def test_frozen_backbone_only_moves_w(small_starmen):
    m = fresh()
    out, hist = train(m, small_starmen, TrainConfig(ablation="frozen_backbone", max_epochs=3, lr=1e-2))
    names = m.backbone_names()
    assert np.array_equal(parameter_vector(m, names), parameter_vector(out, names))
    assert all(np.array_equal(m.buffers[k], out.buffers[k]) for k in m.buffers)
    assert not np.array_equal(m.params["rank.w"].data, out.params["rank.w"].data)


def test_supervised_and_csr_tasks_run(small_tumor):
    m = init_weights(LITE32, seed=1)
    for task in ("supervised", "csr"):
        _, hist = train(m, small_tumor, TrainConfig(task=task, max_epochs=2, lr=1e-3))
        assert len(hist.val_loss) == 2 and all(np.isfinite(hist.val_loss))


def test_augmented_training_runs(small_starmen):
    _, hist = train(fresh(), small_starmen, TrainConfig(max_epochs=1, augment=AugmentRanges(), pairs_per_subject=2))
    assert len(hist.train_loss) == 1


def test_empty_split_errors(small_starmen):
    no_val = small_starmen.with_split({k: "train" for k in small_starmen.split})
    with pytest.raises(ValueError, match="val"):
        train(fresh(), no_val, TrainConfig(max_epochs=1))
    with pytest.raises(ValueError, match="CSR"):
        train(init_weights(LITE32, csr_head=False), small_starmen, TrainConfig(task="csr", max_epochs=1))


def test_divergence_aborts(small_starmen):
    with pytest.raises(TrainingDiverged) as info:
        train(fresh(), small_starmen, TrainConfig(lr=1e4, max_epochs=3, divergence_threshold=10.0))
    assert info.value.history.status == "diverged"


def test_grid_single_and_with_divergence(tmp_path, small_starmen):
    cfg = TrainConfig(max_epochs=1, divergence_threshold=10.0)
    res = grid_search_lr(fresh, small_starmen, cfg, grid=[1e-3])
    assert res.best_lr == 1e-3
    res = grid_search_lr(fresh, small_starmen, cfg, grid=[1e4, 1e-3])
    assert res.results[1e4]["status"] == "diverged" and res.best_lr == 1e-3
    res.write_json(tmp_path / "grid.json")
    assert "diverged" in (tmp_path / "grid.json").read_text()
    with pytest.raises(RuntimeError, match="diverged"):
        grid_search_lr(fresh, small_starmen, cfg, grid=[1e4])
    with pytest.raises(ValueError):
        grid_search_lr(fresh, small_starmen, cfg, grid=[])


def test_grid_tie_prefers_smaller_lr(small_starmen):
    cfg = TrainConfig(max_epochs=1, ablation="frozen_backbone")
    res = grid_search_lr(fresh, small_starmen, cfg, grid=[1e-30, 1e-31])  # both leave the loss unchanged
    assert res.results[1e-30]["best_val_loss"] == res.results[1e-31]["best_val_loss"]
    assert res.best_lr == 1e-31


def test_history_csv(tmp_path, small_starmen):
    _, hist = train(fresh(), small_starmen, TrainConfig(max_epochs=2))
    hist.write_csv(tmp_path / "h.csv")
    lines = (tmp_path / "h.csv").read_text().splitlines()
    assert lines[0] == "epoch,train_loss,val_loss" and len(lines) == 3


def test_subsample_is_nested_and_keeps_eval_splits():
    ds = split_subjects(generate_starmen(20, 2, 32, seed=0), seed=0)
    half, quarter = subsample_train(ds, 0.5), subsample_train(ds, 0.25)
    assert set(quarter.subject_indices("train")) <= set(half.subject_indices("train"))
    assert len(half.subject_indices("train")) == 6
    for split in ("val", "test"):
        assert list(half.subject_indices(split)) == list(ds.subject_indices(split))
    with pytest.raises(ValueError):
        subsample_train(ds, 0.0)


def test_data_size_sweep(small_starmen, caplog):
    cfg = TrainConfig(max_epochs=1, lr=1e-3)
    reports = data_size_sweep(small_starmen, [0.01, 1.0], cfg, fresh)
    assert list(reports) == [1.0]
    assert "skipped" in caplog.text
    model, _ = train(fresh(), small_starmen, cfg)
    assert reports[1.0].pearson_r == evaluate(model, small_starmen).pearson_r


@pytest.mark.parametrize("task", ["self_supervised", "supervised", "csr"])
def test_full_loss_gradcheck(task):
    rep = loss_gradcheck(task)
    assert rep.passed and rep.max_rel_err < 1e-4 and rep.n_checked > 900


def test_csr_intercept_starts_at_target_mean(small_tumor):
    out, _ = train(init_weights(LITE32, seed=1), small_tumor, TrainConfig(task="csr", max_epochs=1, lr=1e-9))
    mean = small_tumor.targets(small_tumor.indices("train")).mean()
    assert abs(out.params["csr.b"].data[0] - mean) < 1e-6
