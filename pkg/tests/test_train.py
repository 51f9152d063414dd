import csv
import math
from types import SimpleNamespace

import numpy as np
import pytest
import torch

import sgcldff.metrics as metrics_mod
from sgcldff.core import TrainError, load_checkpoint
from sgcldff.data import load_dataset
from sgcldff.train import (ABLATION_LABELS, LOG_COLUMNS, EarlyStopping, adam_step, clip_grad_norm,
                           lr_at, train)


def test_lr_schedule(small_cfg):
    cfg = small_cfg.replace(base_lr=1e-4)
    assert lr_at(0, cfg) == 1e-4
    assert [lr_at(e, cfg) for e in (29, 30, 60)] == pytest.approx([1e-4, 1e-5, 1e-6], rel=1e-12)
    flat = cfg.replace(lr_decay_factor=1.0)
    assert {lr_at(e, flat) for e in range(0, 200, 7)} == {1e-4}
    with pytest.raises(ValueError):
        lr_at(-1, cfg)


def test_adam_single_step():
    w = {"w": torch.zeros(1, dtype=torch.float64)}
    moments = {}
    adam_step(w, {"w": torch.ones(1, dtype=torch.float64)}, moments, lr=1e-3, t=1)
    assert w["w"].item() == pytest.approx(-1e-3 / (1 + 1e-8), rel=1e-12)
    m, v = moments["w"]
    assert m.item() == pytest.approx(0.1) and v.item() == pytest.approx(0.001)


def test_adam_zero_gradient_decays_moments():
    w = {"w": torch.tensor([1.0, 2.0], dtype=torch.float64)}
    moments = {"w": (torch.tensor([0.5, 0.5], dtype=torch.float64),
                     torch.tensor([0.2, 0.2], dtype=torch.float64))}
    adam_step(w, {"w": torch.zeros(2, dtype=torch.float64)}, moments, lr=0.0, t=3)
    assert w["w"].tolist() == [1.0, 2.0]
    assert moments["w"][0].tolist() == pytest.approx([0.45, 0.45])
    assert moments["w"][1].tolist() == pytest.approx([0.2 * 0.999] * 2)


def test_adam_rejects_non_finite():
    w = {"layer.weight": torch.zeros(2)}
    with pytest.raises(TrainError, match="layer.weight"):
        adam_step(w, {"layer.weight": torch.tensor([1.0, math.nan])}, {}, 1e-3, 1)


def test_clip_grad_norm():
    grads = {"a": torch.tensor([3.0]), "b": torch.tensor([4.0])}
    assert clip_grad_norm(grads, 1.0) == pytest.approx(5.0)
    assert math.hypot(grads["a"].item(), grads["b"].item()) == pytest.approx(1.0)


def test_early_stopping_patience():
    stopper = EarlyStopping(patience=3, min_delta=0.01)
    history = [0.5, 0.505, 0.6, 0.6, 0.6, 0.6]
    stops = [stopper.update(v) for v in history]
    assert stops == [False, False, False, False, False, True]
    assert stopper.best == 0.6


def _fake_eval(values):
    it = iter(values)

    def fake(model, samples, cfg, **kw):
        return SimpleNamespace(f1_macro=next(it), iou=0.5)
    return fake


def test_train_stops_after_patience(small_cfg, synth_root, monkeypatch):
    monkeypatch.setattr(metrics_mod, "evaluate", _fake_eval([0.4, 0.3, 0.3, 0.3, 0.3]))
    train_m = load_dataset(synth_root, "train", small_cfg.class_names)
    result = train(small_cfg.replace(patience=1, max_epochs=5), train_m, train_m)
    assert result.epochs_run == 2 and result.best_epoch == 0


def test_max_epochs_bound(small_cfg, synth_root, tmp_path):
    train_m = load_dataset(synth_root, "train", small_cfg.class_names)
    val_m = load_dataset(synth_root, "val", small_cfg.class_names)
    result = train(small_cfg.replace(max_epochs=1, patience=50), train_m, val_m, tmp_path)
    assert result.epochs_run == 1
    with open(tmp_path / "log.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert tuple(rows[0]) == LOG_COLUMNS and len(rows) == 2
    for name in ("best.sgc", "config.resolved.json", "curves.png"):
        assert (tmp_path / name).exists()


def test_checkpoint_is_best_epoch(small_cfg, synth_root, tmp_path, monkeypatch):
    real = metrics_mod.evaluate
    seen = []

    def scripted(model, samples, cfg, **kw):
        rep = real(model, samples, cfg, **kw)
        f1 = [0.2, 0.9, 0.5, 0.1][len(seen)]
        seen.append({k: v.detach().clone() for k, v in model.state_dict().items()})
        return SimpleNamespace(f1_macro=f1, iou=rep.iou)

    monkeypatch.setattr(metrics_mod, "evaluate", scripted)
    train_m = load_dataset(synth_root, "train", small_cfg.class_names)
    val_m = load_dataset(synth_root, "val", small_cfg.class_names)
    result = train(small_cfg.replace(max_epochs=4, patience=10), train_m, val_m, tmp_path)
    assert result.best_epoch == 1 and result.best_val_f1 == 0.9
    weights, _, epoch = load_checkpoint(tmp_path / "best.sgc", small_cfg)
    assert epoch == 1
    for name, value in weights.items():
        np.testing.assert_array_equal(value, seen[1][name].numpy())


def test_val_overlap_rejected(small_cfg, synth_root):
    from sgcldff.core import DataError

    train_m = load_dataset(synth_root, "train", small_cfg.class_names)
    val_m = load_dataset(synth_root, "val", small_cfg.class_names)
    mixed = list(val_m.samples) + list(train_m.samples[:1])
    with pytest.raises(DataError):
        train(small_cfg, train_m, type(val_m)(val_m.root, "val", mixed, val_m.class_names))


def test_training_is_deterministic(small_cfg, synth_root):
    train_m = load_dataset(synth_root, "train", small_cfg.class_names)
    val_m = load_dataset(synth_root, "val", small_cfg.class_names)
    a = train(small_cfg, train_m, val_m)
    b = train(small_cfg, train_m, val_m)
    assert a.log == b.log
    for (k, v), (_, w) in zip(a.model.state_dict().items(), b.model.state_dict().items()):
        assert torch.equal(v, w), k


def test_ablation_labels():
    assert list(ABLATION_LABELS.values()) == [
        "Without saliency preprocessing", "Without cross-layer fusion", "Full SG-CLDFF model"]
