import json

import numpy as np
import pytest
import torch
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import auc_ref, classification_ref, confusion_ref, segmentation_ref
from sgcldff.core import ShapeError
from sgcldff.data import load_dataset
from sgcldff.metrics import (auc_one_vs_rest, build_report, classification_metrics, confusion,
                             evaluate, segmentation_metrics)
from sgcldff.model import build_model


def test_confusion_examples():
    assert confusion([0, 1, 2], [0, 1, 2], 3).tolist() == [[1, 0, 0], [0, 1, 0], [0, 0, 1]]
    assert confusion([1, 1], [0, 0], 2).tolist() == [[0, 2], [0, 0]]
    assert confusion([], [], 3).sum() == 0


def test_auc_pairwise_example():
    scores = [0.9, 0.3, 0.8, 0.2]
    assert auc_one_vs_rest(scores, [True, True, False, False]) == 0.75


def test_auc_undefined_is_half():
    assert auc_one_vs_rest([0.1, 0.2], [True, True]) == 0.5


def test_binary_half_accuracy():
    preds, labels = [0, 0, 1, 1], [0, 1, 0, 1]
    m = classification_metrics(confusion(preds, labels, 2), None, labels)
    assert m["accuracy"] == 0.5 and m["f1_macro"] == 0.5
    assert all(c.precision == c.recall == c.f1 == 0.5 for c in m["per_class"])


def test_perfect_classification():
    labels = [0, 1, 2, 3, 0]
    scores = np.eye(4)[labels]
    m = classification_metrics(confusion(labels, labels, 4), scores, labels)
    for key in ("accuracy", "precision_macro", "recall_macro", "f1_macro", "auc_macro"):
        assert m[key] == 1.0


def test_segmentation_examples():
    sq = np.zeros((4, 4), bool)
    sq[:2, :2] = True
    strip = np.zeros((4, 4), bool)
    strip[1, 1:3] = True
    iou, dice, _ = segmentation_metrics(sq, strip)
    assert iou == pytest.approx(0.2) and dice == pytest.approx(1 / 3)
    assert segmentation_metrics(sq, sq) == (1.0, 1.0, 1.0)
    empty = np.zeros((3, 3), bool)
    assert segmentation_metrics(empty, empty) == (1.0, 1.0, 1.0)
    with pytest.raises(ShapeError):
        segmentation_metrics(empty, sq)


instances = st.integers(1, 4).flatmap(lambda k: st.tuples(
    st.just(k),
    st.lists(st.tuples(st.integers(0, k - 1), st.integers(0, k - 1),
                       st.lists(st.sampled_from([0.0, 0.25, 0.5, 0.75, 1.0]), min_size=k, max_size=k)),
             min_size=0, max_size=12)))


@settings(max_examples=200, deadline=None)
@given(instances)
def test_classification_matches_oracle(inst):
    k, rows = inst
    preds = [r[0] for r in rows]
    labels = [r[1] for r in rows]
    scores = [r[2] for r in rows]
    conf = confusion(preds, labels, k)
    assert conf.tolist() == confusion_ref(preds, labels, k)
    m = classification_metrics(conf, np.array(scores).reshape(len(rows), k), labels)
    ref = classification_ref(preds, labels, scores, k)
    assert m["accuracy"] == ref["accuracy"]
    for c, cm in enumerate(m["per_class"]):
        assert cm.precision == ref["precision"][c]
        assert cm.recall == ref["recall"][c]
        assert cm.f1 == pytest.approx(ref["f1"][c], abs=1e-12)
        assert cm.auc == pytest.approx(ref["auc"][c], abs=1e-12)


masks = st.tuples(st.integers(1, 8), st.integers(1, 8)).flatmap(
    lambda hw: st.tuples(*[st.lists(st.lists(st.booleans(), min_size=hw[1], max_size=hw[1]),
                                    min_size=hw[0], max_size=hw[0])] * 2))


@settings(max_examples=200, deadline=None)
@given(masks)
def test_segmentation_matches_oracle(pair):
    pred, gt = pair
    got = segmentation_metrics(np.array(pred), np.array(gt))
    ref = segmentation_ref(pred, gt)
    assert got == pytest.approx(ref, abs=1e-12)
    assert got[1] >= got[0]


@settings(max_examples=100, deadline=None)
@given(st.lists(st.integers(-20, 20), min_size=2, max_size=12), st.data())
def test_auc_invariant_to_monotone_transform(ticks, data):
    scores = [t / 4 for t in ticks]
    positive = data.draw(st.lists(st.booleans(), min_size=len(ticks), max_size=len(ticks)))
    a = auc_one_vs_rest(scores, positive)
    b = auc_one_vs_rest(np.exp(np.array(scores)) * 3 + 1, positive)
    assert a == pytest.approx(b, abs=1e-12)
    assert a == pytest.approx(auc_ref(scores, positive), abs=1e-12)


def test_relabeling_permutes_per_class(rng):
    k, n = 4, 12
    labels = rng.integers(0, k, n)
    preds = rng.integers(0, k, n)
    scores = rng.random((n, k))
    perm = rng.permutation(k)
    a = classification_metrics(confusion(preds, labels, k), scores, labels)
    b = classification_metrics(confusion(perm[preds], perm[labels], k),
                               scores[:, np.argsort(perm)], perm[labels])
    assert a["f1_macro"] == pytest.approx(b["f1_macro"], abs=1e-12)
    assert a["auc_macro"] == pytest.approx(b["auc_macro"], abs=1e-12)
    for c in range(k):
        assert a["per_class"][c].f1 == pytest.approx(b["per_class"][perm[c]].f1, abs=1e-12)


def test_report_invariants(rng):
    labels = rng.integers(0, 4, 10).tolist()
    preds = rng.integers(0, 4, 10).tolist()
    scores = rng.random((10, 4))
    pairs = [(rng.random((5, 5)) > 0.5, rng.random((5, 5)) > 0.5) for _ in range(10)]
    rep = build_report(preds, labels, scores, pairs, 4)
    d = rep.to_dict()
    for key in ("accuracy", "precision_macro", "recall_macro", "f1_macro", "auc_macro", "iou",
                "dice", "pixel_accuracy"):
        assert 0.0 <= d[key] <= 1.0
    assert rep.f1_macro == pytest.approx(np.mean([c.f1 for c in rep.per_class]), abs=1e-9)
    assert rep.iou == pytest.approx(np.mean([segmentation_metrics(p, g)[0] for p, g in pairs]))
    assert json.loads(rep.to_json())["n_samples"] == 10


def test_evaluate_deterministic(small_cfg, synth_root):
    torch.manual_seed(0)
    model = build_model(small_cfg, seed=0)
    manifest = load_dataset(synth_root, "val", small_cfg.class_names)
    assert evaluate(model, manifest, small_cfg) == evaluate(model, manifest, small_cfg)
