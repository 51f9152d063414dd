"""Classification and segmentation metrics, plus split-level evaluation."""
from __future__ import annotations

import json
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.stats import rankdata

from .core import ShapeError


@dataclass
class ClassMetrics:
    precision: float
    recall: float
    f1: float
    auc: float


@dataclass
class MetricsReport:
    accuracy: float
    precision_macro: float
    recall_macro: float
    f1_macro: float
    auc_macro: float
    iou: float
    dice: float
    pixel_accuracy: float
    per_class: list[ClassMetrics] = field(default_factory=list)
    n_samples: int = 0

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def confusion(preds, labels, k: int) -> np.ndarray:
    """``M[i, j]`` counts samples with true label ``i`` predicted as ``j``."""
    preds = np.asarray(preds, dtype=np.int64).ravel()
    labels = np.asarray(labels, dtype=np.int64).ravel()
    m = np.zeros((k, k), dtype=np.int64)
    np.add.at(m, (labels, preds), 1)
    return m


def _ratio(num, den):
    return float(num) / float(den) if den else 0.0


def auc_one_vs_rest(scores, positive) -> float:
    """Mann-Whitney AUC: P(positive outranks negative), ties count 1/2.

    Undefined when either side is empty; 0.5 is returned in that case.
    """
    scores = np.asarray(scores, dtype=np.float64)
    positive = np.asarray(positive, dtype=bool)
    n_pos = int(positive.sum())
    n_neg = positive.size - n_pos
    if n_pos == 0 or n_neg == 0:
        return 0.5
    ranks = rankdata(scores)
    u = ranks[positive].sum() - n_pos * (n_pos + 1) / 2.0
    return float(u / (n_pos * n_neg))


def classification_metrics(conf: np.ndarray, scores, labels) -> dict:
    k = conf.shape[0]
    n = conf.sum()
    per_class = []
    for c in range(k):
        tp = conf[c, c]
        precision = _ratio(tp, conf[:, c].sum())
        recall = _ratio(tp, conf[c, :].sum())
        f1 = _ratio(2 * precision * recall, precision + recall)
        if scores is None or len(labels) == 0:
            auc = 0.5
        else:
            auc = auc_one_vs_rest(np.asarray(scores)[:, c], np.asarray(labels) == c)
        per_class.append(ClassMetrics(precision, recall, f1, auc))
    return {
        "accuracy": _ratio(np.trace(conf), n),
        "precision_macro": float(np.mean([m.precision for m in per_class])),
        "recall_macro": float(np.mean([m.recall for m in per_class])),
        "f1_macro": float(np.mean([m.f1 for m in per_class])),
        "auc_macro": float(np.mean([m.auc for m in per_class])),
        "per_class": per_class,
    }


def segmentation_metrics(pred, gt) -> tuple[float, float, float]:
    """(IoU, Dice, pixel accuracy) of two binary masks; empty vs empty scores 1."""
    pred = np.asarray(pred) > 0
    gt = np.asarray(gt) > 0
    if pred.shape != gt.shape:
        raise ShapeError(f"prediction {pred.shape} vs ground truth {gt.shape}")
    inter = np.logical_and(pred, gt).sum()
    union = np.logical_or(pred, gt).sum()
    total = pred.sum() + gt.sum()
    iou = 1.0 if union == 0 else inter / union
    dice = 1.0 if total == 0 else 2 * inter / total
    return float(iou), float(dice), float((pred == gt).mean())


def build_report(preds, labels, scores, seg_pairs, k: int) -> MetricsReport:
    """Aggregate per-sample predictions; segmentation scores are per-image means."""
    conf = confusion(preds, labels, k)
    cls = classification_metrics(conf, scores, labels)
    seg = np.array([segmentation_metrics(p, g) for p, g in seg_pairs]) if seg_pairs else np.zeros((0, 3))
    iou, dice, pa = seg.mean(axis=0) if len(seg) else (0.0, 0.0, 0.0)
    return MetricsReport(n_samples=len(labels), iou=float(iou), dice=float(dice),
                         pixel_accuracy=float(pa), **cls)


def evaluate(model, manifest, cfg, threshold: float | None = None, ablation: str | None = None,
             batch_size: int | None = None) -> MetricsReport:
    """Run the model over every sample of ``manifest`` without augmentation."""
    from .train import predict

    threshold = cfg.seg_threshold if threshold is None else threshold
    ablation = ablation or getattr(model, "ablation", "full")
    preds, labels, scores, pairs = [], [], [], []
    for samples, out in predict(model, manifest, cfg, ablation, batch_size or cfg.batch_size):
        probs = out["probs"]
        seg = out["seg_prob"] >= threshold
        for i, s in enumerate(samples):
            preds.append(int(probs[i].argmax()))
            labels.append(s.label)
            scores.append(probs[i])
            pairs.append((seg[i], s.mask))
    return build_report(preds, labels, np.array(scores), pairs, cfg.num_classes)
