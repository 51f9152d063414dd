"""Brute-force reference implementations: pairwise loops and set operations."""
from itertools import product


def confusion_ref(preds, labels, k):
    return [[sum(1 for p, y in zip(preds, labels) if y == i and p == j) for j in range(k)]
            for i in range(k)]


def auc_ref(scores, positive):
    pos = [s for s, f in zip(scores, positive) if f]
    neg = [s for s, f in zip(scores, positive) if not f]
    if not pos or not neg:
        return 0.5
    wins = 0.0
    for a, b in product(pos, neg):
        wins += 1.0 if a > b else 0.5 if a == b else 0.0
    return wins / (len(pos) * len(neg))


def classification_ref(preds, labels, scores, k):
    n = len(labels)
    out = {"accuracy": sum(p == y for p, y in zip(preds, labels)) / n if n else 0.0}
    ps, rs, fs, aucs = [], [], [], []
    for c in range(k):
        tp = sum(1 for p, y in zip(preds, labels) if p == c and y == c)
        predicted = sum(1 for p in preds if p == c)
        actual = sum(1 for y in labels if y == c)
        prec = tp / predicted if predicted else 0.0
        rec = tp / actual if actual else 0.0
        f1 = 2 * prec * rec / (prec + rec) if prec + rec else 0.0
        ps.append(prec)
        rs.append(rec)
        fs.append(f1)
        aucs.append(auc_ref([row[c] for row in scores], [y == c for y in labels]))
    out.update(precision=ps, recall=rs, f1=fs, auc=aucs)
    return out


def segmentation_ref(pred, gt):
    p = {(i, j) for i, row in enumerate(pred) for j, v in enumerate(row) if v}
    g = {(i, j) for i, row in enumerate(gt) for j, v in enumerate(row) if v}
    total = sum(len(row) for row in pred)
    union, inter = p | g, p & g
    iou = len(inter) / len(union) if union else 1.0
    dice = 2 * len(inter) / (len(p) + len(g)) if p or g else 1.0
    agree = sum(1 for i, row in enumerate(pred) for j, v in enumerate(row) if bool(v) == bool(gt[i][j]))
    return iou, dice, agree / total
