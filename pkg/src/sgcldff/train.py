"""Training protocol (Adam, step decay, early stopping on val macro-F1) and
the three-way ablation harness."""
from __future__ import annotations

import csv
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
import torch

from . import data as D
from .core import (ConfigError, DataError, ExperimentConfig, TrainError, save_checkpoint,
                   save_config, seed_all)
from .loss import LossBreakdown, class_weights, total_loss
from .model import ABLATIONS, SGCLDFF, build_model, load_weights, model_weights
from .saliency import gate_input, saliency_prior

log = logging.getLogger(__name__)

LOG_COLUMNS = ("epoch", "total", "cls", "seg_dice", "seg_bce", "sal", "lr", "val_f1")

ABLATION_LABELS = {
    "no_saliency": "Without saliency preprocessing",
    "no_fusion": "Without cross-layer fusion",
    "full": "Full SG-CLDFF model",
}


def lr_at(epoch: int, cfg: ExperimentConfig) -> float:
    """Step decay: ``base_lr * factor ** (epoch // every)``."""
    if epoch < 0:
        raise ValueError("epoch must be >= 0")
    return cfg.base_lr * cfg.lr_decay_factor ** (epoch // cfg.lr_decay_every)


def adam_step(weights: dict, grads: dict, moments: dict, lr: float, t: int,
              beta1: float = 0.9, beta2: float = 0.999, eps: float = 1e-8) -> None:
    """Bias-corrected Adam update of ``weights`` in place.

    ``moments`` maps each name to its ``(m, v)`` pair and is updated in place;
    missing entries start at zero. Arrays without a gradient are skipped.
    """
    if t < 1:
        raise ValueError("t must be >= 1")
    for name, g in grads.items():
        if g is None:
            continue
        if not torch.isfinite(g).all():
            raise TrainError(f"non-finite gradient in {name}")
        w = weights[name]
        if name not in moments:
            moments[name] = (torch.zeros_like(w), torch.zeros_like(w))
        m, v = moments[name]
        m.mul_(beta1).add_(g, alpha=1 - beta1)
        v.mul_(beta2).addcmul_(g, g, value=1 - beta2)
        m_hat = m / (1 - beta1 ** t)
        v_hat = v / (1 - beta2 ** t)
        with torch.no_grad():
            w.sub_(lr * m_hat / (v_hat.sqrt() + eps))


def clip_grad_norm(grads: dict, max_norm: float) -> float:
    norm = math.sqrt(sum(float((g.double() ** 2).sum()) for g in grads.values() if g is not None))
    if max_norm > 0 and norm > max_norm:
        scale = max_norm / (norm + 1e-12)
        for g in grads.values():
            if g is not None:
                g.mul_(scale)
    return norm


class EarlyStopping:
    """Tracks the best validation score; ``update`` returns True when training should stop."""

    def __init__(self, patience: int, min_delta: float = 0.0):
        if patience < 1:
            raise ConfigError("patience must be >= 1")
        self.patience, self.min_delta = patience, min_delta
        self.best = -math.inf
        self.since_improve = 0
        self.improved = False

    def update(self, value: float) -> bool:
        self.improved = value > self.best + self.min_delta
        if self.improved:
            self.best = value
            self.since_improve = 0
        else:
            self.since_improve += 1
        return self.since_improve >= self.patience


# --- input preparation ----------------------------------------------------

def saliency_for(sample: D.Sample, cfg: ExperimentConfig, ablation: str = "full") -> np.ndarray:
    if ablation == "no_saliency":
        return np.ones(sample.mask.shape, dtype=np.float64)
    return saliency_prior(sample.image, cfg.saliency_alpha, cfg.saliency_beta, cfg.smooth_sigma)


def prepare_inputs(samples: Sequence[D.Sample], cfg: ExperimentConfig, ablation: str = "full"):
    """Gate each image with its saliency prior; returns (x B x 4 x H x W, priors B x H x W)."""
    priors = [saliency_for(s, cfg, ablation) for s in samples]
    gated = [gate_input(s.image, p, cfg.saliency_floor) for s, p in zip(samples, priors)]
    x = torch.from_numpy(np.stack(gated).astype(np.float32)).permute(0, 3, 1, 2).contiguous()
    return x, torch.from_numpy(np.stack(priors).astype(np.float32))


def load_split(manifest, cfg: ExperimentConfig) -> list[D.Sample]:
    if isinstance(manifest, D.DatasetManifest):
        return [D.preprocess(D.load_sample(e), cfg.image_size) for e in manifest.samples]
    return [D.preprocess(s, cfg.image_size) for s in manifest]


def predict(model: SGCLDFF, manifest, cfg: ExperimentConfig, ablation: str = "full",
            batch_size: int = 32) -> Iterable:
    """Yield ``(samples, outputs)`` per batch, outputs as numpy arrays."""
    samples = load_split(manifest, cfg)
    model.eval()
    with torch.no_grad():
        for batch in D.make_batches(samples, batch_size):
            x, _ = prepare_inputs(batch, cfg, ablation)
            out = model(x)
            yield batch, {
                "probs": torch.softmax(out.cls_logits, dim=1).numpy(),
                "seg_prob": torch.sigmoid(out.seg_logits[:, 0]).numpy(),
                "attention": out.attention.numpy(),
            }


# --- training --------------------------------------------------------------

@dataclass
class TrainResult:
    model: SGCLDFF
    best_epoch: int
    best_val_f1: float
    epochs_run: int
    log: list[dict] = field(default_factory=list)
    out_dir: Path | None = None


def _epoch_inputs(samples, cfg, ablation, aug, rng):
    if aug is None:
        return samples
    return [D.augment(s, aug, rng) for s in samples]


def train(cfg: ExperimentConfig, train_manifest, val_manifest, out_dir=None,
          ablation: str = "full") -> TrainResult:
    """Train one configuration and keep the best-validation-F1 weights.

    Writes ``best.sgc``, ``log.csv``, ``config.resolved.json`` and a loss-curve
    figure to ``out_dir`` when it is given.
    """
    from .metrics import evaluate

    if ablation not in ABLATIONS:
        raise ConfigError(f"ablation: unknown value {ablation!r}")
    train_samples = load_split(train_manifest, cfg)
    val_samples = load_split(val_manifest, cfg)
    if not train_samples or not val_samples:
        raise DataError("train and val splits must be non-empty")
    train_ids = {s.id for s in train_samples}
    val_ids = {s.id for s in val_samples}
    if train_ids & val_ids and train_ids != val_ids:
        raise DataError("val split overlaps train split")

    counts = np.bincount([s.label for s in train_samples], minlength=cfg.num_classes)
    weights = class_weights(counts.tolist())
    lambda_sal = 0.0 if ablation == "no_saliency" else cfg.lambda_sal

    seed_all(cfg.seed)
    model = build_model(cfg, ablation, seed=cfg.seed)
    params = dict(model.named_parameters())
    moments: dict = {}
    rng = np.random.default_rng(cfg.seed)
    aug_spec = D.AugmentationSpec.from_config(cfg)
    aug = None if aug_spec == D.AugmentationSpec.off() else aug_spec

    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        save_config(cfg, out_dir / "config.resolved.json")

    stopper = EarlyStopping(cfg.patience, cfg.min_delta)
    best_state, best_epoch, best_iou = None, -1, -math.inf
    rows = []
    step = 0
    epoch = 0
    for epoch in range(cfg.max_epochs):
        lr = lr_at(epoch, cfg)
        model.train()
        sums = np.zeros(5)
        seen = 0
        for b, batch in enumerate(D.make_batches(train_samples, cfg.batch_size, True, rng)):
            batch = _epoch_inputs(batch, cfg, ablation, aug, rng)
            x, priors = prepare_inputs(batch, cfg, ablation)
            masks = torch.from_numpy(np.stack([s.mask for s in batch]).astype(np.float32))[:, None]
            labels = torch.tensor([s.label for s in batch])
            out = model(x)
            loss, parts = total_loss(out, masks, labels, priors, cfg, weights, lambda_sal)
            if not math.isfinite(parts.total):
                raise TrainError(f"non-finite loss at epoch {epoch}, batch {b}")
            names = [n for n, p in params.items() if p.requires_grad]
            grads = torch.autograd.grad(loss, [params[n] for n in names], allow_unused=True)
            grads = dict(zip(names, grads))
            clip_grad_norm(grads, cfg.grad_clip)
            step += 1
            adam_step(params, grads, moments, lr, step)
            sums += len(batch) * np.array([parts.total, parts.cls, parts.seg_dice,
                                           parts.seg_bce, parts.sal])
            seen += len(batch)

        val = evaluate(model, val_samples, cfg, ablation=ablation)
        val_f1 = val.f1_macro
        tied = val_f1 >= stopper.best and val.iou > best_iou
        stop = stopper.update(val_f1)
        if stopper.improved or tied:
            best_iou = val.iou
            best_state = {k: v.detach().clone() for k, v in model.state_dict().items()}
            best_epoch = epoch
            if out_dir is not None:
                save_checkpoint(model_weights(model), cfg, epoch, out_dir / "best.sgc")
        mean = sums / seen
        row = dict(zip(LOG_COLUMNS, (epoch, *mean.tolist(), lr, val_f1)))
        rows.append(row)
        log.info("epoch %d loss %.4f val_f1 %.4f lr %.2e", epoch, row["total"], val_f1, lr)
        if stop:
            break

    model.load_state_dict(best_state)
    model.eval()
    if out_dir is not None:
        write_log(rows, out_dir / "log.csv")
        from .report import plot_training_curves

        plot_training_curves(rows, out_dir / "curves.png")
    return TrainResult(model, best_epoch, stopper.best, epoch + 1, rows, out_dir)


def write_log(rows: list[dict], path) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(LOG_COLUMNS)
        for r in rows:
            w.writerow([r["epoch"]] + [f"{r[c]:.8g}" for c in LOG_COLUMNS[1:]])


def ablate(cfg: ExperimentConfig, root, out_dir, ablations: Sequence[str] = ("no_saliency", "no_fusion", "full")):
    """Train each configuration on identical splits and seed, score on the test split.

    Returns the table rows and writes ``ablation.csv`` plus a bar chart.
    """
    from .metrics import evaluate
    from .report import plot_ablation

    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    train_m = D.load_dataset(root, "train", cfg.class_names)
    val_m = D.load_dataset(root, "val", cfg.class_names)
    test_m = D.load_dataset(root, "test", cfg.class_names)
    rows = []
    for name in ablations:
        result = train(cfg, train_m, val_m, out_dir / name, ablation=name)
        report = evaluate(result.model, test_m, cfg, ablation=name)
        rows.append({"Configuration": ABLATION_LABELS[name], "ablation": name,
                     "Accuracy": 100.0 * report.accuracy, "F1": report.f1_macro,
                     "IoU": report.iou})
    with open(out_dir / "ablation.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["Configuration", "Accuracy", "F1", "IoU"])
        for r in rows:
            w.writerow([r["Configuration"], f"{r['Accuracy']:.2f}", f"{r['F1']:.4f}", f"{r['IoU']:.4f}"])
    plot_ablation(rows, out_dir / "ablation.png")
    return rows
