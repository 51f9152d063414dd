"""``sgcldff`` command line: synth, train, eval, ablate, explain, saliency.

Exit codes: 0 ok, 1 other failure, 2 config error, 3 data/io error,
4 checkpoint error.
"""
from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np
import torch

from . import data as D
from .core import (CheckpointError, ConfigError, DataError, ExperimentConfig, ShapeError,
                   load_checkpoint, load_config)

EXIT_OK, EXIT_OTHER, EXIT_CONFIG, EXIT_DATA, EXIT_CHECKPOINT = 0, 1, 2, 3, 4


def resolve_config(args) -> ExperimentConfig:
    cfg = load_config(args.config) if getattr(args, "config", None) else ExperimentConfig()
    seed = getattr(args, "seed", None)
    if seed is None and os.environ.get("SGCLDFF_SEED"):
        try:
            seed = int(os.environ["SGCLDFF_SEED"])
        except ValueError as exc:
            raise ConfigError(f"SGCLDFF_SEED: not an integer ({os.environ['SGCLDFF_SEED']!r})") from exc
    if seed is not None:
        cfg = cfg.replace(seed=seed)
    return cfg


def _model_from_checkpoint(path, cfg: ExperimentConfig | None, ablation: str = "full"):
    from .model import SGCLDFF, load_weights

    weights, saved, _ = load_checkpoint(path, cfg)
    cfg = cfg or saved
    return load_weights(SGCLDFF(cfg, ablation), weights).eval(), cfg


def cmd_synth(args) -> int:
    balance = [float(b) for b in args.balance.split(",")] if args.balance else None
    manifest = D.synth_generate(args.out, args.n, args.image_size, args.seed, balance)
    counts = np.bincount(manifest.labels(), minlength=len(manifest.class_names))
    summary = ", ".join(f"{n}={c}" for n, c in zip(manifest.class_names, counts))
    print(f"wrote {len(manifest)} samples to {args.out} ({summary})")
    return EXIT_OK


def cmd_train(args) -> int:
    from .train import train

    cfg = resolve_config(args)
    train_m = D.load_dataset(args.data, "train", cfg.class_names)
    val_m = D.load_dataset(args.data, "val", cfg.class_names)
    result = train(cfg, train_m, val_m, args.out, ablation=args.ablation)
    print(json.dumps({"best_epoch": result.best_epoch, "best_val_f1": result.best_val_f1,
                      "epochs_run": result.epochs_run,
                      "checkpoint": str(Path(args.out) / "best.sgc")}))
    return EXIT_OK


def cmd_eval(args) -> int:
    from .metrics import evaluate

    cfg = load_config(args.config) if args.config else None
    model, cfg = _model_from_checkpoint(args.checkpoint, cfg, args.ablation)
    manifest = D.load_dataset(args.data, args.split, cfg.class_names)
    report = evaluate(model, manifest, cfg, ablation=args.ablation)
    text = report.to_json()
    print(text)
    if args.report:
        report_path = Path(args.report)
        report_path.write_text(text + "\n", encoding="utf-8")
        with open(report_path.with_suffix(".per_class.csv"), "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(["class", "precision", "recall", "f1", "auc"])
            for name, m in zip(cfg.class_names, report.per_class):
                w.writerow([name, f"{m.precision:.6f}", f"{m.recall:.6f}", f"{m.f1:.6f}", f"{m.auc:.6f}"])
    return EXIT_OK


def cmd_ablate(args) -> int:
    from .train import ablate

    cfg = resolve_config(args)
    rows = ablate(cfg, args.data, args.out)
    for r in rows:
        print(f"{r['Configuration']}: accuracy {r['Accuracy']:.2f}%  F1 {r['F1']:.4f}  IoU {r['IoU']:.4f}")
    return EXIT_OK


def _load_input_image(path, cfg):
    raw = D.read_image(path)
    sample = D.preprocess(D.Sample(raw, np.zeros(raw.shape[:2], np.uint8), 0, Path(path).stem),
                          cfg.image_size)
    return sample


def cmd_explain(args) -> int:
    from .explain import grad_cam, render_heatmap, render_overlay, saliency_consistency
    from .train import prepare_inputs

    cfg = load_config(args.config) if args.config else None
    model, cfg = _model_from_checkpoint(args.checkpoint, cfg)
    sample = _load_input_image(args.image, cfg)
    x, prior = prepare_inputs([sample], cfg)
    target = args.target_class
    if target is None:
        with torch.no_grad():
            target = int(model(x).cls_logits[0].argmax())
    cam = grad_cam(model, x[0], target, args.layer)
    consistency = saliency_consistency(cam, prior[0].numpy())
    out = Path(args.out) if args.out else Path(args.image).parent
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    render_heatmap(cam, out / f"{stem}.gradcam.png")
    render_overlay(sample.image, cam, out / f"{stem}.gradcam_overlay.png")
    line = json.dumps({"target_class": target, "consistency": round(consistency, 6)})
    (out / f"{stem}.explain.json").write_text(line + "\n", encoding="utf-8")
    print(line)
    return EXIT_OK


def cmd_saliency(args) -> int:
    from .explain import render_heatmap, render_overlay
    from .saliency import saliency_prior

    cfg = resolve_config(args)
    image = D.read_image(args.image)
    sigma = cfg.smooth_sigma * max(image.shape[:2]) / cfg.image_size
    s = saliency_prior(image, cfg.saliency_alpha, cfg.saliency_beta, sigma)
    out = Path(args.out) if args.out else Path(args.image).parent
    out.mkdir(parents=True, exist_ok=True)
    stem = Path(args.image).stem
    render_heatmap(s, out / f"{stem}.saliency.png")
    render_overlay(image, s, out / f"{stem}.overlay.png")
    print(f"wrote {out / f'{stem}.saliency.png'} and {out / f'{stem}.overlay.png'}")
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="sgcldff", description=__doc__.splitlines()[0])
    p.add_argument("-v", "--verbose", action="store_true", help="log per-epoch progress")
    sub = p.add_subparsers(dest="command", required=True)

    s = sub.add_parser("synth", help="write a synthetic smear dataset")
    s.add_argument("--out", required=True, help="output dataset directory")
    s.add_argument("--n", type=int, required=True, help="number of samples")
    s.add_argument("--seed", type=int, default=0, help="generator seed")
    s.add_argument("--image-size", type=int, default=64, help="side length in pixels")
    s.add_argument("--balance", default=None,
                   help="comma-separated class fractions summing to 1 (default uniform)")
    s.set_defaults(func=cmd_synth)

    t = sub.add_parser("train", help="train one configuration")
    t.add_argument("--config", help="JSON config (defaults when omitted)")
    t.add_argument("--data", required=True, help="dataset root with train/val splits")
    t.add_argument("--out", required=True, help="run directory (best.sgc, log.csv, ...)")
    t.add_argument("--ablation", default="full", choices=["full", "no_saliency", "no_fusion"])
    t.add_argument("--seed", type=int, default=None, help="overrides config and SGCLDFF_SEED")
    t.set_defaults(func=cmd_train)

    e = sub.add_parser("eval", help="evaluate a checkpoint on one split")
    e.add_argument("--checkpoint", required=True, help=".sgc checkpoint")
    e.add_argument("--config", help="config the checkpoint must match (default: stored config)")
    e.add_argument("--data", required=True, help="dataset root")
    e.add_argument("--split", default="test", choices=list(D.SPLITS))
    e.add_argument("--ablation", default="full", choices=["full", "no_saliency", "no_fusion"])
    e.add_argument("--report", help="write the metrics JSON here (plus a per-class CSV)")
    e.set_defaults(func=cmd_eval)

    a = sub.add_parser("ablate", help="train the three ablation configurations")
    a.add_argument("--config", help="JSON config")
    a.add_argument("--data", required=True, help="dataset root with train/val/test splits")
    a.add_argument("--out", required=True, help="output directory (ablation.csv, ablation.png)")
    a.add_argument("--seed", type=int, default=None, help="overrides config and SGCLDFF_SEED")
    a.set_defaults(func=cmd_ablate)

    x = sub.add_parser("explain", help="Grad-CAM heatmap and overlay for one image")
    x.add_argument("--checkpoint", required=True, help=".sgc checkpoint")
    x.add_argument("--config", help="config the checkpoint must match")
    x.add_argument("--image", required=True, help="input RGB PNG")
    x.add_argument("--class", dest="target_class", type=int, default=None,
                   help="target class index (default: predicted class)")
    x.add_argument("--layer", default="fused", choices=["fused", "stage4"])
    x.add_argument("--out", help="output directory (default: next to the image)")
    x.set_defaults(func=cmd_explain)

    m = sub.add_parser("saliency", help="saliency map and overlay PNGs for one image")
    m.add_argument("--image", required=True, help="input RGB PNG")
    m.add_argument("--config", help="JSON config (saliency weights and blur)")
    m.add_argument("--out", help="output directory (default: next to the image)")
    m.set_defaults(func=cmd_saliency)
    return p


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except ConfigError as exc:
        print(f"config error: {exc}", file=sys.stderr)
        return EXIT_CONFIG
    except CheckpointError as exc:
        print(f"checkpoint error: {exc}", file=sys.stderr)
        return EXIT_CHECKPOINT
    except (DataError, OSError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ShapeError as exc:
        print(f"shape error: {exc}", file=sys.stderr)
        return EXIT_OTHER
    except Exception as exc:  # noqa: BLE001
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_OTHER


if __name__ == "__main__":
    sys.exit(main())
