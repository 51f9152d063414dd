"""Shared types, run configuration, seeding and the ``.sgc`` checkpoint format."""
from __future__ import annotations

import dataclasses
import json
import random
import struct
from dataclasses import dataclass, field
from pathlib import Path
from typing import Mapping

import numpy as np
import torch

DEFAULT_CLASS_NAMES = ("neutrophil", "lymphocyte", "monocyte", "eosinophil")

CHECKPOINT_MAGIC = b"SGC\x00"
CHECKPOINT_VERSION = 1


class SGError(Exception):
    """Base class for all errors raised by this package."""


class ConfigError(SGError, ValueError):
    pass


class DataError(SGError):
    pass


class CheckpointError(SGError):
    pass


class ShapeError(SGError, ValueError):
    pass


class TrainError(SGError, RuntimeError):
    pass


@dataclass(frozen=True)
class ExperimentConfig:
    image_size: int = 224
    num_classes: int = 4
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES
    base_channels: int = 32
    fusion_dim: int = 64
    fusion_cardinality: int = 4
    window_size: int = 7
    # loss
    lambda_cls: float = 1.0
    lambda_seg: float = 1.0
    lambda_sal: float = 0.1
    dice_smooth: float = 1.0
    # optimisation
    base_lr: float = 1e-4
    lr_decay_factor: float = 0.1
    lr_decay_every: int = 30
    batch_size: int = 32
    max_epochs: int = 100
    patience: int = 10
    min_delta: float = 1e-4
    grad_clip: float = 5.0
    seed: int = 0
    # saliency
    saliency_alpha: float = 0.5
    saliency_beta: float = 0.5
    saliency_floor: float = 0.3
    saliency_sigma: float | None = None
    # augmentation
    augment: bool = True
    rotation_deg: float = 15.0
    hflip: bool = True
    vflip: bool = True
    contrast_jitter: float = 0.2
    noise_sigma: float = 0.02
    # evaluation
    seg_threshold: float = 0.5

    def __post_init__(self):
        if not isinstance(self.class_names, tuple):
            object.__setattr__(self, "class_names", tuple(self.class_names))
        self.validate()

    @property
    def smooth_sigma(self) -> float:
        """Gaussian blur sigma for the saliency prior: 2 px at 224, scaled with size."""
        if self.saliency_sigma is not None:
            return float(self.saliency_sigma)
        return 2.0 * self.image_size / 224.0

    def validate(self) -> None:
        def fail(name, why):
            raise ConfigError(f"{name}: {why}")

        for name in ("image_size", "num_classes", "base_channels", "fusion_dim",
                     "fusion_cardinality", "window_size", "lr_decay_every",
                     "batch_size", "max_epochs", "patience"):
            value = getattr(self, name)
            if isinstance(value, bool) or not isinstance(value, int):
                fail(name, f"expected an integer, got {value!r}")
            if value < 1:
                fail(name, f"must be >= 1, got {value}")
        if self.image_size % 32:
            fail("image_size", f"{self.image_size} is not divisible by 32")
        for div in (4, 8, 16, 32):
            if (self.image_size // div) % self.window_size:
                fail("window_size",
                     f"{self.window_size} does not divide stage side {self.image_size // div}")
        if self.num_classes < 2:
            fail("num_classes", "need at least 2 classes")
        if len(self.class_names) != self.num_classes:
            fail("class_names", f"{len(self.class_names)} names for {self.num_classes} classes")
        if len(set(self.class_names)) != len(self.class_names):
            fail("class_names", "duplicate class name")
        if self.fusion_dim % self.fusion_cardinality:
            fail("fusion_dim", f"{self.fusion_dim} not divisible by cardinality {self.fusion_cardinality}")
        if self.base_channels % self.fusion_cardinality:
            fail("base_channels",
                 f"{self.base_channels} not divisible by cardinality {self.fusion_cardinality}")
        if self.fusion_dim % 4:
            fail("fusion_dim", "must be divisible by 4 (segmentation head halves it twice)")
        for name in ("lambda_cls", "lambda_seg", "lambda_sal", "min_delta", "grad_clip",
                     "rotation_deg", "noise_sigma", "saliency_alpha", "saliency_beta"):
            value = getattr(self, name)
            if not np.isfinite(value) or value < 0:
                fail(name, f"must be finite and >= 0, got {value}")
        if not self.dice_smooth > 0:
            fail("dice_smooth", "must be > 0")
        if not self.base_lr > 0:
            fail("base_lr", "must be > 0")
        if not 0 < self.lr_decay_factor <= 1:
            fail("lr_decay_factor", "must lie in (0, 1]")
        if not self.saliency_alpha + self.saliency_beta > 0:
            fail("saliency_alpha", "saliency_alpha + saliency_beta must be > 0")
        if not 0 <= self.saliency_floor <= 1:
            fail("saliency_floor", "must lie in [0, 1]")
        if self.saliency_sigma is not None and self.saliency_sigma < 0:
            fail("saliency_sigma", "must be >= 0")
        if not 0 <= self.contrast_jitter < 1:
            fail("contrast_jitter", "must lie in [0, 1)")
        if not 0 < self.seg_threshold < 1:
            fail("seg_threshold", "must lie in (0, 1)")

    def replace(self, **changes) -> "ExperimentConfig":
        return dataclasses.replace(self, **changes)

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["class_names"] = list(self.class_names)
        return d

    @classmethod
    def from_dict(cls, doc: Mapping) -> "ExperimentConfig":
        if not isinstance(doc, Mapping):
            raise ConfigError("config document must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(doc) - known)
        if unknown:
            raise ConfigError(f"{unknown[0]}: unknown config field")
        kwargs = dict(doc)
        if "class_names" in kwargs:
            kwargs["class_names"] = tuple(kwargs["class_names"])
            kwargs.setdefault("num_classes", len(kwargs["class_names"]))
        elif "num_classes" in kwargs and kwargs["num_classes"] != len(DEFAULT_CLASS_NAMES):
            k = kwargs["num_classes"]
            if isinstance(k, int) and k >= 2:
                names = list(DEFAULT_CLASS_NAMES[:k])
                names += [f"class{i}" for i in range(len(names), k)]
                kwargs["class_names"] = tuple(names)
        try:
            return cls(**kwargs)
        except TypeError as exc:
            raise ConfigError(str(exc)) from exc


def load_config(path) -> ExperimentConfig:
    """Read a JSON config document, fill defaults and validate it."""
    path = Path(path)
    try:
        text = path.read_text(encoding="utf-8")
    except OSError as exc:
        raise ConfigError(f"cannot read config {path}: {exc}") from exc
    try:
        doc = json.loads(text) if text.strip() else {}
    except json.JSONDecodeError as exc:
        raise ConfigError(f"malformed config {path}: {exc}") from exc
    return ExperimentConfig.from_dict(doc)


def save_config(cfg: ExperimentConfig, path) -> None:
    Path(path).write_text(json.dumps(cfg.to_dict(), indent=2, sort_keys=True) + "\n",
                          encoding="utf-8")


def seed_all(seed: int) -> None:
    """Seed python, numpy and torch global generators."""
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)


# --- checkpoints -----------------------------------------------------------
#
# Layout: magic (4 bytes) | manifest length (uint64 LE) | manifest JSON (UTF-8)
#         | concatenated little-endian float32 payloads in manifest order.

def save_checkpoint(weights: Mapping[str, np.ndarray], cfg: ExperimentConfig,
                    epoch: int, path) -> None:
    arrays = {}
    for name, value in weights.items():
        if isinstance(value, torch.Tensor):
            value = value.detach().cpu().numpy()
        arr = np.ascontiguousarray(value, dtype="<f4")
        if not np.all(np.isfinite(arr)):
            raise CheckpointError(f"array {name} contains non-finite values")
        arrays[name] = arr
    manifest = {
        "format_version": CHECKPOINT_VERSION,
        "epoch": int(epoch),
        "config": cfg.to_dict(),
        "arrays": [{"name": n, "shape": list(a.shape), "dtype": "float32"}
                   for n, a in arrays.items()],
    }
    head = json.dumps(manifest, sort_keys=True).encode("utf-8")
    path = Path(path)
    with open(path, "wb") as fh:
        fh.write(CHECKPOINT_MAGIC)
        fh.write(struct.pack("<Q", len(head)))
        fh.write(head)
        for arr in arrays.values():
            fh.write(arr.tobytes())


def load_checkpoint(path, cfg: ExperimentConfig | None = None):
    """Return ``(weights, config, epoch)``.

    When ``cfg`` is given, every array shape is checked against the model
    that config would build; any difference raises :class:`CheckpointError`.
    """
    path = Path(path)
    try:
        blob = path.read_bytes()
    except OSError as exc:
        raise CheckpointError(f"cannot read checkpoint {path}: {exc}") from exc
    if len(blob) < 12 or blob[:4] != CHECKPOINT_MAGIC:
        raise CheckpointError(f"{path} is not an .sgc checkpoint")
    (head_len,) = struct.unpack("<Q", blob[4:12])
    if 12 + head_len > len(blob):
        raise CheckpointError(f"{path} is truncated (manifest)")
    try:
        manifest = json.loads(blob[12:12 + head_len].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise CheckpointError(f"{path}: corrupt manifest") from exc
    if manifest.get("format_version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"{path}: format version {manifest.get('format_version')} != {CHECKPOINT_VERSION}")
    try:
        saved_cfg = ExperimentConfig.from_dict(manifest["config"])
    except ConfigError as exc:
        raise CheckpointError(f"{path}: stored config invalid ({exc})") from exc

    offset = 12 + head_len
    weights: dict[str, np.ndarray] = {}
    for entry in manifest["arrays"]:
        shape = tuple(entry["shape"])
        nbytes = 4 * int(np.prod(shape, dtype=np.int64))
        if offset + nbytes > len(blob):
            raise CheckpointError(f"{path} is truncated (array {entry['name']})")
        weights[entry["name"]] = np.frombuffer(
            blob, dtype="<f4", count=nbytes // 4, offset=offset).reshape(shape).copy()
        offset += nbytes
    if offset != len(blob):
        raise CheckpointError(f"{path}: {len(blob) - offset} trailing bytes")

    if cfg is not None:
        from .model import SGCLDFF

        expected = {n: tuple(t.shape) for n, t in SGCLDFF(cfg).state_dict().items()}
        got = {n: a.shape for n, a in weights.items()}
        if expected.keys() != got.keys():
            missing = sorted(expected.keys() - got.keys())
            extra = sorted(got.keys() - expected.keys())
            raise CheckpointError(f"{path}: array names differ (missing {missing[:3]}, extra {extra[:3]})")
        for name, shape in expected.items():
            if got[name] != shape:
                raise CheckpointError(
                    f"{path}: {name} has shape {got[name]}, config expects {shape}")
    return weights, saved_cfg, int(manifest["epoch"])
