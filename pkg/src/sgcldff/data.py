"""Dataset layout, synthetic smear generator, preprocessing and augmentation.

On-disk layout shared by the loader and the generator::

    root/images/<id>.png   8-bit RGB
    root/masks/<id>.png    8-bit single channel, {0, 255}
    root/labels.csv        id,label_name
    root/split.csv         id,split
"""
from __future__ import annotations

import csv
from dataclasses import dataclass, field
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image
from scipy import ndimage

from .core import DEFAULT_CLASS_NAMES, ConfigError, DataError, ExperimentConfig

SPLITS = ("train", "val", "test")


@dataclass
class Sample:
    image: np.ndarray  # H x W x 3 float32 in [0, 1]
    mask: np.ndarray  # H x W uint8 in {0, 1}
    label: int
    id: str

    def __post_init__(self):
        if self.image.shape[:2] != self.mask.shape:
            raise DataError(f"{self.id}: image {self.image.shape[:2]} vs mask {self.mask.shape}")


@dataclass(frozen=True)
class ManifestEntry:
    id: str
    image: Path
    mask: Path
    label: int


@dataclass
class DatasetManifest:
    root: Path
    split: str
    samples: list[ManifestEntry]
    class_names: tuple[str, ...] = DEFAULT_CLASS_NAMES

    def __len__(self):
        return len(self.samples)

    @property
    def ids(self) -> list[str]:
        return [e.id for e in self.samples]

    def labels(self) -> list[int]:
        return [e.label for e in self.samples]

    def load(self, index: int) -> Sample:
        return load_sample(self.samples[index])

    def load_all(self) -> list[Sample]:
        return [load_sample(e) for e in self.samples]


@dataclass(frozen=True)
class AugmentationSpec:
    rotation_deg: float = 15.0
    hflip: bool = True
    vflip: bool = True
    contrast_jitter: float = 0.2
    noise_sigma: float = 0.02
    flip_prob: float = 0.5

    def __post_init__(self):
        if self.rotation_deg < 0:
            raise ConfigError("rotation_deg must be >= 0")
        if self.noise_sigma < 0:
            raise ConfigError("noise_sigma must be >= 0")
        if not 0 <= self.contrast_jitter < 1:
            raise ConfigError("contrast_jitter must lie in [0, 1)")
        if not 0 <= self.flip_prob <= 1:
            raise ConfigError("flip_prob must lie in [0, 1]")

    @classmethod
    def off(cls) -> "AugmentationSpec":
        return cls(rotation_deg=0.0, hflip=False, vflip=False, contrast_jitter=0.0, noise_sigma=0.0)

    @classmethod
    def from_config(cls, cfg: ExperimentConfig) -> "AugmentationSpec":
        if not cfg.augment:
            return cls.off()
        return cls(rotation_deg=cfg.rotation_deg, hflip=cfg.hflip, vflip=cfg.vflip,
                   contrast_jitter=cfg.contrast_jitter, noise_sigma=cfg.noise_sigma)


# --- loading ---------------------------------------------------------------

def read_image(path) -> np.ndarray:
    with Image.open(path) as im:
        return np.asarray(im.convert("RGB"), dtype=np.float32) / 255.0


def read_mask(path) -> np.ndarray:
    with Image.open(path) as im:
        return (np.asarray(im.convert("L")) >= 128).astype(np.uint8)


def write_image(path, image: np.ndarray) -> None:
    arr = np.clip(np.rint(np.asarray(image)[..., :3] * 255.0), 0, 255).astype(np.uint8)
    Image.fromarray(arr, mode="RGB").save(path, format="PNG")


def write_mask(path, mask: np.ndarray) -> None:
    Image.fromarray((np.asarray(mask) > 0).astype(np.uint8) * 255, mode="L").save(path, format="PNG")


def load_sample(entry: ManifestEntry) -> Sample:
    return Sample(read_image(entry.image), read_mask(entry.mask), entry.label, entry.id)


def _read_csv_pairs(path: Path, columns: tuple[str, str]) -> dict[str, str]:
    if not path.is_file():
        raise DataError(f"missing {path}")
    with open(path, newline="", encoding="utf-8") as fh:
        reader = csv.DictReader(fh)
        if reader.fieldnames is None or any(c not in reader.fieldnames for c in columns):
            raise DataError(f"{path}: expected columns {','.join(columns)}")
        out = {}
        for row in reader:
            key = row[columns[0]].strip()
            if key in out:
                raise DataError(f"{path}: duplicate id {key}")
            out[key] = row[columns[1]].strip()
    return out


def load_dataset(root, split: str, class_names: Sequence[str] = DEFAULT_CLASS_NAMES) -> DatasetManifest:
    """Validate ``root`` and return the manifest of one split, sorted by id."""
    root = Path(root)
    if split not in SPLITS:
        raise DataError(f"unknown split {split!r}")
    images_dir, masks_dir = root / "images", root / "masks"
    if not images_dir.is_dir():
        raise DataError(f"missing directory {images_dir}")
    if not masks_dir.is_dir():
        raise DataError(f"missing directory {masks_dir}")
    labels = _read_csv_pairs(root / "labels.csv", ("id", "label_name"))
    splits = _read_csv_pairs(root / "split.csv", ("id", "split"))
    name_to_index = {n: i for i, n in enumerate(class_names)}

    image_ids = sorted(p.stem for p in images_dir.glob("*.png"))
    if not image_ids:
        raise DataError(f"empty split: no images in {images_dir}")
    entries = []
    for sid in image_ids:
        if splits.get(sid) is None:
            raise DataError(f"{sid}: not listed in split.csv")
        if splits[sid] not in SPLITS:
            raise DataError(f"{sid}: unknown split {splits[sid]!r}")
        mask = masks_dir / f"{sid}.png"
        if not mask.is_file():
            raise DataError(f"{sid}: missing mask {mask}")
        if sid not in labels:
            raise DataError(f"{sid}: no entry in labels.csv")
        name = labels[sid]
        if name not in name_to_index:
            raise DataError(f"{sid}: unknown label {name!r}")
        if splits[sid] != split:
            continue
        entries.append(ManifestEntry(sid, images_dir / f"{sid}.png", mask, name_to_index[name]))
    if not entries:
        raise DataError(f"empty split: no {split} samples under {root}")
    return DatasetManifest(root, split, entries, tuple(class_names))


# --- synthetic smears ------------------------------------------------------

BACKGROUND = np.array([0.96, 0.90, 0.90])
RBC_COLOR = np.array([0.93, 0.78, 0.80])
NUCLEUS_COLOR = np.array([0.36, 0.16, 0.52])

# nucleus shape, cytoplasm tint and granule tint (None = agranular) per class;
# tints follow the usual Romanowsky appearance of each cell type
_MORPHOLOGY = {
    "neutrophil": ("trilobed", (0.86, 0.74, 0.86), (0.70, 0.52, 0.72)),
    "lymphocyte": ("round", (0.70, 0.76, 0.94), None),
    "monocyte": ("kidney", (0.76, 0.74, 0.84), None),
    "eosinophil": ("bilobed", (0.95, 0.66, 0.56), (0.85, 0.42, 0.30)),
}


def quota_counts(n: int, balance: Sequence[float]) -> list[int]:
    """Largest-remainder apportionment of ``n`` samples over ``balance``."""
    raw = np.asarray(balance, dtype=np.float64) * n
    counts = np.floor(raw).astype(int)
    order = sorted(range(len(raw)), key=lambda i: (-(raw[i] - counts[i]), i))
    for i in order[: n - counts.sum()]:
        counts[i] += 1
    return counts.tolist()


def _disk(yy, xx, cy, cx, r):
    return (yy - cy) ** 2 + (xx - cx) ** 2 <= r * r


def _ellipse(yy, xx, cy, cx, ry, rx, theta):
    c, s = np.cos(theta), np.sin(theta)
    u = (xx - cx) * c + (yy - cy) * s
    v = -(xx - cx) * s + (yy - cy) * c
    return (u / rx) ** 2 + (v / ry) ** 2 <= 1.0


def _nucleus(kind: str, yy, xx, cy, cx, r, theta):
    """Nucleus mask for a cell of cytoplasm radius ``r`` centred at (cy, cx)."""
    c, s = np.cos(theta), np.sin(theta)
    if kind == "round":
        return _disk(yy, xx, cy, cx, 0.62 * r)
    if kind == "kidney":
        body = _ellipse(yy, xx, cy, cx, 0.50 * r, 0.66 * r, theta)
        bite = _disk(yy, xx, cy - 0.52 * r * c, cx + 0.52 * r * s, 0.34 * r)
        return body & ~bite
    if kind == "bilobed":
        d = 0.34 * r
        return (_disk(yy, xx, cy + d * s, cx + d * c, 0.30 * r)
                | _disk(yy, xx, cy - d * s, cx - d * c, 0.30 * r))
    if kind == "trilobed":
        out = np.zeros_like(yy, dtype=bool)
        for k in range(3):
            a = theta + 2 * np.pi * k / 3
            out |= _disk(yy, xx, cy + 0.38 * r * np.sin(a), cx + 0.38 * r * np.cos(a), 0.24 * r)
        return out
    raise ValueError(kind)


def render_smear(image_size: int, class_name: str, rng: np.random.Generator):
    """Draw one synthetic smear; returns (image H x W x 3 float, mask H x W uint8)."""
    kind, cyto_color, granule_color = _MORPHOLOGY[class_name]
    n = image_size
    yy, xx = np.mgrid[0:n, 0:n].astype(np.float64)
    img = np.broadcast_to(BACKGROUND, (n, n, 3)).copy()

    r = n * rng.uniform(0.20, 0.25)
    cy, cx = n / 2 + rng.uniform(-0.08, 0.08, size=2) * n

    # red cells: faint disks kept clear of the leukocyte
    n_rbc = int(rng.integers(5, 10))
    for _ in range(n_rbc * 4):
        if n_rbc == 0:
            break
        rr = n * rng.uniform(0.07, 0.10)
        py, px = rng.uniform(0, n, size=2)
        if np.hypot(py - cy, px - cx) < r + rr + 0.03 * n:
            continue
        disk = _disk(yy, xx, py, px, rr)
        pale = _disk(yy, xx, py, px, 0.5 * rr)
        img[disk] = RBC_COLOR
        img[pale] = 0.5 * (RBC_COLOR + BACKGROUND)
        n_rbc -= 1

    theta = rng.uniform(0, 2 * np.pi)
    cyto = _ellipse(yy, xx, cy, cx, r * rng.uniform(0.9, 1.0), r, theta)
    nucleus = _nucleus(kind, yy, xx, cy, cx, r, theta) & cyto
    img[cyto] = cyto_color
    if granule_color is not None:
        granules = cyto & (rng.random((n, n)) < 0.25)
        img[granules] = granule_color
    img[nucleus] = NUCLEUS_COLOR
    img += rng.normal(0.0, 0.015, size=img.shape)
    img = np.clip(img, 0.0, 1.0)
    return img, (cyto | nucleus).astype(np.uint8)


def synth_generate(out, n: int, image_size: int = 64, seed: int = 0,
                   class_balance: Sequence[float] | None = None,
                   class_names: Sequence[str] = DEFAULT_CLASS_NAMES,
                   split_fractions: Sequence[float] = (0.7, 0.15, 0.15)) -> DatasetManifest:
    """Write ``n`` synthetic smears under ``out`` in the canonical layout.

    Class counts follow ``class_balance`` exactly (largest-remainder quotas)
    and the train/val/test assignment is stratified per class. Returns a
    manifest covering every written sample (``split="all"``).
    """
    k = len(class_names)
    if class_balance is None:
        class_balance = [1.0 / k] * k
    if len(class_balance) != k:
        raise ConfigError(f"class_balance: {len(class_balance)} entries for {k} classes")
    if any(b < 0 for b in class_balance) or abs(sum(class_balance) - 1.0) > 1e-6:
        raise ConfigError("class_balance: must be non-negative and sum to 1")
    if n < k:
        raise ConfigError(f"n: need n >= number of classes ({k}), got {n}")
    if image_size < 16:
        raise ConfigError("image_size: must be >= 16")
    if len(split_fractions) != 3 or abs(sum(split_fractions) - 1.0) > 1e-6:
        raise ConfigError("split_fractions: need three fractions summing to 1")
    unknown = [c for c in class_names if c not in _MORPHOLOGY]
    if unknown:
        raise ConfigError(f"class_names: no synthetic morphology for {unknown}")

    out = Path(out)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)

    rng = np.random.default_rng(seed)
    counts = quota_counts(n, class_balance)
    labels = np.repeat(np.arange(k), counts)
    rng.shuffle(labels)

    split_of = np.empty(n, dtype=object)
    for c in range(k):
        idx = np.flatnonzero(labels == c)
        for s, q in zip(SPLITS, quota_counts(len(idx), split_fractions)):
            split_of[idx[:q]] = s
            idx = idx[q:]

    width = max(4, len(str(n - 1)))
    entries = []
    for i, label in enumerate(labels):
        sid = f"syn{i:0{width}d}"
        img, mask = render_smear(image_size, class_names[label],
                                 np.random.default_rng([seed, i]))
        write_image(out / "images" / f"{sid}.png", img)
        write_mask(out / "masks" / f"{sid}.png", mask)
        entries.append(ManifestEntry(sid, out / "images" / f"{sid}.png",
                                     out / "masks" / f"{sid}.png", int(label)))
    with open(out / "labels.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "label_name"])
        for e in entries:
            w.writerow([e.id, class_names[e.label]])
    with open(out / "split.csv", "w", newline="", encoding="utf-8") as fh:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(["id", "split"])
        for e, s in zip(entries, split_of):
            w.writerow([e.id, s])
    return DatasetManifest(out, "all", entries, tuple(class_names))


# --- preprocessing and augmentation ---------------------------------------

def resize_bilinear(image: np.ndarray, size: int) -> np.ndarray:
    h, w = image.shape[:2]
    if (h, w) == (size, size):
        return image
    t = torch.from_numpy(np.ascontiguousarray(image, dtype=np.float32)).permute(2, 0, 1)[None]
    t = F.interpolate(t, size=(size, size), mode="bilinear", align_corners=False)
    return t[0].permute(1, 2, 0).numpy()


def resize_nearest(mask: np.ndarray, size: int) -> np.ndarray:
    h, w = mask.shape
    rows = np.minimum((np.arange(size) * h) // size, h - 1)
    cols = np.minimum((np.arange(size) * w) // size, w - 1)
    return mask[np.ix_(rows, cols)]


def normalize_channels(image: np.ndarray) -> np.ndarray:
    """Per-channel min-max to [0, 1]; constant channels become zero."""
    lo = image.min(axis=(0, 1), keepdims=True)
    hi = image.max(axis=(0, 1), keepdims=True)
    span = hi - lo
    safe = np.where(span > 0, span, 1.0)
    return np.where(span > 0, (image - lo) / safe, 0.0).astype(np.float32)


def preprocess(sample: Sample, image_size: int) -> Sample:
    image = normalize_channels(resize_bilinear(sample.image, image_size))
    mask = resize_nearest((np.asarray(sample.mask) > 0).astype(np.uint8), image_size)
    return Sample(image, mask, sample.label, sample.id)


def augment(sample: Sample, spec: AugmentationSpec, rng: np.random.Generator) -> Sample:
    """Random rotation/flips on image and mask, contrast and noise on the image."""
    image, mask = sample.image, sample.mask
    if spec.rotation_deg > 0:
        angle = rng.uniform(-spec.rotation_deg, spec.rotation_deg)
        image = ndimage.rotate(image, angle, axes=(1, 0), reshape=False, order=1, mode="reflect")
        mask = ndimage.rotate(mask, angle, axes=(1, 0), reshape=False, order=0, mode="reflect")
        image = np.clip(image, 0.0, 1.0)
    if spec.hflip and rng.random() < spec.flip_prob:
        image, mask = image[:, ::-1], mask[:, ::-1]
    if spec.vflip and rng.random() < spec.flip_prob:
        image, mask = image[::-1], mask[::-1]
    if spec.contrast_jitter > 0:
        factor = rng.uniform(1 - spec.contrast_jitter, 1 + spec.contrast_jitter)
        mean = image.mean(axis=(0, 1), keepdims=True)
        image = np.clip(mean + factor * (image - mean), 0.0, 1.0)
    if spec.noise_sigma > 0:
        image = np.clip(image + rng.normal(0.0, spec.noise_sigma, size=image.shape), 0.0, 1.0)
    return Sample(np.ascontiguousarray(image, dtype=np.float32),
                  np.ascontiguousarray(mask, dtype=np.uint8), sample.label, sample.id)


@dataclass
class Batch:
    images: np.ndarray  # B x H x W x 3
    masks: np.ndarray  # B x H x W
    labels: np.ndarray  # B
    ids: list[str] = field(default_factory=list)


def collate(samples: Sequence[Sample]) -> Batch:
    return Batch(np.stack([s.image for s in samples]).astype(np.float32),
                 np.stack([s.mask for s in samples]).astype(np.uint8),
                 np.array([s.label for s in samples], dtype=np.int64),
                 [s.id for s in samples])


def make_batches(items: Sequence, batch_size: int, shuffle: bool = False,
                 rng: np.random.Generator | None = None) -> list[list]:
    """Partition ``items`` into batches, covering each item exactly once.

    Without shuffling, items keep their (id-sorted) manifest order. Returns
    lists of the original items; :func:`collate` turns samples into arrays.
    """
    if batch_size < 1:
        raise ConfigError("batch_size must be >= 1")
    items = list(items.samples if isinstance(items, DatasetManifest) else items)
    order = np.arange(len(items))
    if shuffle:
        if rng is None:
            raise ValueError("shuffle=True needs an rng")
        order = rng.permutation(len(items))
    return [[items[i] for i in order[j:j + batch_size]] for j in range(0, len(items), batch_size)]


def subset(manifest: DatasetManifest, split: str) -> DatasetManifest:
    """Reload ``split`` from a manifest's root (used after :func:`synth_generate`)."""
    return load_dataset(manifest.root, split, manifest.class_names)
