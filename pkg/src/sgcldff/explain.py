"""Grad-CAM heatmaps, saliency consistency and overlay rendering."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F
from PIL import Image

from .core import ConfigError, ShapeError
from .saliency import minmax

LAYERS = ("fused", "stage4")


def cam_from(features: torch.Tensor, grads: torch.Tensor, size=None) -> np.ndarray:
    """Combine a C x h x w feature map with its gradients into a [0, 1] heatmap.

    Channel weights are the spatial mean of the gradients; the weighted sum is
    passed through ReLU, optionally resized (bilinear) and min-max normalised.
    """
    alpha = grads.mean(dim=(-2, -1), keepdim=True)
    cam = torch.relu((alpha * features).sum(dim=0))
    if size is not None and tuple(cam.shape) != tuple(size):
        cam = F.interpolate(cam[None, None], size=tuple(size), mode="bilinear",
                            align_corners=False)[0, 0]
    return minmax(cam.detach().cpu().double().numpy())


def grad_cam(model, x: torch.Tensor, target_class: int, layer: str = "fused") -> np.ndarray:
    """Heatmap for one gated input: H x W x 4 array, or a 4 x H x W / 1 x 4 x H x W tensor."""
    if layer not in LAYERS:
        raise ConfigError(f"layer: unknown Grad-CAM layer {layer!r} (choose from {LAYERS})")
    if isinstance(x, np.ndarray):
        x = torch.from_numpy(np.ascontiguousarray(x, dtype=np.float32)).permute(2, 0, 1)
    if x.dim() == 3:
        x = x[None]
    num_classes = model.cls_head.fc.out_features
    if not 0 <= target_class < num_classes:
        raise ConfigError(f"target_class {target_class} outside [0, {num_classes})")
    model.eval()
    with torch.enable_grad():
        out = model(x)
        feats = out.pyramid.fused if layer == "fused" else out.pyramid.stages[3]
        (grads,) = torch.autograd.grad(out.cls_logits[0, target_class], feats)
    return cam_from(feats[0].detach(), grads[0], x.shape[-2:])


def saliency_consistency(cam: np.ndarray, saliency: np.ndarray) -> float:
    """Pearson correlation of the two maps mapped to [0, 1]; constant maps give 0.5."""
    cam = np.asarray(cam, dtype=np.float64)
    s = np.asarray(saliency, dtype=np.float64)
    if cam.shape != s.shape:
        t = torch.from_numpy(cam)[None, None]
        cam = F.interpolate(t, size=s.shape, mode="bilinear", align_corners=False)[0, 0].numpy()
    a, b = cam - cam.mean(), s - s.mean()
    den = np.sqrt((a * a).sum() * (b * b).sum())
    if den == 0:
        return 0.5
    r = float(np.clip((a * b).sum() / den, -1.0, 1.0))
    return (r + 1.0) / 2.0


def heat_colors(heatmap: np.ndarray) -> np.ndarray:
    """Fixed blue-to-red colormap: 0 -> (0, 0, 1), 1 -> (1, 0, 0)."""
    h = np.clip(np.asarray(heatmap, dtype=np.float64), 0.0, 1.0)
    return np.stack([h, np.zeros_like(h), 1.0 - h], axis=-1)


def overlay(image: np.ndarray, heatmap: np.ndarray) -> np.ndarray:
    rgb = np.asarray(image, dtype=np.float64)[..., :3]
    if rgb.shape[:2] != np.shape(heatmap):
        raise ShapeError(f"image {rgb.shape[:2]} vs heatmap {np.shape(heatmap)}")
    return 0.6 * rgb + 0.4 * heat_colors(heatmap)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.clip(np.rint(np.asarray(x) * 255.0), 0, 255).astype(np.uint8)


def render_overlay(image: np.ndarray, heatmap: np.ndarray, out_path) -> Path:
    """Write ``0.6 * image + 0.4 * colormap(heatmap)`` as an 8-bit RGB PNG."""
    out_path = Path(out_path)
    Image.fromarray(to_uint8(overlay(image, heatmap)), mode="RGB").save(out_path, format="PNG")
    return out_path


def render_heatmap(heatmap: np.ndarray, out_path) -> Path:
    out_path = Path(out_path)
    Image.fromarray(to_uint8(heatmap), mode="L").save(out_path, format="PNG")
    return out_path
