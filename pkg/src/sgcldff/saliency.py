"""Low-level saliency prior (colour contrast + edges) and input gating."""
from __future__ import annotations

import numpy as np
from scipy import ndimage

from .core import ShapeError

LUMA = np.array([0.299, 0.587, 0.114])


def minmax(x: np.ndarray) -> np.ndarray:
    """Min-max normalise to [0, 1]; a constant array maps to zeros."""
    x = np.asarray(x, dtype=np.float64)
    lo, hi = x.min(), x.max()
    if not hi > lo:
        return np.zeros_like(x)
    return (x - lo) / (hi - lo)


def color_contrast(image: np.ndarray) -> np.ndarray:
    """Euclidean distance of each pixel colour from the image-mean colour."""
    rgb = np.asarray(image, dtype=np.float64)[..., :3]
    flat = rgb.reshape(-1, 3)
    lo = flat.min(axis=0)
    mu = lo + (flat - lo).mean(axis=0)  # exact for constant channels
    return np.sqrt(((rgb - mu) ** 2).sum(axis=-1))


def edge_magnitude(image: np.ndarray) -> np.ndarray:
    """Sobel gradient magnitude of the luminance, reflect-padded."""
    rgb = np.asarray(image, dtype=np.float64)[..., :3]
    if rgb.shape[0] < 3 or rgb.shape[1] < 3:
        raise ShapeError(f"edge_magnitude needs H, W >= 3, got {rgb.shape[:2]}")
    lum = rgb @ LUMA
    gx = ndimage.sobel(lum, axis=1, mode="reflect")
    gy = ndimage.sobel(lum, axis=0, mode="reflect")
    return np.hypot(gx, gy)


def saliency_prior(image: np.ndarray, alpha: float = 0.5, beta: float = 0.5,
                   smooth_sigma: float = 0.0) -> np.ndarray:
    """Blend normalised colour contrast and edge maps, blur, renormalise.

    Returns an H x W float64 map in [0, 1] whose maximum is 1 unless the map
    is identically zero.
    """
    if not alpha + beta > 0:
        raise ValueError("alpha + beta must be > 0")
    s = alpha * minmax(color_contrast(image)) + beta * minmax(edge_magnitude(image))
    if smooth_sigma > 0:
        s = ndimage.gaussian_filter(s, smooth_sigma, mode="reflect")
    return minmax(s)


def gate_input(image: np.ndarray, saliency: np.ndarray, floor: float = 0.3) -> np.ndarray:
    """Scale RGB by ``floor + (1 - floor) * S`` and append S as a fourth channel."""
    rgb = np.asarray(image)[..., :3]
    s = np.asarray(saliency)
    if rgb.shape[:2] != s.shape:
        raise ShapeError(f"image {rgb.shape[:2]} and saliency {s.shape} differ")
    if not 0 <= floor <= 1:
        raise ValueError("floor must lie in [0, 1]")
    # algebraically floor + (1 - floor) * s, but exact at both endpoints
    gain = s + floor * (1.0 - s)
    return np.concatenate([rgb * gain[..., None], s[..., None]], axis=-1)
