"""Multi-task loss: class-weighted CE, Dice + BCE, saliency alignment."""
from __future__ import annotations

from dataclasses import asdict, dataclass
from typing import Sequence

import torch
import torch.nn.functional as F

from .core import ConfigError, ExperimentConfig, ShapeError
from .model import minmax_per_image


@dataclass
class LossBreakdown:
    total: float
    cls: float
    seg_dice: float
    seg_bce: float
    sal: float

    def as_dict(self) -> dict:
        return asdict(self)


def class_weights(counts: Sequence[int]) -> list[float]:
    """Inverse-frequency weights ``N / (K * n_c)``; mean 1 for balanced data."""
    if any(c < 1 for c in counts):
        raise ConfigError(f"class_weights: every class needs at least one sample, got {list(counts)}")
    n, k = sum(counts), len(counts)
    return [n / (k * c) for c in counts]


def weighted_ce(logits: torch.Tensor, labels: torch.Tensor, weights=None) -> torch.Tensor:
    """Batch mean of ``w[y] * -log softmax(logits)[y]`` (not normalised by sum of weights)."""
    nll = -torch.log_softmax(logits, dim=1).gather(1, labels.view(-1, 1)).squeeze(1)
    if weights is not None:
        w = torch.as_tensor(weights, dtype=logits.dtype, device=logits.device)
        nll = w[labels] * nll
    return nll.mean()


def dice_loss(seg_logits: torch.Tensor, mask: torch.Tensor, smooth: float = 1.0) -> torch.Tensor:
    p = torch.sigmoid(seg_logits).flatten(1)
    m = mask.to(p.dtype).flatten(1)
    score = (2 * (p * m).sum(1) + smooth) / (p.sum(1) + m.sum(1) + smooth)
    return (1 - score).mean()


def bce_loss(seg_logits: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    return F.binary_cross_entropy_with_logits(seg_logits, mask.to(seg_logits.dtype))


def downsample_prior(prior: torch.Tensor, size) -> torch.Tensor:
    """Bilinear resize of a B x H x W prior to ``size``, renormalised per image.

    A constant prior (e.g. the all-ones map of the no-saliency ablation) keeps
    its value instead of collapsing to zero.
    """
    if tuple(prior.shape[-2:]) != tuple(size):
        prior = F.interpolate(prior[:, None], size=tuple(size), mode="bilinear",
                              align_corners=False)[:, 0]
    flat = prior.flatten(1)
    constant = (flat.max(1).values == flat.min(1).values).view(-1, *[1] * (prior.dim() - 1))
    return torch.where(constant, prior.clamp(0, 1), minmax_per_image(prior))


def saliency_alignment(attention: torch.Tensor, prior: torch.Tensor) -> torch.Tensor:
    """Mean squared difference between attention and the resized prior."""
    target = downsample_prior(prior.to(attention.dtype), attention.shape[-2:])
    if target.shape != attention.shape:
        raise ShapeError(f"attention {tuple(attention.shape)} vs prior {tuple(target.shape)}")
    return ((attention - target) ** 2).mean()


def total_loss(out, masks: torch.Tensor, labels: torch.Tensor, priors: torch.Tensor,
               cfg: ExperimentConfig, weights=None, lambda_sal: float | None = None):
    """Weighted sum of all terms; returns ``(total tensor, LossBreakdown)``.

    ``masks`` is B x 1 x H x W, ``priors`` B x H x W. ``lambda_sal`` overrides
    the config weight (the no-saliency ablation forces it to zero).
    """
    lam_sal = cfg.lambda_sal if lambda_sal is None else lambda_sal
    cls = weighted_ce(out.cls_logits, labels, weights)
    dice = dice_loss(out.seg_logits, masks, cfg.dice_smooth)
    bce = bce_loss(out.seg_logits, masks)
    sal = saliency_alignment(out.attention, priors)
    total = cfg.lambda_cls * cls + cfg.lambda_seg * (dice + bce)
    if lam_sal:
        total = total + lam_sal * sal
    parts = LossBreakdown(*(float(t.detach()) for t in (total, cls, dice, bce, sal)))
    return total, parts
