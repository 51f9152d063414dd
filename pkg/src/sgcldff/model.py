"""Hybrid conv/windowed-attention backbone, cross-layer fusion and the two heads."""
from __future__ import annotations

import math
from typing import NamedTuple

import torch
import torch.nn as nn
import torch.nn.functional as F

from .core import ExperimentConfig, ShapeError

ABLATIONS = ("full", "no_saliency", "no_fusion")


class FeaturePyramid(NamedTuple):
    stages: list[torch.Tensor]
    fused: torch.Tensor


class ModelOutput(NamedTuple):
    seg_logits: torch.Tensor  # B x 1 x H x W
    cls_logits: torch.Tensor  # B x K
    pyramid: FeaturePyramid
    attention: torch.Tensor  # B x H/4 x W/4, in [0, 1]


def minmax_per_image(x: torch.Tensor) -> torch.Tensor:
    """Min-max normalise each leading-dim slice; constant slices become zero."""
    flat = x.flatten(1)
    lo = flat.min(dim=1, keepdim=True).values
    hi = flat.max(dim=1, keepdim=True).values
    span = hi - lo
    ok = span > 0
    out = torch.where(ok, (flat - lo) / torch.where(ok, span, torch.ones_like(span)),
                      torch.zeros_like(flat))
    return out.view_as(x)


class DSConvBlock(nn.Module):
    """Pre-norm depthwise-separable conv with a residual connection."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.GroupNorm(1, ch)
        self.dw = nn.Conv2d(ch, ch, 3, padding=1, groups=ch)
        self.pw = nn.Conv2d(ch, ch, 1)

    def forward(self, x):
        return x + self.pw(F.gelu(self.dw(self.norm(x))))


class WindowAttention(nn.Module):
    def __init__(self, ch: int, heads: int, window: int):
        super().__init__()
        self.heads, self.window = heads, window
        self.scale = (ch // heads) ** -0.5
        self.qkv = nn.Linear(ch, 3 * ch)
        self.proj = nn.Linear(ch, ch)

    def forward(self, x):  # x: B x H x W x C
        b, h, w, c = x.shape
        ws = self.window
        win = (x.view(b, h // ws, ws, w // ws, ws, c)
               .permute(0, 1, 3, 2, 4, 5).reshape(-1, ws * ws, c))
        qkv = self.qkv(win).view(win.shape[0], ws * ws, 3, self.heads, c // self.heads)
        q, k, v = qkv.permute(2, 0, 3, 1, 4)
        attn = torch.softmax((q * self.scale) @ k.transpose(-2, -1), dim=-1)
        out = (attn @ v).transpose(1, 2).reshape(win.shape[0], ws * ws, c)
        out = self.proj(out)
        return (out.view(b, h // ws, w // ws, ws, ws, c)
                .permute(0, 1, 3, 2, 4, 5).reshape(b, h, w, c))


class SwinBlock(nn.Module):
    """Non-shifted windowed MHSA + MLP (ratio 2), both pre-norm residual."""

    def __init__(self, ch: int, window: int, mlp_ratio: int = 2):
        super().__init__()
        heads = max(1, ch // 16)
        self.norm1 = nn.LayerNorm(ch)
        self.attn = WindowAttention(ch, heads, window)
        self.norm2 = nn.LayerNorm(ch)
        self.fc1 = nn.Linear(ch, mlp_ratio * ch)
        self.fc2 = nn.Linear(mlp_ratio * ch, ch)

    def forward(self, x):  # B x C x H x W
        t = x.permute(0, 2, 3, 1)
        t = t + self.attn(self.norm1(t))
        t = t + self.fc2(F.gelu(self.fc1(self.norm2(t))))
        return t.permute(0, 3, 1, 2)


class PatchMerging(nn.Module):
    """2x2 neighbourhood concat + linear, halving resolution and doubling channels."""

    def __init__(self, ch: int):
        super().__init__()
        self.norm = nn.LayerNorm(4 * ch)
        self.reduce = nn.Linear(4 * ch, 2 * ch)

    def forward(self, x):
        t = x.permute(0, 2, 3, 1)
        t = torch.cat([t[:, 0::2, 0::2], t[:, 1::2, 0::2], t[:, 0::2, 1::2], t[:, 1::2, 1::2]], -1)
        return self.reduce(self.norm(t)).permute(0, 3, 1, 2)


class Stage(nn.Module):
    """Optional patch merging, then a conv block and a windowed-attention block."""

    def __init__(self, ch: int, window: int, merge: bool):
        super().__init__()
        self.merge = PatchMerging(ch // 2) if merge else None
        self.conv = DSConvBlock(ch)
        self.attn = SwinBlock(ch, window)

    def forward(self, x):
        if self.merge is not None:
            x = self.merge(x)
        return self.attn(self.conv(x))


class Backbone(nn.Module):
    def __init__(self, in_ch: int, ch: int, window: int, image_size: int):
        super().__init__()
        for i in range(4):
            side = image_size // 2 ** (i + 2)
            if side % window:
                raise ShapeError(f"window {window} does not divide stage {i} side {side}")
        self.image_size = image_size
        self.stem = nn.Sequential(nn.Conv2d(in_ch, ch, 3, stride=2, padding=1), nn.GELU(),
                                  nn.Conv2d(ch, ch, 3, stride=2, padding=1))
        for i in range(4):
            setattr(self, f"stage{i}", Stage(ch * 2 ** i, window, merge=i > 0))

    def forward(self, x):
        if x.shape[-2:] != (self.image_size, self.image_size):
            raise ShapeError(f"expected {self.image_size}x{self.image_size} input, got {tuple(x.shape[-2:])}")
        feats = []
        x = self.stem(x)
        for i in range(4):
            x = getattr(self, f"stage{i}")(x)
            feats.append(x)
        return feats


class CrossLayerFusion(nn.Module):
    """Grouped 1x1 projections of every stage, upsampled and summed, then a
    grouped ResNeXt-style residual refinement."""

    def __init__(self, ch: int, dim: int, groups: int):
        super().__init__()
        if dim % groups:
            raise ShapeError(f"fusion dim {dim} not divisible by cardinality {groups}")
        for i in range(4):
            if (ch * 2 ** i) % groups:
                raise ShapeError(f"stage {i} width {ch * 2 ** i} not divisible by cardinality {groups}")
        self.proj = nn.ModuleList(nn.Conv2d(ch * 2 ** i, dim, 1, groups=groups) for i in range(4))
        self.reduce = nn.Conv2d(dim, dim, 1)
        self.grouped = nn.Conv2d(dim, dim, 3, padding=1, groups=groups)
        self.expand = nn.Conv2d(dim, dim, 1)

    def project(self, stages, which=range(4)):
        size = stages[0].shape[-2:]
        total = 0
        for i in which:
            p = self.proj[i](stages[i])
            if p.shape[-2:] != size:
                p = F.interpolate(p, size=size, mode="bilinear", align_corners=False)
            total = total + p
        return total

    def refine(self, x):
        return F.relu(x + self.expand(F.gelu(self.grouped(F.gelu(self.reduce(x))))))

    def forward(self, stages):
        return self.refine(self.project(stages))


class SegHead(nn.Module):
    def __init__(self, dim: int):
        super().__init__()
        self.conv1 = nn.Conv2d(dim, dim // 2, 3, padding=1)
        self.conv2 = nn.Conv2d(dim // 2, dim // 4, 3, padding=1)
        self.out = nn.Conv2d(dim // 4, 1, 1)

    def forward(self, x):
        for conv in (self.conv1, self.conv2):
            x = F.interpolate(x, scale_factor=2, mode="bilinear", align_corners=False)
            x = F.gelu(conv(x))
        return self.out(x)


class ClsHead(nn.Module):
    def __init__(self, dim: int, deep_ch: int, num_classes: int):
        super().__init__()
        self.fc = nn.Linear(dim + deep_ch, num_classes)

    def forward(self, fused, deepest):
        pooled = torch.cat([fused.mean(dim=(2, 3)), deepest.mean(dim=(2, 3))], dim=1)
        return self.fc(pooled)


class SGCLDFF(nn.Module):
    """Full network: 4-channel (RGB + saliency) input to segmentation and class logits."""

    def __init__(self, cfg: ExperimentConfig, ablation: str = "full", in_channels: int = 4):
        super().__init__()
        if ablation not in ABLATIONS:
            raise ValueError(f"unknown ablation {ablation!r}")
        self.ablation = ablation
        c, d = cfg.base_channels, cfg.fusion_dim
        self.backbone = Backbone(in_channels, c, cfg.window_size, cfg.image_size)
        self.fusion = CrossLayerFusion(c, d, cfg.fusion_cardinality)
        self.seg_head = SegHead(d)
        self.cls_head = ClsHead(d, 8 * c, cfg.num_classes)
        self.reset_parameters()

    def reset_parameters(self):
        """Fan-in uniform weights, zero biases, unit norm scales, zero classifier."""
        for m in self.modules():
            if isinstance(m, (nn.Conv2d, nn.Linear)):
                fan_in = m.weight[0].numel()
                bound = math.sqrt(3.0 / fan_in)
                nn.init.uniform_(m.weight, -bound, bound)
                if m.bias is not None:
                    nn.init.zeros_(m.bias)
            elif isinstance(m, (nn.LayerNorm, nn.GroupNorm)):
                nn.init.ones_(m.weight)
                nn.init.zeros_(m.bias)
        # zero classifier: keeps the class weight vectors summing to zero, so a
        # feature shared by all classes contributes nothing to any class map
        nn.init.zeros_(self.cls_head.fc.weight)

    def fuse(self, stages):
        if self.ablation == "no_fusion":
            return self.fusion.project(stages, which=(0,))
        return self.fusion(stages)

    def forward(self, x) -> ModelOutput:
        stages = self.backbone(x)
        fused = self.fuse(stages)
        seg = self.seg_head(fused)
        cls = self.cls_head(fused, stages[3])
        attention = minmax_per_image(fused.mean(dim=1))
        return ModelOutput(seg, cls, FeaturePyramid(stages, fused), attention)


def build_model(cfg: ExperimentConfig, ablation: str = "full", seed: int | None = None) -> SGCLDFF:
    """Construct a model, drawing initial weights from ``seed`` when given."""
    if seed is None:
        return SGCLDFF(cfg, ablation)
    state = torch.random.get_rng_state()
    torch.manual_seed(seed)
    try:
        return SGCLDFF(cfg, ablation)
    finally:
        torch.random.set_rng_state(state)


def param_count(model: nn.Module) -> int:
    return sum(p.numel() for p in model.parameters() if p.requires_grad)


def model_weights(model: nn.Module) -> dict:
    return {k: v.detach().cpu().numpy() for k, v in model.state_dict().items()}


def load_weights(model: nn.Module, weights: dict) -> nn.Module:
    model.load_state_dict({k: torch.as_tensor(v) for k, v in weights.items()})
    return model
