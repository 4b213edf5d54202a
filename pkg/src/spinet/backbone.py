"""Convolutional backbone and the modified feature pyramid.

The backbone is a small four-stage stand-in for a classification network:
a stride-2 stem followed by four stages, each a stride-2 downsampling conv
plus one more 3x3 conv, producing C2..C5 at strides 4/8/16/32.

The pyramid differs from a stock FPN in one way: P2 is built by spatially
halving the lateral C2 projection and summing it with P3, so P2 and P3
share the stride-8 resolution. An optional P6 extends the pyramid with a
stride-2 conv on P5.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError
from .layers import ConvBlock

LEVEL_STRIDES = {"P2": 8, "P3": 8, "P4": 16, "P5": 32, "P6": 64}


@dataclass
class FeaturePyramid:
    """Ordered multi-scale feature maps with their strides."""

    levels: dict[str, torch.Tensor] = field(default_factory=dict)

    def __getitem__(self, name: str) -> torch.Tensor:
        return self.levels[name]

    def __contains__(self, name: str) -> bool:
        return name in self.levels

    def names(self) -> list[str]:
        return list(self.levels)

    def stride(self, name: str) -> int:
        return LEVEL_STRIDES[name]


class Backbone(nn.Module):
    """Four-stage conv encoder returning {C2: stride 4 .. C5: stride 32}."""

    def __init__(self, widths: tuple[int, ...] = (32, 64, 128, 256), in_channels: int = 3):
        super().__init__()
        if len(widths) != 4:
            raise ShapeError(f"backbone needs four stage widths, got {widths}")
        self.widths = tuple(widths)
        self.stem = ConvBlock(in_channels, widths[0], stride=2)
        stages = []
        prev = widths[0]
        for w in widths:
            stages.append(nn.Sequential(ConvBlock(prev, w, stride=2), ConvBlock(w, w)))
            prev = w
        self.stages = nn.ModuleList(stages)

    def forward(self, image: torch.Tensor) -> dict[str, torch.Tensor]:
        if image.dim() != 4:
            raise ShapeError(f"expected (B, 3, H, W) input, got shape {tuple(image.shape)}")
        h, w = image.shape[-2:]
        if h % 32 or w % 32:
            raise ShapeError(f"input size {h}x{w} is not divisible by 32")
        x = self.stem(image)
        feats = {}
        for idx, stage in enumerate(self.stages):
            x = stage(x)
            feats[f"C{idx + 2}"] = x
        return feats


class ModifiedFPN(nn.Module):
    """Top-down pyramid with the halved-C2 construction of P2."""

    def __init__(self, widths: tuple[int, ...], channels: int, include_p6: bool = False):
        super().__init__()
        self.channels = channels
        self.include_p6 = include_p6
        self.lateral = nn.ModuleDict({
            f"C{i}": nn.Conv2d(widths[i - 2], channels, 1) for i in range(2, 6)
        })
        self.smooth = nn.ModuleDict({
            f"P{i}": nn.Conv2d(channels, channels, 3, padding=1) for i in range(2, 6)
        })
        if include_p6:
            self.p6_conv = nn.Conv2d(channels, channels, 3, stride=2, padding=1)

    def forward(self, feats: dict[str, torch.Tensor]) -> FeaturePyramid:
        m5 = self.lateral["C5"](feats["C5"])
        m4 = self.lateral["C4"](feats["C4"]) + F.interpolate(m5, scale_factor=2, mode="nearest")
        m3 = self.lateral["C3"](feats["C3"]) + F.interpolate(m4, scale_factor=2, mode="nearest")
        p5 = self.smooth["P5"](m5)
        p4 = self.smooth["P4"](m4)
        p3 = self.smooth["P3"](m3)
        # halve C2 spatially so it can join the top-down path at stride 8
        c2_half = F.avg_pool2d(self.lateral["C2"](feats["C2"]), kernel_size=2)
        p2 = self.smooth["P2"](c2_half + p3)
        levels = {"P2": p2, "P3": p3, "P4": p4, "P5": p5}
        if self.include_p6:
            levels["P6"] = self.p6_conv(p5)
        return FeaturePyramid(levels=levels)


class BackboneFPN(nn.Module):
    """Backbone plus pyramid in one module."""

    def __init__(self, widths: tuple[int, ...] = (32, 64, 128, 256),
                 fpn_channels: int = 64, include_p6: bool = False):
        super().__init__()
        self.backbone = Backbone(widths)
        self.fpn = ModifiedFPN(widths, fpn_channels, include_p6)

    def forward(self, image: torch.Tensor) -> FeaturePyramid:
        return self.fpn(self.backbone(image))
