"""Unified feature map for mask prediction.

P2..P5 are each passed through a 3x3 conv, brought to stride 8 by bilinear
upsampling where needed, and summed. The merged map gets a two-channel
absolute coordinate encoding concatenated (per-instance relative
coordinates are deliberately not used: one shared map must serve every
thing and stuff at once), then two 3x3 convs, then a stride-2 transposed
conv down to stride 4 producing the final phi with ``d_phi`` channels.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .backbone import FeaturePyramid
from .errors import ShapeError
from .layers import ConvBlock, positional_encoding

MERGE_LEVELS = ("P2", "P3", "P4", "P5")


@dataclass
class PanopticFeatureMap:
    """phi: (B, d_phi, H/4, W/4), stride 4."""

    phi: torch.Tensor
    stride: int = 4


class PanopticFeatureGenerator(nn.Module):
    def __init__(self, fpn_channels: int, internal_channels: int = 64, d_phi: int = 16):
        super().__init__()
        self.d_phi = d_phi
        self.level_convs = nn.ModuleDict({
            name: ConvBlock(fpn_channels, internal_channels) for name in MERGE_LEVELS
        })
        self.merge1 = ConvBlock(internal_channels + 2, internal_channels)
        self.merge2 = ConvBlock(internal_channels, internal_channels)
        # no nonlinearity after the deconv; logits heads follow
        self.deconv = nn.ConvTranspose2d(internal_channels, d_phi, 2, stride=2)

    def forward(self, pyramid: FeaturePyramid,
                return_internals: bool = False):
        missing = [name for name in MERGE_LEVELS if name not in pyramid]
        if missing:
            raise ShapeError(f"panoptic feature generator needs levels {missing}")
        base = pyramid["P3"]  # stride-8 reference resolution
        target = base.shape[-2:]
        merged = None
        for name in MERGE_LEVELS:
            x = self.level_convs[name](pyramid[name])
            if x.shape[-2:] != target:
                x = F.interpolate(x, size=target, mode="bilinear", align_corners=False)
            merged = x if merged is None else merged + x
        enc = positional_encoding(target[0], target[1], dtype=merged.dtype,
                                  device=merged.device)
        enc = enc.unsqueeze(0).expand(merged.shape[0], -1, -1, -1)
        x = torch.cat([merged, enc], dim=1)
        x = self.merge1(x)
        stride8 = self.merge2(x)
        phi = self.deconv(stride8)
        if return_internals:
            return PanopticFeatureMap(phi=phi), {"merged": merged, "stride8": stride8}
        return PanopticFeatureMap(phi=phi)


def count_parameters(module: nn.Module) -> int:
    return sum(p.numel() for p in module.parameters())


def generator_parameter_counts(fpn_channels: int, internal_channels: int,
                               d_phi: int) -> tuple[int, int]:
    """Parameter cost of one shared generator vs. two task-specific ones.

    The separated variant mirrors a design with one feature map for things
    and another for stuffs at identical widths.
    """
    integrated = count_parameters(
        PanopticFeatureGenerator(fpn_channels, internal_channels, d_phi))
    separated = count_parameters(nn.ModuleList([
        PanopticFeatureGenerator(fpn_channels, internal_channels, d_phi),
        PanopticFeatureGenerator(fpn_channels, internal_channels, d_phi),
    ]))
    return integrated, separated
