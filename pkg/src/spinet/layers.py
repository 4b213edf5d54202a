"""Small building blocks shared by the backbone, heads and feature generator."""

from __future__ import annotations

import torch
from torch import nn


def group_norm(channels: int) -> nn.GroupNorm:
    """GroupNorm with the largest group count in {8, 4, 2, 1} dividing channels.

    Groups are additionally required to hold at least two channels each so that
    normalisation statistics stay well defined on 1x1 feature maps at batch
    size one (the coarsest pyramid level during single-image inference).
    """
    for groups in (8, 4, 2, 1):
        if channels % groups == 0 and (channels // groups >= 2 or groups == 1):
            return nn.GroupNorm(groups, channels)
    raise AssertionError("unreachable")


class ConvBlock(nn.Sequential):
    """3x3 conv + GroupNorm + ReLU."""

    def __init__(self, in_channels: int, out_channels: int, stride: int = 1):
        super().__init__(
            nn.Conv2d(in_channels, out_channels, 3, stride=stride, padding=1),
            group_norm(out_channels),
            nn.ReLU(inplace=True),
        )


def positional_encoding(height: int, width: int, *, dtype: torch.dtype = torch.float32,
                        device: torch.device | str = "cpu") -> torch.Tensor:
    """Two-channel absolute coordinate map, each axis normalized to [-1, 1].

    Channel 0 carries the x (width) coordinate, channel 1 the y (height)
    coordinate; an axis of length 1 encodes as 0.
    """
    if height < 1 or width < 1:
        raise ValueError(f"invalid encoding size {height}x{width}")

    def axis(n: int) -> torch.Tensor:
        if n == 1:
            return torch.zeros(1, dtype=dtype, device=device)
        idx = torch.arange(n, dtype=dtype, device=device)
        return 2.0 * idx / (n - 1) - 1.0

    x = axis(width).expand(height, width)
    y = axis(height).unsqueeze(1).expand(height, width)
    return torch.stack([x, y], dim=0)
