"""One convolution producing every thing and stuff mask at once.

Dynamic instance filters and the learned stuff filter bank are stacked
into a single k x k convolution over the shared feature map phi, so thing
and stuff logits come out of the same operation on the same grid.
"""

from __future__ import annotations

from dataclasses import dataclass

import torch
import torch.nn.functional as F
from torch import nn

from .errors import ShapeError
from .filters import DynamicFilterSet


@dataclass
class MaskLogits:
    thing_logits: torch.Tensor   # (M, H/4, W/4), rows follow the filter set
    stuff_logits: torch.Tensor   # (N_s, H/4, W/4)


class StuffFilterBank(nn.Module):
    """Trainable stuff filters shaped exactly like the dynamic ones."""

    def __init__(self, num_stuffs: int, kernel_k: int, d_phi: int):
        super().__init__()
        self.num_stuffs = num_stuffs
        self.kernel_k = kernel_k
        self.d_phi = d_phi
        self.weights = nn.Parameter(
            torch.empty(num_stuffs, kernel_k * kernel_k * d_phi))
        self.biases = nn.Parameter(torch.zeros(num_stuffs))
        nn.init.normal_(self.weights, std=0.01)


def _as_conv_weight(flat: torch.Tensor, kernel_k: int,
                    d_phi: int) -> torch.Tensor:
    # rows are (d_phi, k, k) in C order
    return flat.reshape(flat.shape[0], d_phi, kernel_k, kernel_k)


def single_shot_conv(phi: torch.Tensor, things: DynamicFilterSet,
                     stuffs: StuffFilterBank) -> MaskLogits:
    """Apply [thing filters ; stuff bank] as one convolution over phi.

    phi: (d_phi, H/4, W/4) or (1, d_phi, H/4, W/4). An empty filter set is
    fine and yields stuff logits only.
    """
    if phi.dim() == 3:
        phi = phi.unsqueeze(0)
    if phi.dim() != 4 or phi.shape[0] != 1:
        raise ShapeError(f"expected one feature map, got {tuple(phi.shape)}")
    k = stuffs.kernel_k
    d_phi = stuffs.d_phi
    per_filter = k * k * d_phi
    if phi.shape[1] != d_phi:
        raise ShapeError(
            f"feature map has {phi.shape[1]} channels, filters expect {d_phi}")
    if len(things) and things.weights.shape[1] != per_filter:
        raise ShapeError(
            f"dynamic filter length {things.weights.shape[1]}, "
            f"expected {per_filter}")
    if len(things):
        flat = torch.cat([things.weights.to(phi.dtype),
                          stuffs.weights.to(phi.dtype)])
        bias = torch.cat([things.biases.to(phi.dtype),
                          stuffs.biases.to(phi.dtype)])
    else:
        flat = stuffs.weights.to(phi.dtype)
        bias = stuffs.biases.to(phi.dtype)
    weight = _as_conv_weight(flat, k, d_phi)
    out = F.conv2d(phi, weight, bias, padding=k // 2)[0]
    m = len(things)
    return MaskLogits(thing_logits=out[:m], stuff_logits=out[m:])
