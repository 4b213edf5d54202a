"""Instance filter sampling: class/filter heads, pooling, FC projection.

Every pyramid level is scored by a shared classification head. A parallel
filter head (also shared, fed the level's coordinate encoding) emits a
D_f-channel map from which k x k neighborhoods are pooled into k^2*D_f
vectors at chosen locations only; a single FC layer turns each vector into
k^2*d_phi convolution weights plus one bias. Locations come from ground
truth at train time and from thresholded class scores at inference.
"""

from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .backbone import LEVEL_STRIDES
from .errors import ShapeError
from .layers import ConvBlock, positional_encoding
from .synth import PanopticLabel

# sqrt(instance area) upper bounds for level assignment; P2 takes no
# instances (its tier routes to P3) and P6, when used, splits P5's tier
_TIER_BOUNDS = {"P3": 64.0, "P4": 128.0, "P5": 256.0, "P6": float("inf")}


class DenseHead(nn.Module):
    """Four conv+GN+ReLU blocks and a 3x3 prediction conv, shared by levels."""

    def __init__(self, in_channels: int, width: int, out_channels: int,
                 num_blocks: int = 4):
        super().__init__()
        blocks = []
        for i in range(num_blocks):
            blocks.append(ConvBlock(in_channels if i == 0 else width, width))
        self.tower = nn.Sequential(*blocks)
        self.predict = nn.Conv2d(width, out_channels, 3, padding=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.predict(self.tower(x))


class ClassHead(nn.Module):
    """Per-location thing-class logits, one map per level."""

    def __init__(self, fpn_channels: int, num_things: int,
                 prior_prob: float = 0.01):
        super().__init__()
        self.head = DenseHead(fpn_channels, fpn_channels, num_things)
        # rare-positive prior keeps early focal loss from swamping training
        bias = -float(np.log((1.0 - prior_prob) / prior_prob))
        nn.init.constant_(self.head.predict.bias, bias)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        return self.head(feature)


class FilterHead(nn.Module):
    """D_f-channel filter feature map; input gets coordinate channels."""

    def __init__(self, fpn_channels: int, d_f: int):
        super().__init__()
        self.head = DenseHead(fpn_channels + 2, fpn_channels, d_f)

    def forward(self, feature: torch.Tensor) -> torch.Tensor:
        b, _, h, w = feature.shape
        enc = positional_encoding(h, w, dtype=feature.dtype,
                                  device=feature.device)
        enc = enc.unsqueeze(0).expand(b, -1, -1, -1)
        return self.head(torch.cat([feature, enc], dim=1))


def pool_filter(fmap: torch.Tensor, i: int, j: int, k: int) -> torch.Tensor:
    """k x k window of a (C, H, W) map centered at (i, j), flattened.

    Layout: spatial taps row-major, channels innermost, so index
    (di*k + dj)*C + c. Out-of-bounds taps are zero. k=1 degenerates to the
    channel vector at (i, j).
    """
    return pool_filters(fmap, np.array([[i, j]], dtype=np.int64), k)[0]


def pool_filters(fmap: torch.Tensor, locations: np.ndarray,
                 k: int) -> torch.Tensor:
    if k % 2 != 1:
        raise ShapeError(f"pooling window must be odd, got {k}")
    c, h, w = fmap.shape
    for i, j in locations:
        if not (0 <= i < h and 0 <= j < w):
            raise ShapeError(f"pool location ({i}, {j}) outside {h}x{w} map")
    r = k // 2
    padded = F.pad(fmap, (r, r, r, r)) if r else fmap
    rows = []
    for i, j in locations:
        window = padded[:, i:i + k, j:j + k]
        rows.append(window.permute(1, 2, 0).reshape(-1))
    if not rows:
        return fmap.new_zeros((0, k * k * c))
    return torch.stack(rows)


class FilterProjection(nn.Module):
    """Shared FC mapping a pooled k^2*d_f vector to k^2*d_phi weights + bias.

    Applied only to sampled rows, never densely over a grid.
    """

    def __init__(self, kernel_k: int, d_f: int, d_phi: int):
        super().__init__()
        self.kernel_k = kernel_k
        self.d_phi = d_phi
        self.fc = nn.Linear(kernel_k * kernel_k * d_f,
                            kernel_k * kernel_k * d_phi + 1)

    def forward(self, raw: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        expected = self.fc.in_features
        if raw.shape[-1] != expected:
            raise ShapeError(
                f"pooled filter length {raw.shape[-1]}, expected {expected}")
        out = self.fc(raw)
        return out[..., :-1], out[..., -1]


@dataclass
class DynamicFilterSet:
    """Projected instance filters plus their provenance, in row order."""

    weights: torch.Tensor            # (M, k^2 * d_phi)
    biases: torch.Tensor             # (M,)
    sources: list                    # (level, i, j) per row
    class_ids: list                  # thing class index per row
    scores: list                     # confidence per row, 1.0 at train time
    instance_ids: Optional[list] = None  # ground-truth pairing, train only

    def __len__(self) -> int:
        return self.weights.shape[0]


def empty_filter_set(kernel_k: int, d_phi: int, device=None,
                     dtype=None) -> DynamicFilterSet:
    size = kernel_k * kernel_k * d_phi
    return DynamicFilterSet(
        weights=torch.zeros((0, size), device=device, dtype=dtype),
        biases=torch.zeros((0,), device=device, dtype=dtype),
        sources=[], class_ids=[], scores=[], instance_ids=[])


def center_grid_mask(mask: np.ndarray, stride: int,
                     grid_hw: tuple[int, int]) -> np.ndarray:
    """Boolean grid marking level cells whose center pixel lies in mask."""
    h, w = mask.shape
    gh, gw = grid_hw
    off = stride // 2
    ys = np.arange(gh) * stride + off
    xs = np.arange(gw) * stride + off
    out = np.zeros((gh, gw), dtype=bool)
    yv = ys < h
    xv = xs < w
    if yv.any() and xv.any():
        out[np.ix_(yv, xv)] = mask[np.ix_(ys[yv], xs[xv])] != 0
    return out


def assign_level(sqrt_area: float, filter_levels: tuple[str, ...]) -> str:
    eligible = [name for name in ("P3", "P4", "P5", "P6")
                if name in filter_levels]
    if not eligible:
        raise ShapeError(f"no assignable level in {filter_levels}")
    has_p6 = "P6" in eligible
    for name in eligible:
        bound = _TIER_BOUNDS[name]
        if name == "P5" and not has_p6:
            bound = float("inf")
        if sqrt_area < bound:
            return name
    return eligible[-1]


@dataclass
class InstanceAssignment:
    instance_id: int
    class_index: int        # 0-based thing channel
    level: str
    locations: np.ndarray   # (P, 2) int64 grid coordinates (i, j)


def assign_instances(label: PanopticLabel, filter_levels: tuple[str, ...],
                     level_shapes: dict) -> tuple[list, int]:
    """Assign each instance to a pyramid level and list positive cells.

    Returns the assignments plus the count of instances skipped because
    no grid center fell inside their mask.
    """
    num_stuffs = label.num_stuffs()
    assignments = []
    skipped = 0
    for inst_id in label.instances():
        mask = label.instance_mask(inst_id)
        area = int(mask.sum())
        level = assign_level(float(np.sqrt(area)), filter_levels)
        grid = center_grid_mask(mask, LEVEL_STRIDES[level],
                                level_shapes[level])
        locations = np.argwhere(grid).astype(np.int64)
        if locations.shape[0] == 0:
            skipped += 1
            continue
        class_index = label.instance_class(inst_id) - num_stuffs
        assignments.append(InstanceAssignment(
            instance_id=inst_id, class_index=class_index,
            level=level, locations=locations))
    return assignments, skipped


def build_class_targets(assignments: list, num_things: int,
                        level_shapes: dict, filter_levels: tuple[str, ...],
                        device=None) -> dict:
    """One-hot (N_t, H_l, W_l) classification targets per level."""
    targets = {
        name: torch.zeros((num_things,) + tuple(level_shapes[name]),
                          device=device)
        for name in filter_levels
    }
    for a in assignments:
        t = targets[a.level]
        t[a.class_index, a.locations[:, 0], a.locations[:, 1]] = 1.0
    return targets


def sample_locations(assignment: InstanceAssignment, samples_per_instance: int,
                     rng: np.random.Generator) -> np.ndarray:
    """Uniform draw without replacement, capped by availability."""
    n = assignment.locations.shape[0]
    take = min(samples_per_instance, n)
    idx = rng.choice(n, size=take, replace=False)
    return assignment.locations[np.sort(idx)]


def sample_inference(prob_maps: dict, filter_maps: dict,
                     projection: FilterProjection, kernel_k: int,
                     threshold: float, max_detections: int) -> DynamicFilterSet:
    """Entries for every location whose best class probability clears the
    threshold, best-first, capped at max_detections before projection."""
    if not 0.0 < threshold < 1.0:
        raise ShapeError(f"score threshold {threshold} outside (0, 1)")
    candidates = []
    for name, probs in prob_maps.items():
        best, cls = probs.max(dim=0)
        keep = best >= threshold
        for i, j in torch.nonzero(keep, as_tuple=False).tolist():
            candidates.append((float(best[i, j]), int(cls[i, j]),
                               name, i, j))
    candidates.sort(key=lambda c: -c[0])
    candidates = candidates[:max_detections]
    any_map = next(iter(filter_maps.values()))
    if not candidates:
        return empty_filter_set(kernel_k, projection.d_phi,
                                device=any_map.device, dtype=any_map.dtype)
    pooled = torch.stack([
        pool_filter(filter_maps[name], i, j, kernel_k)
        for _, _, name, i, j in candidates
    ])
    weights, biases = projection(pooled)
    return DynamicFilterSet(
        weights=weights, biases=biases,
        sources=[(name, i, j) for _, _, name, i, j in candidates],
        class_ids=[cls for _, cls, _, _, _ in candidates],
        scores=[score for score, _, _, _, _ in candidates],
        instance_ids=None)
