"""Training objectives.

Five terms weighted into one total: focal classification over the sampled
locations, a stuff term (bootstrapped cross entropy plus multi-class dice
over stuff pixels), a thing term (dice over sampled instance masks), a
contour term (sub-pixel shuffled boundary map under binary focal loss),
and a triplet term pulling split-mask embeddings of one instance together
while pushing other instances away.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F
from torch import nn

from .config import preset_lambdas
from .errors import ConfigError, ShapeError

DICE_EPS = 1e-6


def dice_loss(probs: torch.Tensor, target: torch.Tensor,
              eps: float = DICE_EPS) -> torch.Tensor:
    """1 - 2*sum(p*y) / (sum(p^2) + sum(y^2) + eps), over all elements."""
    if probs.shape != target.shape:
        raise ShapeError(
            f"dice shapes differ: {tuple(probs.shape)} vs {tuple(target.shape)}")
    num = 2.0 * (probs * target).sum()
    den = probs.pow(2).sum() + target.pow(2).sum() + eps
    return 1.0 - num / den


def thing_mask_loss(logits: torch.Tensor, targets: torch.Tensor) -> torch.Tensor:
    """Mean dice of sigmoid(logits) against binary targets, per sampled pair.

    logits/targets: (M, h, w); M = 0 contributes zero.
    """
    if logits.shape != targets.shape:
        raise ShapeError(
            f"thing loss shapes differ: {tuple(logits.shape)} vs {tuple(targets.shape)}")
    m = logits.shape[0]
    if m == 0:
        return logits.sum() * 0.0
    losses = [dice_loss(torch.sigmoid(logits[i]), targets[i]) for i in range(m)]
    return torch.stack(losses).mean()


def multi_class_dice(stuff_logits: torch.Tensor, stuff_onehot: torch.Tensor,
                     stuff_pixels: torch.Tensor) -> torch.Tensor:
    """Softmax dice across stuff classes, thing pixels excluded entirely.

    stuff_logits: (N_s, h, w); stuff_onehot: same shape, one-hot on stuff
    pixels; stuff_pixels: (h, w) bool. Classes absent from the image are
    skipped and the mean runs over the classes present.
    """
    if stuff_logits.shape != stuff_onehot.shape:
        raise ShapeError("stuff logits and one-hot targets differ in shape")
    if not bool(stuff_pixels.any()):
        return stuff_logits.sum() * 0.0
    probs = torch.softmax(stuff_logits, dim=0)
    sel = stuff_pixels if stuff_pixels.dtype == torch.bool else stuff_pixels > 0
    losses = []
    for c in range(stuff_logits.shape[0]):
        y = stuff_onehot[c][sel]
        if float(y.sum()) == 0.0:
            continue
        losses.append(dice_loss(probs[c][sel], y))
    if not losses:
        return stuff_logits.sum() * 0.0
    return torch.stack(losses).mean()


def bootstrapped_ce(stuff_logits: torch.Tensor, stuff_index: torch.Tensor,
                    stuff_pixels: torch.Tensor, topk_ratio: float) -> torch.Tensor:
    """Cross entropy over stuff pixels, averaging only the hardest share.

    topk_ratio=1 is plain mean CE. stuff_index: (h, w) int64 class indices,
    meaningful only where stuff_pixels is set.
    """
    if not 0.0 < topk_ratio <= 1.0:
        raise ConfigError(f"topk_ratio {topk_ratio} outside (0, 1]")
    sel = stuff_pixels if stuff_pixels.dtype == torch.bool else stuff_pixels > 0
    if not bool(sel.any()):
        return stuff_logits.sum() * 0.0
    flat_logits = stuff_logits.permute(1, 2, 0)[sel]
    flat_index = stuff_index[sel]
    per_pixel = F.cross_entropy(flat_logits, flat_index, reduction="none")
    n = per_pixel.shape[0]
    take = int(np.ceil(topk_ratio * n))
    worst, _ = per_pixel.topk(take)
    return worst.mean()


def binary_focal(logits: torch.Tensor, targets: torch.Tensor,
                 alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Elementwise sigmoid focal loss, no reduction."""
    if logits.shape != targets.shape:
        raise ShapeError("focal logits and targets differ in shape")
    ce = F.binary_cross_entropy_with_logits(logits, targets, reduction="none")
    p = torch.sigmoid(logits)
    p_t = p * targets + (1.0 - p) * (1.0 - targets)
    alpha_t = alpha * targets + (1.0 - alpha) * (1.0 - targets)
    return alpha_t * (1.0 - p_t).pow(gamma) * ce


def focal_classification(logits_by_level: dict, targets_by_level: dict,
                         alpha: float = 0.25,
                         gamma: float = 2.0) -> tuple[torch.Tensor, int]:
    """Sum of focal terms over all levels plus the positive-location count.

    The caller normalizes by max(1, positives), usually across a batch.
    """
    total = None
    positives = 0
    for name, logits in logits_by_level.items():
        targets = targets_by_level[name]
        term = binary_focal(logits, targets, alpha, gamma).sum()
        total = term if total is None else total + term
        positives += int((targets.amax(dim=0) > 0).sum())
    if total is None:
        raise ShapeError("no levels given to focal classification")
    return total, positives


def split_mask(mask: np.ndarray, rng: np.random.Generator,
               max_resample: int = 8):
    """Partition a mask into two nonempty halves with coarse random noise.

    The noise is a Bernoulli(0.5) grid of 8x8 cells stretched over the
    mask. If eight draws all leave a half empty, a random half-plane split
    takes over. Masks under two pixels return None (caller skips).
    """
    mask = mask.astype(bool)
    total = int(mask.sum())
    if total < 2:
        return None
    h, w = mask.shape
    cell_i = np.arange(h) * 8 // h
    cell_j = np.arange(w) * 8 // w
    for _ in range(max_resample):
        noise = rng.integers(0, 2, size=(8, 8)).astype(bool)
        m_r = noise[cell_i[:, None], cell_j[None, :]]
        first = mask & m_r
        second = mask & ~m_r
        if first.any() and second.any():
            return first, second
    theta = float(rng.uniform(0.0, 2.0 * np.pi))
    coords = np.argwhere(mask)
    proj = coords[:, 0] * np.cos(theta) + coords[:, 1] * np.sin(theta)
    order = np.argsort(proj, kind="stable")
    half = total // 2
    first = np.zeros_like(mask)
    second = np.zeros_like(mask)
    sel = coords[order[:half]]
    first[sel[:, 0], sel[:, 1]] = True
    sel = coords[order[half:]]
    second[sel[:, 0], sel[:, 1]] = True
    return first, second


class EmbeddingHead(nn.Module):
    """Shared FC from a masked feature average to the embedding space."""

    def __init__(self, d_phi: int, d_emb: int = 32):
        super().__init__()
        self.fc = nn.Linear(d_phi, d_emb)

    def forward(self, pooled: torch.Tensor) -> torch.Tensor:
        return self.fc(pooled)


def mask_embedding(phi: torch.Tensor, mask: torch.Tensor,
                   head: EmbeddingHead) -> torch.Tensor:
    """Masked per-channel mean of phi (d_phi, h, w), then the FC head."""
    sel = mask if mask.dtype == torch.bool else mask > 0
    if not bool(sel.any()):
        raise ShapeError("mask embedding needs a nonempty mask")
    pooled = phi[:, sel].mean(dim=1)
    return head(pooled)


def intra_triplet(anchors: torch.Tensor, positives: torch.Tensor,
                  negatives: torch.Tensor) -> torch.Tensor:
    """softplus(|a-p| - |a-n|), mean over triplets; rows are embeddings."""
    if not (anchors.shape == positives.shape == negatives.shape):
        raise ShapeError("triplet embedding shapes differ")
    if anchors.shape[0] == 0:
        return anchors.sum() * 0.0
    d_p = (anchors - positives).pow(2).sum(dim=-1).sqrt()
    d_n = (anchors - negatives).pow(2).sum(dim=-1).sqrt()
    return F.softplus(d_p - d_n).mean()


class ContourHead(nn.Module):
    """1x1 conv to 16 channels; pixel shuffle restores full resolution."""

    def __init__(self, d_phi: int):
        super().__init__()
        self.conv = nn.Conv2d(d_phi, 16, 1)

    def forward(self, phi: torch.Tensor) -> torch.Tensor:
        if phi.dim() == 3:
            phi = phi.unsqueeze(0)
        out = F.pixel_shuffle(self.conv(phi), 4)
        return out[:, 0]


def contour_loss(shuffled_logits: torch.Tensor, contour_gt: torch.Tensor,
                 alpha: float = 0.25, gamma: float = 2.0) -> torch.Tensor:
    """Binary focal loss of the full-resolution contour map, mean over all
    pixels (ignored border pixels carry zero targets and still count)."""
    if shuffled_logits.shape != contour_gt.shape:
        raise ShapeError(
            f"contour map {tuple(shuffled_logits.shape)} does not match "
            f"ground truth {tuple(contour_gt.shape)}")
    return binary_focal(shuffled_logits, contour_gt, alpha, gamma).mean()


@dataclass
class LossReport:
    cls: float
    stuff_ce: float
    stuff_mcd: float
    thing_dice: float
    inter_contour: float
    intra_triplet: float
    total: float
    counts: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return {
            "cls": self.cls,
            "stuff_ce": self.stuff_ce,
            "stuff_mcd": self.stuff_mcd,
            "thing_dice": self.thing_dice,
            "inter_contour": self.inter_contour,
            "intra_triplet": self.intra_triplet,
            "total": self.total,
            "counts": dict(self.counts),
        }


def total_loss(components: dict, preset: str, lambdas=None,
               counts=None) -> tuple[torch.Tensor, LossReport]:
    """Weighted sum of the five terms under a preset's coefficients.

    components: tensors (or floats) keyed cls, stuff_ce, stuff_mcd,
    thing_dice, inter_contour, intra_triplet. "custom" requires explicit
    lambdas; named presets ignore the argument.
    """
    fixed = preset_lambdas(preset)
    if fixed is not None:
        lambdas = fixed
    elif lambdas is None:
        raise ConfigError("custom preset needs explicit loss coefficients")
    vals = {k: torch.as_tensor(v, dtype=torch.float64)
            if not torch.is_tensor(v) else v
            for k, v in components.items()}
    l0, l1, l2, l3, l4 = lambdas
    # zero-weighted terms stay out of the graph entirely, so parameters
    # reachable only through them receive no gradient (and no decay)
    pairs = [(l0, vals["cls"]),
             (l1, vals["stuff_ce"] + vals["stuff_mcd"]),
             (l2, vals["thing_dice"]),
             (l3, vals["inter_contour"]),
             (l4, vals["intra_triplet"])]
    terms = [lam * term for lam, term in pairs if lam != 0.0]
    total = sum(terms) if terms else vals["cls"] * 0.0
    def scalar(t: torch.Tensor) -> float:
        return float(t.detach())

    report = LossReport(
        cls=scalar(vals["cls"]),
        stuff_ce=scalar(vals["stuff_ce"]),
        stuff_mcd=scalar(vals["stuff_mcd"]),
        thing_dice=scalar(vals["thing_dice"]),
        inter_contour=scalar(vals["inter_contour"]),
        intra_triplet=scalar(vals["intra_triplet"]),
        total=scalar(total),
        counts=dict(counts or {"sampled_filter_sets": 0, "triplet_sets": 0}),
    )
    return total, report
