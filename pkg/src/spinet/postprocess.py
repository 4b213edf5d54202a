"""From mask logits to a panoptic map, plus PQ/SQ/RQ evaluation.

The merge follows the usual recipe: paint instances best-first, give the
leftover pixels to the argmax stuff class, void out tiny stuff segments.
Evaluation matches segments per class at IoU > 0.5 (which makes matches
unique) and aggregates TP/FP/FN/IoU counters per class across a dataset.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn.functional as F

from .errors import ShapeError
from .synth import PanopticLabel


@dataclass
class SegmentInfo:
    id: int
    class_id: int
    is_thing: bool
    score: float


@dataclass
class PanopticPrediction:
    segment_map: np.ndarray          # (H, W) int32, 0 = void
    segments: list                   # SegmentInfo, ids unique and nonzero

    def to_dict(self) -> dict:
        return {"segments": [vars(s) for s in self.segments]}


def mask_iou(a: np.ndarray, b: np.ndarray) -> float:
    inter = np.logical_and(a, b).sum()
    union = np.logical_or(a, b).sum()
    return float(inter) / float(union) if union else 0.0


def mask_nms(instances: list, iou_threshold: float) -> list:
    """Greedy class-agnostic suppression of (mask, class_id, score) triples.

    Best score first; a candidate is dropped when its mask IoU with any
    kept mask reaches the threshold.
    """
    ordered = sorted(instances, key=lambda item: -item[2])
    kept = []
    for mask, class_id, score in ordered:
        if any(mask_iou(mask, k[0]) >= iou_threshold for k in kept):
            continue
        kept.append((mask, class_id, score))
    return kept


def masks_from_logits(thing_logits: torch.Tensor,
                      image_hw: tuple[int, int]) -> list:
    """Bilinear upsample stride-4 logits to image size, cut at prob 0.5."""
    if thing_logits.shape[0] == 0:
        return []
    up = F.interpolate(thing_logits.unsqueeze(0), size=image_hw,
                       mode="bilinear", align_corners=False)[0]
    probs = torch.sigmoid(up)
    return [(probs[i] >= 0.5).cpu().numpy() for i in range(probs.shape[0])]


def panoptic_merge(instances: list, stuff_probs: np.ndarray,
                   min_thing_area: int = 16,
                   min_stuff_area: int = 64) -> PanopticPrediction:
    """Compose the final map from NMS-filtered instances and stuff scores.

    instances: (mask, class_id, score), already score-sorted or not (they
    are re-sorted here); stuff_probs: (N_s, H, W) where channel c scores
    stuff class c. Instances claim pixels best-first; one is dropped when
    its still-visible area is under min_thing_area or under half its full
    mask. Unclaimed pixels take the argmax stuff class; stuff segments
    under min_stuff_area become void.
    """
    n_s, h, w = stuff_probs.shape
    segment_map = np.zeros((h, w), dtype=np.int32)
    segments = []
    next_id = 1
    claimed = np.zeros((h, w), dtype=bool)
    for mask, class_id, score in sorted(instances, key=lambda item: -item[2]):
        if mask.shape != (h, w):
            raise ShapeError("instance mask size differs from stuff map")
        original = int(mask.sum())
        if original == 0:
            continue
        visible = mask & ~claimed
        area = int(visible.sum())
        if area < min_thing_area or area / original < 0.5:
            continue
        segment_map[visible] = next_id
        claimed |= visible
        segments.append(SegmentInfo(id=next_id, class_id=int(class_id),
                                    is_thing=True, score=float(score)))
        next_id += 1
    free = ~claimed
    if free.any():
        stuff_choice = stuff_probs.argmax(axis=0)
        for c in range(n_s):
            region = free & (stuff_choice == c)
            area = int(region.sum())
            if area == 0 or area < min_stuff_area:
                continue
            segment_map[region] = next_id
            segments.append(SegmentInfo(id=next_id, class_id=c,
                                        is_thing=False, score=1.0))
            next_id += 1
    return PanopticPrediction(segment_map=segment_map, segments=segments)


def label_to_prediction(label: PanopticLabel) -> PanopticPrediction:
    """Ground truth in segment form: one segment per instance, one per
    stuff class present."""
    segment_map = np.zeros(label.semantic_map.shape, dtype=np.int32)
    segments = []
    next_id = 1
    for inst_id in label.instances():
        mask = label.instance_mask(inst_id)
        segment_map[mask] = next_id
        segments.append(SegmentInfo(id=next_id,
                                    class_id=label.instance_class(inst_id),
                                    is_thing=True, score=1.0))
        next_id += 1
    stuff_region = label.instance_map == 0
    for class_id in label.stuff_ids():
        region = stuff_region & (label.semantic_map == class_id)
        if not region.any():
            continue
        segment_map[region] = next_id
        segments.append(SegmentInfo(id=next_id, class_id=class_id,
                                    is_thing=False, score=1.0))
        next_id += 1
    return PanopticPrediction(segment_map=segment_map, segments=segments)


@dataclass
class PQReport:
    pq: float
    sq: float
    rq: float
    pq_thing: float
    pq_stuff: float
    per_class: list = field(default_factory=list)

    def to_dict(self) -> dict:
        return {"pq": self.pq, "sq": self.sq, "rq": self.rq,
                "pq_thing": self.pq_thing, "pq_stuff": self.pq_stuff,
                "per_class": [dict(row) for row in self.per_class]}

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2, sort_keys=True)


class PQAccumulator:
    """Per-class TP/FP/FN/IoU counters aggregated over many images."""

    def __init__(self):
        self.counters: dict = {}
        self.is_thing: dict = {}

    def _row(self, class_id: int, is_thing: bool) -> dict:
        row = self.counters.setdefault(
            class_id, {"tp": 0, "fp": 0, "fn": 0, "iou_sum": 0.0})
        self.is_thing[class_id] = bool(is_thing)
        return row

    def add(self, pred: PanopticPrediction, gt: PanopticPrediction) -> None:
        if pred.segment_map.shape != gt.segment_map.shape:
            raise ShapeError("prediction and ground truth sizes differ")
        matched = _match_segments(pred, gt)
        matched_pred = {p for p, _, _ in matched}
        matched_gt = {g for _, g, _ in matched}
        gt_by_id = {s.id: s for s in gt.segments}
        for pred_id, gt_id, iou in matched:
            seg = gt_by_id[gt_id]
            row = self._row(seg.class_id, seg.is_thing)
            row["tp"] += 1
            row["iou_sum"] += iou
        for seg in pred.segments:
            if seg.id not in matched_pred:
                self._row(seg.class_id, seg.is_thing)["fp"] += 1
        for seg in gt.segments:
            if seg.id not in matched_gt:
                self._row(seg.class_id, seg.is_thing)["fn"] += 1

    def report(self) -> PQReport:
        per_class = []
        pq_all, pq_things, pq_stuffs, sq_all, rq_all = [], [], [], [], []
        for class_id in sorted(self.counters):
            row = self.counters[class_id]
            tp, fp, fn = row["tp"], row["fp"], row["fn"]
            if tp + fp + fn == 0:
                continue
            denom = tp + 0.5 * fp + 0.5 * fn
            sq = row["iou_sum"] / tp if tp else 0.0
            rq = tp / denom
            pq = row["iou_sum"] / denom
            per_class.append({"class_id": class_id, "tp": tp, "fp": fp,
                              "fn": fn, "iou_sum": row["iou_sum"]})
            pq_all.append(pq)
            sq_all.append(sq)
            rq_all.append(rq)
            (pq_things if self.is_thing[class_id] else pq_stuffs).append(pq)

        def mean(vals):
            return float(np.mean(vals)) if vals else 0.0

        return PQReport(pq=mean(pq_all), sq=mean(sq_all), rq=mean(rq_all),
                        pq_thing=mean(pq_things), pq_stuff=mean(pq_stuffs),
                        per_class=per_class)


def _segment_masks(pred: PanopticPrediction) -> dict:
    return {s.id: pred.segment_map == s.id for s in pred.segments}


def _match_segments(pred: PanopticPrediction,
                    gt: PanopticPrediction) -> list:
    """All same-class pairs with void-discounted IoU > 0.5.

    Pred pixels falling on ground-truth void do not count against the
    union. Strict majority overlap makes every match unique on both sides.
    """
    pred_masks = _segment_masks(pred)
    gt_masks = _segment_masks(gt)
    gt_void = gt.segment_map == 0
    pairs = []
    for ps in pred.segments:
        pm = pred_masks[ps.id]
        pm_area = int(pm.sum())
        void_overlap = int(np.logical_and(pm, gt_void).sum())
        for gs in gt.segments:
            if gs.class_id != ps.class_id or gs.is_thing != ps.is_thing:
                continue
            gm = gt_masks[gs.id]
            inter = int(np.logical_and(pm, gm).sum())
            if inter == 0:
                continue
            union = pm_area + int(gm.sum()) - inter - void_overlap
            iou = inter / union if union else 0.0
            if iou > 0.5:
                pairs.append((ps.id, gs.id, iou))
    return pairs


def pq_evaluate(pred: PanopticPrediction, gt: PanopticLabel) -> PQReport:
    acc = PQAccumulator()
    acc.add(pred, label_to_prediction(gt))
    return acc.report()


PRED_VERSION = 1


def save_prediction(path: str, pred: PanopticPrediction) -> None:
    """Sectioned container: JSON segment list, then the raw int32 map."""
    from .blockio import write_sections

    h, w = pred.segment_map.shape
    header = {"version": PRED_VERSION, "height": h, "width": w,
              "segments": [vars(s) for s in pred.segments]}
    write_sections(path, [
        json.dumps(header).encode("utf-8"),
        np.ascontiguousarray(pred.segment_map, dtype="<i4").tobytes(),
    ])


def load_prediction(path: str) -> PanopticPrediction:
    from .blockio import read_sections
    from .errors import FormatError

    sections = read_sections(path, expect=2)
    try:
        header = json.loads(sections[0].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise FormatError(f"bad prediction header: {err}") from err
    if header.get("version") != PRED_VERSION:
        raise FormatError(f"unsupported prediction version "
                          f"{header.get('version')!r}")
    h, w = int(header["height"]), int(header["width"])
    arr = np.frombuffer(sections[1], dtype="<i4")
    if arr.size != h * w:
        raise FormatError(f"segment map holds {arr.size} values, "
                          f"expected {h * w}")
    segments = [SegmentInfo(**row) for row in header["segments"]]
    return PanopticPrediction(
        segment_map=arr.reshape(h, w).astype(np.int32),
        segments=segments)


VOID_GRAY = (128, 128, 128)


def segment_color(segment_id: int) -> tuple[int, int, int]:
    """Deterministic palette: golden-angle hue walk keyed by id."""
    if segment_id == 0:
        return VOID_GRAY
    hue = (segment_id * 0.61803398875) % 1.0
    r, g, b = colorsys.hsv_to_rgb(hue, 0.75, 0.95)
    return int(r * 255), int(g * 255), int(b * 255)


def render(pred: PanopticPrediction, image: np.ndarray, path: str) -> None:
    """Side-by-side input and color-keyed segment overlay, written as PNG."""
    from PIL import Image

    h, w = pred.segment_map.shape
    base = np.clip(image * 255.0, 0, 255).astype(np.uint8)
    overlay = np.zeros((h, w, 3), dtype=np.uint8)
    colors = {0: VOID_GRAY}
    for seg in pred.segments:
        colors[seg.id] = segment_color(seg.id)
    for seg_id, color in colors.items():
        overlay[pred.segment_map == seg_id] = color
    blended = (0.4 * base + 0.6 * overlay).astype(np.uint8)
    canvas = np.concatenate([base, blended], axis=1)
    Image.fromarray(canvas).save(path, format="PNG")
