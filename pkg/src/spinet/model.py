"""Full network: pyramid, heads, shared feature, single-shot masks, losses.

Training samples filters at ground-truth foreground cells and scores the
five objectives; inference thresholds the class maps, projects filters at
the surviving locations only, and hands the masks to post-processing.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch
from torch import nn

from .backbone import BackboneFPN
from .config import RunConfig
from .errors import ShapeError
from .filters import (ClassHead, DynamicFilterSet, FilterHead,
                      FilterProjection, assign_instances, build_class_targets,
                      center_grid_mask, empty_filter_set, pool_filters,
                      sample_inference, sample_locations)
from .losses import (ContourHead, EmbeddingHead, LossReport, contour_loss,
                     focal_classification, intra_triplet, mask_embedding,
                     multi_class_dice, bootstrapped_ce, split_mask,
                     thing_mask_loss, total_loss)
from .pfeature import PanopticFeatureGenerator
from .postprocess import mask_nms, masks_from_logits, panoptic_merge
from .single_shot import StuffFilterBank, single_shot_conv
from .synth import PanopticLabel, contour_ground_truth


def images_to_tensor(labels: list, device=None, dtype=None) -> torch.Tensor:
    """Stack label images into a (B, 3, H, W) float tensor."""
    arrays = [np.transpose(lab.image, (2, 0, 1)) for lab in labels]
    batch = torch.from_numpy(np.stack(arrays))
    return batch.to(device=device, dtype=dtype or torch.float32)


@dataclass
class ForwardMaps:
    pyramid: object
    phi: torch.Tensor          # (B, d_phi, H/4, W/4)
    class_logits: dict         # level -> (B, N_t, H_l, W_l)
    filter_maps: dict          # level -> (B, d_f, H_l, W_l)


class PanopticNet(nn.Module):
    def __init__(self, config: RunConfig):
        super().__init__()
        config.validate()
        self.config = config
        self.backbone_fpn = BackboneFPN(
            widths=config.backbone_widths,
            fpn_channels=config.fpn_channels,
            include_p6=config.include_p6)
        self.class_head = ClassHead(config.fpn_channels, config.num_things)
        self.filter_head = FilterHead(config.fpn_channels, config.d_f)
        self.projection = FilterProjection(config.kernel_k, config.d_f,
                                           config.d_phi)
        self.generator = PanopticFeatureGenerator(
            config.fpn_channels, config.generator_internal_channels,
            config.d_phi)
        self.stuff_bank = StuffFilterBank(config.num_stuffs, config.kernel_k,
                                          config.d_phi)
        self.embedding_head = EmbeddingHead(config.d_phi, config.d_emb)
        self.contour_head = ContourHead(config.d_phi)

    def forward_features(self, images: torch.Tensor) -> ForwardMaps:
        pyramid = self.backbone_fpn(images)
        missing = [name for name in self.config.filter_levels
                   if name not in pyramid]
        if missing:
            raise ShapeError(f"pyramid lacks configured levels {missing}")
        class_logits = {}
        filter_maps = {}
        for name in self.config.filter_levels:
            feature = pyramid[name]
            class_logits[name] = self.class_head(feature)
            filter_maps[name] = self.filter_head(feature)
        phi = self.generator(pyramid).phi
        return ForwardMaps(pyramid=pyramid, phi=phi,
                           class_logits=class_logits,
                           filter_maps=filter_maps)

    def sample_filters_train(self, maps: ForwardMaps, label: PanopticLabel,
                             batch_index: int,
                             rng: np.random.Generator) -> tuple[DynamicFilterSet, dict, int]:
        """Ground-truth-driven filter sampling for one image.

        Returns the filter set, the per-level class targets, and the count
        of instances with no positive cell.
        """
        cfg = self.config
        level_shapes = {name: tuple(t.shape[-2:])
                        for name, t in maps.class_logits.items()}
        assignments, skipped = assign_instances(label, cfg.filter_levels,
                                                level_shapes)
        targets = build_class_targets(assignments, cfg.num_things,
                                      level_shapes, cfg.filter_levels,
                                      device=maps.phi.device)
        pooled_rows = []
        sources = []
        class_ids = []
        instance_ids = []
        for a in assignments:
            locs = sample_locations(a, cfg.samples_per_instance, rng)
            fmap = maps.filter_maps[a.level][batch_index]
            pooled_rows.append(pool_filters(fmap, locs, cfg.kernel_k))
            for i, j in locs:
                sources.append((a.level, int(i), int(j)))
                class_ids.append(a.class_index)
                instance_ids.append(a.instance_id)
        if not pooled_rows:
            fset = empty_filter_set(cfg.kernel_k, cfg.d_phi,
                                    device=maps.phi.device,
                                    dtype=maps.phi.dtype)
            return fset, targets, skipped
        weights, biases = self.projection(torch.cat(pooled_rows))
        fset = DynamicFilterSet(weights=weights, biases=biases,
                                sources=sources, class_ids=class_ids,
                                scores=[1.0] * len(class_ids),
                                instance_ids=instance_ids)
        return fset, targets, skipped

    def compute_losses(self, labels: list,
                       rng: np.random.Generator) -> tuple[torch.Tensor, LossReport]:
        cfg = self.config
        device = next(self.parameters()).device
        dtype = next(self.parameters()).dtype
        images = images_to_tensor(labels, device=device, dtype=dtype)
        maps = self.forward_features(images)
        h4, w4 = maps.phi.shape[-2:]

        focal_sum = None
        total_positives = 0
        thing_logit_rows = []
        thing_target_rows = []
        stuff_ce_terms = []
        stuff_mcd_terms = []
        contour_terms = []
        anchors, positives, negatives = [], [], []
        sampled_sets = 0
        skipped_instances = 0
        skipped_splits = 0
        triplet_sets = 0

        for b, label in enumerate(labels):
            fset, targets, skipped = self.sample_filters_train(maps, label,
                                                               b, rng)
            skipped_instances += skipped
            sampled_sets += len(fset)
            image_logits = {name: maps.class_logits[name][b]
                            for name in cfg.filter_levels}
            term, pos = focal_classification(image_logits, targets,
                                             cfg.focal_alpha, cfg.focal_gamma)
            focal_sum = term if focal_sum is None else focal_sum + term
            total_positives += pos

            logits = single_shot_conv(maps.phi[b], fset, self.stuff_bank)
            if len(fset):
                thing_logit_rows.append(logits.thing_logits)
                masks4 = {
                    inst: center_grid_mask(label.instance_mask(inst), 4,
                                           (h4, w4))
                    for inst in sorted(set(fset.instance_ids))
                }
                target = np.stack([masks4[inst] for inst in fset.instance_ids])
                thing_target_rows.append(
                    torch.from_numpy(target).to(device=device, dtype=dtype))
            else:
                masks4 = {}

            sem4 = torch.from_numpy(
                center_grid_mask_values(label.semantic_map, 4, (h4, w4))
            ).to(device=device)
            inst4 = torch.from_numpy(
                center_grid_mask_values(label.instance_map, 4, (h4, w4))
            ).to(device=device)
            stuff_pixels = inst4 == 0
            onehot = torch.zeros((cfg.num_stuffs, h4, w4), device=device,
                                 dtype=dtype)
            for c in range(cfg.num_stuffs):
                onehot[c] = (stuff_pixels & (sem4 == c)).to(dtype)
            stuff_ce_terms.append(bootstrapped_ce(
                logits.stuff_logits, sem4.long(), stuff_pixels,
                cfg.topk_ratio))
            stuff_mcd_terms.append(multi_class_dice(
                logits.stuff_logits, onehot, stuff_pixels))

            gt_contour = contour_ground_truth(label).contour_map
            shuffled = self.contour_head(maps.phi[b:b + 1])[0]
            contour_terms.append(contour_loss(
                shuffled,
                torch.from_numpy(gt_contour).to(device=device, dtype=dtype),
                cfg.focal_alpha, cfg.focal_gamma))

            splits = {}
            for inst in label.instances():
                mask4 = masks4.get(inst)
                if mask4 is None:
                    mask4 = center_grid_mask(label.instance_mask(inst), 4,
                                             (h4, w4))
                parts = split_mask(mask4, rng)
                if parts is None:
                    skipped_splits += 1
                    continue
                splits[inst] = parts
            eligible = sorted(splits)
            if len(eligible) >= 2:
                emb = {}
                for inst in eligible:
                    first, second = splits[inst]
                    emb[inst] = (
                        mask_embedding(maps.phi[b],
                                       torch.from_numpy(first).to(device),
                                       self.embedding_head),
                        mask_embedding(maps.phi[b],
                                       torch.from_numpy(second).to(device),
                                       self.embedding_head),
                    )
                for idx, inst in enumerate(eligible):
                    others = eligible[:idx] + eligible[idx + 1:]
                    other = others[int(rng.integers(len(others)))]
                    anchors.append(emb[inst][0])
                    positives.append(emb[inst][1])
                    negatives.append(emb[other][0])
                    triplet_sets += 1

        zero = maps.phi.sum() * 0.0
        cls = focal_sum / max(1, total_positives)
        if thing_logit_rows:
            thing = thing_mask_loss(torch.cat(thing_logit_rows),
                                    torch.cat(thing_target_rows))
        else:
            thing = zero
        stuff_ce = torch.stack(stuff_ce_terms).mean()
        stuff_mcd = torch.stack(stuff_mcd_terms).mean()
        contour = torch.stack(contour_terms).mean()
        if anchors:
            triplet = intra_triplet(torch.stack(anchors),
                                    torch.stack(positives),
                                    torch.stack(negatives))
        else:
            triplet = zero
        counts = {"sampled_filter_sets": sampled_sets,
                  "triplet_sets": triplet_sets,
                  "skipped_instances": skipped_instances,
                  "skipped_splits": skipped_splits}
        components = {"cls": cls, "stuff_ce": stuff_ce,
                      "stuff_mcd": stuff_mcd, "thing_dice": thing,
                      "inter_contour": contour, "intra_triplet": triplet}
        return total_loss(components, "custom", lambdas=self.config.lambdas(),
                          counts=counts)

    @torch.no_grad()
    def run_inference(self, labels: list) -> list:
        """Full pipeline on a list of labels; returns one PanopticPrediction
        per image (ground truth is used only for the input image)."""
        cfg = self.config
        device = next(self.parameters()).device
        dtype = next(self.parameters()).dtype
        images = images_to_tensor(labels, device=device, dtype=dtype)
        maps = self.forward_features(images)
        h, w = images.shape[-2:]
        out = []
        for b in range(images.shape[0]):
            prob_maps = {name: torch.sigmoid(maps.class_logits[name][b])
                         for name in cfg.filter_levels}
            filter_maps = {name: maps.filter_maps[name][b]
                           for name in cfg.filter_levels}
            fset = sample_inference(prob_maps, filter_maps, self.projection,
                                    cfg.kernel_k, cfg.score_threshold,
                                    cfg.max_detections)
            logits = single_shot_conv(maps.phi[b], fset, self.stuff_bank)
            masks = masks_from_logits(logits.thing_logits, (h, w))
            instances = []
            for mask, class_idx, score in zip(masks, fset.class_ids,
                                              fset.scores):
                if not mask.any():
                    continue
                instances.append((mask, cfg.num_stuffs + class_idx, score))
            kept = mask_nms(instances, cfg.nms_iou_threshold)
            stuff_up = torch.nn.functional.interpolate(
                logits.stuff_logits.unsqueeze(0), size=(h, w),
                mode="bilinear", align_corners=False)[0]
            stuff_probs = torch.softmax(stuff_up, dim=0).cpu().numpy()
            out.append(panoptic_merge(kept, stuff_probs,
                                      cfg.min_thing_area,
                                      cfg.min_stuff_area))
        return out


def center_grid_mask_values(array: np.ndarray, stride: int,
                            grid_hw: tuple[int, int]) -> np.ndarray:
    """Center-sample an integer map onto a level grid (values, not bools)."""
    h, w = array.shape
    gh, gw = grid_hw
    off = stride // 2
    ys = np.minimum(np.arange(gh) * stride + off, h - 1)
    xs = np.minimum(np.arange(gw) * stride + off, w - 1)
    return array[np.ix_(ys, xs)]
