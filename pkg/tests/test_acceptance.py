"""Acceptance gate: end-to-end checks of the package's required behavior.

Each test prints a single ``[PASS]``/``[FAIL]`` line carrying the measured
value and the pinned tolerance, then asserts.  The suite runs with output
capture disabled, so these lines always reach the terminal.
"""

import json
import math
import time

import numpy as np
import torch
import torch.nn.functional as F

from gradcheck import check_tensor_grad
from pq_brute import oracle_counters, random_panoptic
from spinet.config import RunConfig
from spinet.filters import DynamicFilterSet, FilterProjection, pool_filters
from spinet.losses import (binary_focal, bootstrapped_ce, contour_loss,
                           dice_loss, focal_classification, intra_triplet,
                           multi_class_dice, thing_mask_loss)
from spinet.pfeature import generator_parameter_counts
from spinet.postprocess import (PanopticPrediction, PQAccumulator,
                                SegmentInfo, panoptic_merge)
from spinet.single_shot import StuffFilterBank, single_shot_conv
from spinet.synth import SceneSpec, generate_scene
from spinet.trainer import evaluate, load_model, train


def verdict(name: str, ok: bool, detail: str) -> None:
    print(f"\n[{'PASS' if ok else 'FAIL'}] {name}: {detail}")
    assert ok, f"{name}: {detail}"


# --------------------------------------------------------- loss gradients


def test_losses_match_finite_differences():
    """Analytic gradients of every loss agree with central differences."""
    name = "loss gradients match finite differences"
    torch.manual_seed(0)
    rng = np.random.default_rng(0)
    worst: dict[str, float] = {}

    def binary(shape):
        return torch.from_numpy(
            rng.integers(0, 2, shape).astype(np.float64))

    def stuff_case():
        x = 2.0 * torch.randn(3, 4, 5, dtype=torch.float64)
        index = torch.from_numpy(rng.integers(0, 3, (4, 5)))
        pixels = torch.from_numpy(rng.random((4, 5)) < 0.7)
        pixels[0, 0] = True
        onehot = torch.zeros(3, 4, 5, dtype=torch.float64)
        onehot.scatter_(0, index.unsqueeze(0), 1.0)
        onehot = onehot * pixels.to(torch.float64)
        return x, index, pixels, onehot

    def run(loss_name, make):
        high = 0.0
        for i in range(20):
            scalar_fn, leaf = make(i)
            high = max(high, check_tensor_grad(scalar_fn, leaf))
        worst[loss_name] = high

    def make_dice(i):
        x = 2.0 * torch.randn(4, 5, dtype=torch.float64)
        y = binary((4, 5))
        return (lambda: dice_loss(torch.sigmoid(x), y)), x

    def make_thing(i):
        m = 1 + i % 3
        x = 2.0 * torch.randn(m, 4, 4, dtype=torch.float64)
        y = binary((m, 4, 4))
        return (lambda: thing_mask_loss(x, y)), x

    def make_mcd(i):
        x, _, pixels, onehot = stuff_case()
        return (lambda: multi_class_dice(x, onehot, pixels)), x

    def make_ce(i):
        x, index, pixels, _ = stuff_case()
        ratio = (1.0, 0.5, 0.3)[i % 3]
        return (lambda: bootstrapped_ce(x, index, pixels, ratio)), x

    def make_focal(i):
        shape = ((2, 3, 4), (3, 2, 5))[i % 2]
        x = 2.0 * torch.randn(*shape, dtype=torch.float64)
        t = binary(shape)
        return (lambda: focal_classification({"P3": x}, {"P3": t})[0]), x

    def make_triplet(i):
        rows = torch.randn(3, 3, 5, dtype=torch.float64)
        a, p, n = rows[0], rows[1], rows[2]
        leaf = (a, p, n)[i % 3]
        return (lambda: intra_triplet(a, p, n)), leaf

    def make_contour(i):
        x = 2.0 * torch.randn(8, 8, dtype=torch.float64)
        t = binary((8, 8))
        return (lambda: contour_loss(x, t)), x

    cases = [("instance dice", make_dice), ("thing masks", make_thing),
             ("stuff multi-class dice", make_mcd),
             ("bootstrapped cross entropy", make_ce),
             ("focal classification", make_focal),
             ("intra triplet", make_triplet), ("contour", make_contour)]
    try:
        for loss_name, make in cases:
            run(loss_name, make)
    except AssertionError as err:
        verdict(name, False, str(err))
    verdict(name, True,
            f"{len(cases)} losses x 20 random instances in float64, worst "
            f"rel err {max(worst.values()):.2e} among coordinates above the "
            f"1e-7 noise floor (tol 1e-4)")


# ------------------------------------------------------- fused convolution


def test_single_pass_equals_per_filter_convolutions():
    """One fused convolution reproduces every per-filter convolution."""
    name = "single-pass conv equals per-filter convs"
    torch.manual_seed(1)
    g = torch.Generator().manual_seed(1)

    def draw(low, high):
        return int(torch.randint(low, high + 1, (1,), generator=g))

    worst = 0.0
    for trial in range(200):
        k = 1 if trial % 2 == 0 else 3
        m, n_s, d_phi = draw(0, 6), draw(1, 4), draw(2, 8)
        h, w = draw(4, 12), draw(4, 12)
        bank = StuffFilterBank(n_s, k, d_phi).double()
        fset = DynamicFilterSet(
            weights=torch.randn(m, k * k * d_phi, generator=g,
                                dtype=torch.float64),
            biases=torch.randn(m, generator=g, dtype=torch.float64),
            sources=[("P3", 0, i) for i in range(m)],
            class_ids=list(range(m)), scores=[1.0] * m,
            instance_ids=list(range(1, m + 1)))
        phi = torch.randn(d_phi, h, w, generator=g, dtype=torch.float64)
        with torch.no_grad():
            out = single_shot_conv(phi, fset, bank)
            for row in range(m):
                wt = fset.weights[row].reshape(1, d_phi, k, k)
                ref = F.conv2d(phi.unsqueeze(0), wt,
                               fset.biases[row:row + 1], padding=k // 2)[0, 0]
                worst = max(worst,
                            float((out.thing_logits[row] - ref).abs().max()))
            for s in range(n_s):
                wt = bank.weights[s].reshape(1, d_phi, k, k)
                ref = F.conv2d(phi.unsqueeze(0), wt, bank.biases[s:s + 1],
                               padding=k // 2)[0, 0]
                worst = max(worst,
                            float((out.stuff_logits[s] - ref).abs().max()))
    verdict(name, worst <= 1e-12,
            f"200 random float64 trials with k=1 and k=3, "
            f"max abs gap {worst:.2e} (pinned tol 1e-12)")


# ------------------------------------------------- filter sampling oracle


def test_sampled_filters_match_dense_convolution():
    """Pooling plus projection at every location equals a dense conv."""
    name = "sampled filter pipeline matches dense convolution"
    torch.manual_seed(2)
    rng = np.random.default_rng(2)
    worst = 0.0
    for trial in range(100):
        k = 1 if trial % 2 == 0 else 3
        d_f, d_phi = int(rng.integers(2, 9)), int(rng.integers(2, 7))
        h, w = int(rng.integers(4, 11)), int(rng.integers(4, 11))
        proj = FilterProjection(k, d_f, d_phi).double()
        fmap = torch.randn(d_f, h, w, dtype=torch.float64)
        locations = np.array([[i, j] for i in range(h) for j in range(w)],
                             dtype=np.int64)
        with torch.no_grad():
            out = proj.fc(pool_filters(fmap, locations, k))
            dense = out.t().reshape(proj.fc.out_features, h, w)
            conv_w = proj.fc.weight.view(proj.fc.out_features, k, k, d_f)
            conv_w = conv_w.permute(0, 3, 1, 2)
            ref = F.conv2d(fmap.unsqueeze(0), conv_w, proj.fc.bias,
                           padding=k // 2)[0]
        worst = max(worst, float((dense - ref).abs().max()))
    verdict(name, worst <= 1e-10,
            f"100 random float64 trials with k=1 and k=3, "
            f"max abs gap {worst:.2e} (tol 1e-10)")


# ------------------------------------------------------ loss closed forms


def test_loss_values_match_closed_forms():
    """Hand-computable inputs hit their exact loss values."""
    name = "loss values match closed forms"
    y = torch.tensor([1.0, 1.0, 0.0, 0.0], dtype=torch.float64)
    p = torch.full((4,), 0.5, dtype=torch.float64)
    dice_gap = abs(float(dice_loss(p, y, eps=0.0)) - 1.0 / 3.0)

    a = torch.zeros(1, 4, dtype=torch.float64)
    unit_x = torch.tensor([[1.0, 0.0, 0.0, 0.0]], dtype=torch.float64)
    unit_y = torch.tensor([[0.0, 1.0, 0.0, 0.0]], dtype=torch.float64)
    sym_gap = abs(float(intra_triplet(a, unit_x, unit_y)) - math.log(2.0))
    tight_gap = abs(float(intra_triplet(a, a.clone(), unit_x))
                    - math.log(1.0 + math.exp(-1.0)))

    focal = float(binary_focal(torch.zeros(1), torch.ones(1)))
    focal_gap = abs(focal - 0.0433)

    ok = (dice_gap <= 1e-9 and sym_gap <= 1e-9 and tight_gap <= 1e-9
          and focal_gap <= 1e-4)
    verdict(name, ok,
            f"half-prob dice off 1/3 by {dice_gap:.1e} (tol 1e-9); "
            f"triplet off ln2 by {sym_gap:.1e} and off ln(1+1/e) by "
            f"{tight_gap:.1e} (tol 1e-9); one-point focal {focal:.6f} off "
            f"0.0433 by {focal_gap:.1e} (tol 1e-4)")


# ----------------------------------------------------------- PQ matching


def test_pq_matcher_is_optimal_and_matches_closed_form():
    """Greedy matching equals exhaustive search; a known pair scores 8/15."""
    name = "pq matcher optimal and closed form"
    rng = np.random.default_rng(5)
    mismatches = 0
    for _ in range(500):
        pred = random_panoptic(rng)
        gt = random_panoptic(rng)
        acc = PQAccumulator()
        acc.add(pred, gt)
        oracle = oracle_counters(pred, gt)
        if set(acc.counters) != set(oracle):
            mismatches += 1
            continue
        for cid, row in oracle.items():
            mine = acc.counters[cid]
            if ((mine["tp"], mine["fp"], mine["fn"])
                    != (row["tp"], row["fp"], row["fn"])
                    or abs(mine["iou_sum"] - row["iou_sum"]) > 1e-12):
                mismatches += 1
                break

    # one match at void-discounted IoU 0.8 plus one miss: 0.8 / (1 + 1/2)
    gt_map = np.zeros((1, 200), np.int32)
    gt_map[0, :100] = 1
    pred_map = np.zeros((1, 200), np.int32)
    pred_map[0, :80] = 1
    pred_map[0, 100:120] = 1
    row = [SegmentInfo(id=1, class_id=7, is_thing=True, score=1.0)]
    acc = PQAccumulator()
    acc.add(PanopticPrediction(pred_map, row),
            PanopticPrediction(gt_map, row))
    acc.add(PanopticPrediction(np.zeros((1, 200), np.int32), []),
            PanopticPrediction(gt_map.copy(), row))
    pq = acc.report().pq
    gap = abs(pq - 0.8 / 1.5)
    ok = mismatches == 0 and gap <= 1e-6
    verdict(name, ok,
            f"greedy equals brute force on 500 random pairs "
            f"({mismatches} mismatches); IoU-0.8 match plus one miss gives "
            f"PQ {pq:.6f}, off 8/15 by {gap:.1e} (tol 1e-6)")


# ------------------------------------------------------------- merge maps


def test_merged_maps_always_partition_the_image():
    """Random merges always produce a consistent segment partition."""
    name = "merged maps partition the image"
    rng = np.random.default_rng(6)
    bad = 0
    for _ in range(500):
        h = w = 16
        instances = []
        for _ in range(int(rng.integers(0, 5))):
            r, c = rng.integers(0, 10, 2)
            mask = np.zeros((h, w), bool)
            mask[r:r + int(rng.integers(2, 7)),
                 c:c + int(rng.integers(2, 7))] = True
            instances.append((mask, int(rng.integers(0, 3)),
                              float(rng.random())))
        probs = rng.random((2, h, w)).astype(np.float32)
        pred = panoptic_merge(instances, probs)
        ids = [s.id for s in pred.segments]
        present = set(np.unique(pred.segment_map).tolist())
        fine = (len(ids) == len(set(ids)) and 0 not in ids
                and present <= set(ids) | {0}
                and all((pred.segment_map == s.id).sum() > 0
                        for s in pred.segments))
        bad += 0 if fine else 1
    verdict(name, bad == 0,
            f"500 random merges, {bad} produced ids that were missing, "
            f"duplicated, empty, or unlisted")


# ------------------------------------------------------- parameter budget


def test_shared_feature_map_saves_parameters():
    """One shared feature generator beats two task-specific ones."""
    name = "shared feature map saves parameters"
    integrated, separated = generator_parameter_counts(64, 64, 16)
    verdict(name, integrated < separated,
            f"shared generator holds {integrated} parameters, two "
            f"task-specific generators would hold {separated}")


# ------------------------------------------------ determinism and resume


def test_training_is_deterministic_and_resumable(tmp_path):
    """Same seed twice is bit-identical; resuming matches an unbroken run."""
    name = "training deterministic and resumable"
    spec = SceneSpec(height=32, width=32, num_things=2, num_stuffs=2,
                     max_instances=2)
    data = [generate_scene(s, spec) for s in range(2)]
    cfg = RunConfig(height=32, width=32, num_things=2, num_stuffs=2,
                    max_instances=2, fpn_channels=8,
                    backbone_widths=(8, 8, 8, 16), d_f=8, d_phi=8,
                    generator_internal_channels=8, d_emb=8, iterations=8,
                    batch_size=2, checkpoint_every=4, lr_decay_steps=(6,),
                    max_detections=20, seed=0)
    r1 = train(cfg, data, str(tmp_path / "a"))
    r2 = train(cfg, data, str(tmp_path / "b"))
    with open(r1.checkpoint_path, "rb") as f:
        ckpt1 = f.read()
    with open(r2.checkpoint_path, "rb") as f:
        ckpt2 = f.read()
    with open(r1.metrics_path) as f:
        m1 = f.read()
    with open(r2.metrics_path) as f:
        m2 = f.read()
    r3 = train(cfg, data, str(tmp_path / "c"),
               resume=str(tmp_path / "a" / "checkpoint_000004.ckpt"))
    with open(r3.checkpoint_path, "rb") as f:
        ckpt3 = f.read()
    with open(r3.metrics_path) as f:
        m3 = f.read()
    repeat_ok = ckpt1 == ckpt2 and m1 == m2
    resume_ok = (ckpt3 == ckpt1
                 and m3.splitlines() == m1.splitlines()[4:])
    verdict(name, repeat_ok and resume_ok,
            f"rerun checkpoint bit-identical: {repeat_ok}; resumed run "
            f"matches the unbroken run: {resume_ok}")


# ----------------------------------------------------------- overfitting


def test_overfits_eight_scene_dataset(tmp_path):
    """Full training run memorizes a small dataset within the time box."""
    name = "overfit eight scenes"
    spec = SceneSpec(height=64, width=64, num_things=2, num_stuffs=2,
                     max_instances=3)
    data = [generate_scene(s, spec) for s in range(8)]
    cfg = RunConfig(iterations=1500, batch_size=4, checkpoint_every=500,
                    lr_decay_steps=(1000, 1300), seed=0)
    start = time.monotonic()
    result = train(cfg, data, str(tmp_path / "run"))
    minutes = (time.monotonic() - start) / 60.0
    model = load_model(result.checkpoint_path)
    pq = evaluate(model, data).pq
    with open(result.metrics_path) as f:
        lines = [json.loads(line) for line in f]
    dice_tail = float(np.mean([line["thing_dice"] for line in lines[-100:]]))
    ok = pq >= 0.70 and dice_tail <= 0.15 and minutes <= 20.0
    verdict(name, ok,
            f"training PQ {pq:.4f} (need >= 0.70); mean thing-mask dice "
            f"over the last 100 iterations {dice_tail:.4f} (need <= 0.15); "
            f"{minutes:.1f} min wall time (limit 20)")
