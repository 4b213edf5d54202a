import json
import math

import numpy as np
import pytest
import torch

from spinet.config import RunConfig
from spinet.errors import CheckpointError, NumericError, ShapeError
from spinet.losses import LossReport
from spinet.model import PanopticNet
from spinet.trainer import (apply_checkpoint, build_model, evaluate,
                            learning_rate, load_checkpoint, load_model,
                            restore_rng, save_checkpoint, train)
from spinet.synth import SceneSpec, generate_scene


def tiny_config(**overrides):
    base = dict(height=32, width=32, num_things=2, num_stuffs=2,
                fpn_channels=8, backbone_widths=(8, 8, 8, 16), d_f=8,
                d_phi=8, generator_internal_channels=8, d_emb=8,
                iterations=4, batch_size=2, checkpoint_every=2,
                lr_decay_steps=(3,), max_detections=20, seed=0)
    base.update(overrides)
    return RunConfig(**base)


def tiny_dataset(n=4, seed0=0):
    spec = SceneSpec(32, 32, 2, 2, 2)
    return [generate_scene(seed0 + i, spec) for i in range(n)]


# ---------------------------------------------------------------- schedule


def test_learning_rate_step_schedule():
    for t, expect in [(0, 0.01), (79, 0.01), (80, 0.001), (89, 0.001),
                      (90, 0.0001), (500, 0.0001)]:
        got = learning_rate(0.01, (80, 90), 0.1, t)
        assert got == 0.01 * 0.1 ** sum(1 for s in (80, 90) if s <= t)
        assert got == pytest.approx(expect, rel=1e-12)


def test_learning_rate_no_decay_steps():
    assert learning_rate(0.5, (), 0.1, 1000) == 0.5


# ---------------------------------------------------------------- containers


def stepped_model_and_optimizer(seed=0):
    cfg = tiny_config(seed=seed)
    model = build_model(cfg)
    opt = torch.optim.SGD(model.parameters(), lr=0.01, momentum=0.9,
                          weight_decay=1e-4)
    rng = np.random.default_rng(seed)
    data = tiny_dataset(2)
    for _ in range(2):
        opt.zero_grad()
        total, _ = model.compute_losses(data, rng)
        total.backward()
        opt.step()
    return cfg, model, opt, rng


def test_checkpoint_round_trip_bit_exact(tmp_path):
    cfg, model, opt, rng = stepped_model_and_optimizer()
    path = str(tmp_path / "ckpt.ckpt")
    rng_probe = rng.integers(0, 1 << 30, size=5)  # advance after saving? no:
    # save first, then draw the probe from a restored copy
    cfg2, model2, opt2, _ = stepped_model_and_optimizer()
    save_checkpoint(path, model, opt, 7, rng)
    manifest, rows = load_checkpoint(path)
    assert manifest["iteration"] == 7
    fresh = build_model(cfg)
    fresh_opt = torch.optim.SGD(fresh.parameters(), lr=0.01, momentum=0.9)
    apply_checkpoint(fresh, fresh_opt, manifest, rows)
    for name, tensor in model.state_dict().items():
        assert torch.equal(fresh.state_dict()[name], tensor), name
    named = dict(model.named_parameters())
    fresh_named = dict(fresh.named_parameters())
    for name, p in named.items():
        buf = opt.state[p].get("momentum_buffer")
        fresh_buf = fresh_opt.state[fresh_named[name]].get("momentum_buffer")
        if buf is None:
            assert fresh_buf is None
        else:
            assert torch.equal(fresh_buf, buf), name


def test_checkpoint_restores_rng_stream(tmp_path):
    cfg, model, opt, rng = stepped_model_and_optimizer()
    path = str(tmp_path / "ckpt.ckpt")
    save_checkpoint(path, model, opt, 2, rng)
    continued = rng.integers(0, 1 << 30, size=8)
    manifest, _ = load_checkpoint(path)
    restored = restore_rng(manifest)
    assert np.array_equal(restored.integers(0, 1 << 30, size=8), continued)


def test_corrupt_checkpoint_rejected(tmp_path):
    garbage = tmp_path / "bad.ckpt"
    garbage.write_bytes(b"not a checkpoint at all")
    with pytest.raises(CheckpointError):
        load_checkpoint(str(garbage))


def test_truncated_checkpoint_rejected(tmp_path):
    cfg, model, opt, rng = stepped_model_and_optimizer()
    path = tmp_path / "ckpt.ckpt"
    save_checkpoint(str(path), model, opt, 1, rng)
    data = path.read_bytes()
    path.write_bytes(data[: len(data) // 2])
    with pytest.raises(CheckpointError):
        load_checkpoint(str(path))


def test_checkpoint_shape_mismatch_rejected(tmp_path):
    cfg, model, opt, rng = stepped_model_and_optimizer()
    path = str(tmp_path / "ckpt.ckpt")
    save_checkpoint(path, model, opt, 1, rng)
    manifest, rows = load_checkpoint(path)
    other = build_model(tiny_config(d_phi=4))
    with pytest.raises(ShapeError):
        apply_checkpoint(other, None, manifest, rows)


# ---------------------------------------------------------------- training


def test_train_writes_metrics_and_checkpoints(tmp_path):
    cfg = tiny_config()
    out = str(tmp_path / "run")
    result = train(cfg, tiny_dataset(), out)
    assert result.iterations_run == 4
    assert math.isfinite(result.final_loss)
    assert (tmp_path / "run" / "checkpoint_000002.ckpt").exists()
    # the final iteration gets only the final checkpoint, not a periodic one
    assert not (tmp_path / "run" / "checkpoint_000004.ckpt").exists()
    assert result.checkpoint_path.endswith("checkpoint_final.ckpt")
    lines = [json.loads(l) for l in
             open(result.metrics_path, encoding="utf-8")]
    assert [l["iteration"] for l in lines] == [0, 1, 2, 3]
    for line in lines:
        assert set(line) >= {"iteration", "lr", "cls", "stuff_ce",
                             "stuff_mcd", "thing_dice", "inter_contour",
                             "intra_triplet", "total", "counts"}
        assert math.isfinite(line["total"])
    assert lines[0]["lr"] == pytest.approx(cfg.base_lr)
    assert lines[3]["lr"] == pytest.approx(cfg.base_lr * cfg.decay_factor)


def test_train_is_deterministic_given_seed(tmp_path):
    cfg = tiny_config()
    data = tiny_dataset()
    res_a = train(cfg, data, str(tmp_path / "a"))
    res_b = train(cfg, data, str(tmp_path / "b"))
    bytes_a = open(res_a.checkpoint_path, "rb").read()
    bytes_b = open(res_b.checkpoint_path, "rb").read()
    assert bytes_a == bytes_b
    lines_a = open(res_a.metrics_path).read()
    lines_b = open(res_b.metrics_path).read()
    assert lines_a == lines_b


def test_resume_matches_uninterrupted_run(tmp_path):
    data = tiny_dataset()
    full_cfg = tiny_config(iterations=8, checkpoint_every=4)
    res_full = train(full_cfg, data, str(tmp_path / "full"))
    # second run resumes at iteration 4 from the periodic checkpoint
    res_resumed = train(full_cfg, data, str(tmp_path / "resumed"),
                        resume=str(tmp_path / "full" /
                                   "checkpoint_000004.ckpt"))
    assert res_resumed.iterations_run == 4
    assert (open(res_full.checkpoint_path, "rb").read()
            == open(res_resumed.checkpoint_path, "rb").read())
    tail = [json.loads(l) for l in open(res_full.metrics_path)][4:]
    resumed_lines = [json.loads(l) for l in open(res_resumed.metrics_path)]
    assert resumed_lines == tail


def test_train_rejects_empty_dataset(tmp_path):
    with pytest.raises(ShapeError):
        train(tiny_config(), [], str(tmp_path / "x"))


def test_nan_loss_raises_numeric_error(tmp_path, monkeypatch):
    def explode(self, labels, rng):
        report = LossReport(cls=0, stuff_ce=0, stuff_mcd=0, thing_dice=0,
                            inter_contour=0, intra_triplet=0,
                            total=float("nan"))
        return torch.tensor(float("nan")), report

    monkeypatch.setattr(PanopticNet, "compute_losses", explode)
    with pytest.raises(NumericError, match="iteration 0"):
        train(tiny_config(), tiny_dataset(), str(tmp_path / "x"))


def test_zero_weighted_objectives_leave_modules_untouched(tmp_path):
    """With only the embedding objective active, modules reachable only
    through the disabled objectives must not move at all (no gradient,
    no weight decay)."""
    cfg = tiny_config(preset="custom", lambda0=0.0, lambda1=0.0,
                      lambda2=0.0, lambda3=0.0, lambda4=1.0, iterations=2,
                      lr_decay_steps=(), checkpoint_every=2,
                      height=64, width=64)
    # two large instances guarantee triplets every iteration
    from spinet.synth import PanopticLabel
    semantic = np.zeros((64, 64), np.int32)
    instance = np.zeros((64, 64), np.int32)
    semantic[4:28, 4:28] = 2
    instance[4:28, 4:28] = 1
    semantic[36:60, 36:60] = 3
    instance[36:60, 36:60] = 2
    data = [PanopticLabel(image=np.full((64, 64, 3), 0.5, np.float32),
                          semantic_map=semantic, instance_map=instance,
                          class_table=[(0, False), (1, False),
                                       (2, True), (3, True)])]
    before = {name: p.detach().clone()
              for name, p in build_model(cfg).named_parameters()}
    result = train(cfg, data, str(tmp_path / "run"))
    model = load_model(result.checkpoint_path)
    frozen_prefixes = ("class_head", "filter_head", "projection",
                       "stuff_bank", "contour_head")
    moving_prefixes = ("backbone_fpn", "generator", "embedding_head")
    moved = {prefix: False for prefix in moving_prefixes}
    for name, p in model.named_parameters():
        prefix = name.split(".")[0]
        same = torch.equal(p, before[name])
        if prefix in frozen_prefixes:
            assert same, f"{name} changed despite zero loss weight"
        elif not same:
            moved[prefix] = True
    assert all(moved.values()), moved


# ---------------------------------------------------------------- evaluate


def test_evaluate_is_repeatable():
    cfg = tiny_config()
    model = build_model(cfg)
    data = tiny_dataset(3)
    a = evaluate(model, data).to_dict()
    b = evaluate(model, data).to_dict()
    assert a == b
    assert 0.0 <= a["pq"] <= 1.0


def test_load_model_runs_inference(tmp_path):
    cfg = tiny_config(iterations=2, lr_decay_steps=(), checkpoint_every=2)
    result = train(cfg, tiny_dataset(), str(tmp_path / "run"))
    model = load_model(result.checkpoint_path)
    preds = model.run_inference(tiny_dataset(1))
    assert len(preds) == 1
    assert preds[0].segment_map.shape == (32, 32)
