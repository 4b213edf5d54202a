"""Optimization loop, checkpointing and evaluation.

All stochastic choices (batch draw, location sampling, mask splits,
triplet negatives) come from one numpy generator whose state rides along
in every checkpoint, so resuming reproduces the uninterrupted run bit for
bit. Checkpoints are sectioned containers: a JSON manifest followed by
one raw little-endian block per tensor (parameters, then momentum).
"""

from __future__ import annotations

import json
import os
from dataclasses import dataclass

import numpy as np
import torch

from .blockio import read_sections, write_sections
from .config import RunConfig
from .errors import CheckpointError, FormatError, NumericError, ShapeError
from .model import PanopticNet
from .postprocess import PQAccumulator, PQReport, label_to_prediction

CHECKPOINT_VERSION = 1


def learning_rate(base_lr: float, decay_steps, factor: float,
                  iteration: int) -> float:
    passed = sum(1 for step in decay_steps if step <= iteration)
    return base_lr * factor ** passed


def build_model(config: RunConfig) -> PanopticNet:
    """Construct the network with seed-determined initialization."""
    torch.manual_seed(config.seed)
    return PanopticNet(config)


def _named_tensors(model: PanopticNet, optimizer) -> list:
    """(kind, name, tensor) rows in a stable order: params then momentum."""
    rows = [("param", name, tensor)
            for name, tensor in model.state_dict().items()]
    if optimizer is not None:
        by_param = {id(p): name for name, p in model.named_parameters()}
        for group in optimizer.param_groups:
            for p in group["params"]:
                state = optimizer.state.get(p, {})
                buf = state.get("momentum_buffer")
                if buf is not None:
                    rows.append(("momentum", by_param[id(p)], buf))
    return rows


def save_checkpoint(path: str, model: PanopticNet, optimizer, iteration: int,
                    rng: np.random.Generator) -> None:
    rows = _named_tensors(model, optimizer)
    manifest = {
        "version": CHECKPOINT_VERSION,
        "iteration": iteration,
        "config": model.config.to_dict(),
        "rng_state": rng.bit_generator.state,
        "tensors": [
            {"kind": kind, "name": name, "shape": list(t.shape),
             "dtype": str(t.detach().cpu().numpy().dtype)}
            for kind, name, t in rows
        ],
    }
    sections = [json.dumps(manifest).encode("utf-8")]
    sections += [t.detach().cpu().numpy().tobytes() for _, _, t in rows]
    write_sections(path, sections)


def load_checkpoint(path: str) -> tuple[dict, list]:
    """Manifest plus (kind, name, array) rows; corrupt files raise."""
    try:
        sections = read_sections(path)
    except FormatError as err:
        raise CheckpointError(f"unreadable checkpoint {path}: {err}") from err
    if not sections:
        raise CheckpointError(f"checkpoint {path} is empty")
    try:
        manifest = json.loads(sections[0].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as err:
        raise CheckpointError(f"corrupt checkpoint manifest: {err}") from err
    if manifest.get("version") != CHECKPOINT_VERSION:
        raise CheckpointError(
            f"unsupported checkpoint version {manifest.get('version')!r}")
    rows_meta = manifest.get("tensors")
    if not isinstance(rows_meta, list) or len(sections) != len(rows_meta) + 1:
        raise CheckpointError("checkpoint tensor sections do not match manifest")
    rows = []
    for meta, blob in zip(rows_meta, sections[1:]):
        arr = np.frombuffer(blob, dtype=np.dtype(meta["dtype"]))
        expected = int(np.prod(meta["shape"])) if meta["shape"] else 1
        if arr.size != expected:
            raise CheckpointError(
                f"tensor {meta['name']} has {arr.size} values, "
                f"expected {expected}")
        rows.append((meta["kind"], meta["name"],
                     arr.reshape(meta["shape"]).copy()))
    return manifest, rows


def check_signature(model_config: RunConfig, manifest: dict) -> None:
    stored = RunConfig.from_dict(manifest["config"])
    if stored.model_signature() != model_config.model_signature():
        raise ShapeError(
            "checkpoint was trained with a different model shape: "
            f"{stored.model_signature()} vs {model_config.model_signature()}")


def apply_checkpoint(model: PanopticNet, optimizer, manifest: dict,
                     rows: list) -> None:
    check_signature(model.config, manifest)
    params = {name: arr for kind, name, arr in rows if kind == "param"}
    state = model.state_dict()
    missing = sorted(set(state) - set(params))
    if missing:
        raise CheckpointError(f"checkpoint lacks tensors {missing}")
    for name, target in state.items():
        src = torch.from_numpy(params[name])
        if tuple(src.shape) != tuple(target.shape):
            raise ShapeError(
                f"checkpoint tensor {name} has shape {tuple(src.shape)}, "
                f"model expects {tuple(target.shape)}")
        with torch.no_grad():
            target.copy_(src)
    if optimizer is not None:
        momentum = {name: arr for kind, name, arr in rows
                    if kind == "momentum"}
        named = dict(model.named_parameters())
        for name, arr in momentum.items():
            p = named[name]
            optimizer.state[p] = {
                "momentum_buffer": torch.from_numpy(arr.copy()).to(p.dtype)}


def restore_rng(manifest: dict) -> np.random.Generator:
    rng = np.random.default_rng()
    try:
        rng.bit_generator.state = manifest["rng_state"]
    except (KeyError, ValueError, TypeError) as err:
        raise CheckpointError(f"invalid RNG state in checkpoint: {err}") from err
    return rng


@dataclass
class TrainResult:
    checkpoint_path: str
    metrics_path: str
    iterations_run: int
    final_loss: float


def train(config: RunConfig, dataset: list, out_dir: str,
          resume: str = None) -> TrainResult:
    """Run the loop to config.iterations, appending one JSON metrics line
    per iteration and writing periodic plus final checkpoints."""
    if not dataset:
        raise ShapeError("training needs a nonempty dataset")
    config.validate()
    os.makedirs(out_dir, exist_ok=True)
    torch.set_num_threads(max(1, os.cpu_count() or 1))

    model = build_model(config)
    optimizer = torch.optim.SGD(model.parameters(), lr=config.base_lr,
                                momentum=config.momentum,
                                weight_decay=config.weight_decay)
    if resume is not None:
        manifest, rows = load_checkpoint(resume)
        apply_checkpoint(model, optimizer, manifest, rows)
        rng = restore_rng(manifest)
        start = int(manifest["iteration"])
    else:
        rng = np.random.default_rng(config.seed)
        start = 0

    metrics_path = os.path.join(out_dir, "metrics.jsonl")
    final_path = os.path.join(out_dir, "checkpoint_final.ckpt")
    final_loss = float("nan")
    with open(metrics_path, "a", encoding="utf-8") as log:
        for t in range(start, config.iterations):
            lr = learning_rate(config.base_lr, config.lr_decay_steps,
                               config.decay_factor, t)
            for group in optimizer.param_groups:
                group["lr"] = lr
            indices = rng.integers(0, len(dataset), size=config.batch_size)
            batch = [dataset[int(i)] for i in indices]
            optimizer.zero_grad()
            total, report = model.compute_losses(batch, rng)
            if not torch.isfinite(total):
                raise NumericError(
                    f"loss became non-finite at iteration {t}")
            total.backward()
            torch.nn.utils.clip_grad_norm_(model.parameters(),
                                           config.clip_norm)
            optimizer.step()
            final_loss = float(total.detach())
            line = {"iteration": t, "lr": lr}
            line.update(report.to_dict())
            log.write(json.dumps(line) + "\n")
            done = t + 1
            if config.checkpoint_every and done % config.checkpoint_every == 0 \
                    and done < config.iterations:
                save_checkpoint(
                    os.path.join(out_dir, f"checkpoint_{done:06d}.ckpt"),
                    model, optimizer, done, rng)
    save_checkpoint(final_path, model, optimizer, config.iterations, rng)
    return TrainResult(checkpoint_path=final_path, metrics_path=metrics_path,
                       iterations_run=config.iterations - start,
                       final_loss=final_loss)


def load_model(checkpoint_path: str) -> PanopticNet:
    """Rebuild the network a checkpoint was trained with."""
    manifest, rows = load_checkpoint(checkpoint_path)
    config = RunConfig.from_dict(manifest["config"])
    model = build_model(config)
    apply_checkpoint(model, None, manifest, rows)
    return model


def evaluate(model: PanopticNet, dataset: list) -> PQReport:
    """Aggregate PQ counters over a dataset with gradients disabled."""
    model.eval()
    acc = PQAccumulator()
    for label in dataset:
        pred = model.run_inference([label])[0]
        acc.add(pred, label_to_prediction(label))
    return acc.report()
