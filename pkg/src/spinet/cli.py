"""Command-line entry points: gen, train, eval, infer.

Exit codes: 0 success, 2 validation problem, 3 I/O or file-format
problem, 4 numeric failure during training. SPINET_SEED supplies the
seed when neither a flag nor the config file does.
"""

from __future__ import annotations

import argparse
import glob
import json
import os
import sys

from .config import RunConfig
from .errors import (CheckpointError, ConfigError, FormatError, NumericError,
                     ShapeError)
from .postprocess import render, save_prediction
from .synth import SceneSpec, generate_scene, load_label, save_label
from .trainer import evaluate, load_model, train

DATASET_MANIFEST = "manifest.json"


def _env_seed() -> int | None:
    raw = os.environ.get("SPINET_SEED")
    if raw is None:
        return None
    try:
        return int(raw)
    except ValueError as err:
        raise ConfigError(f"SPINET_SEED must be an integer, got {raw!r}") from err


def resolve_seed(flag_value, config_has_seed: bool, config_seed: int = 0) -> int:
    """Flag beats config file beats SPINET_SEED beats zero."""
    if flag_value is not None:
        return int(flag_value)
    if config_has_seed:
        return int(config_seed)
    env = _env_seed()
    return env if env is not None else 0


def cmd_gen(args) -> int:
    seed = resolve_seed(args.seed, False)
    spec = SceneSpec(height=args.height, width=args.width,
                     num_things=args.things, num_stuffs=args.stuffs,
                     max_instances=args.max_instances)
    spec.validate()
    os.makedirs(args.out, exist_ok=True)
    files = []
    for i in range(args.count):
        label = generate_scene(seed + i, spec)
        name = f"scene_{i:04d}.pan"
        save_label(os.path.join(args.out, name), label)
        files.append(name)
    manifest = {"version": 1, "count": args.count, "seed": seed,
                "height": spec.height, "width": spec.width,
                "num_things": spec.num_things, "num_stuffs": spec.num_stuffs,
                "max_instances": spec.max_instances, "files": files}
    with open(os.path.join(args.out, DATASET_MANIFEST), "w",
              encoding="utf-8") as f:
        json.dump(manifest, f, indent=2, sort_keys=True)
        f.write("\n")
    print(f"wrote {args.count} scenes to {args.out}")
    return 0


def load_dataset(data_dir: str) -> list:
    """Labels in manifest order, or sorted .pan files without a manifest."""
    if not os.path.isdir(data_dir):
        raise FormatError(f"dataset directory {data_dir!r} does not exist")
    manifest_path = os.path.join(data_dir, DATASET_MANIFEST)
    if os.path.exists(manifest_path):
        with open(manifest_path, "r", encoding="utf-8") as f:
            try:
                manifest = json.load(f)
            except json.JSONDecodeError as err:
                raise FormatError(f"bad dataset manifest: {err}") from err
        names = manifest.get("files", [])
    else:
        names = sorted(os.path.basename(p) for p in
                       glob.glob(os.path.join(data_dir, "*.pan")))
    if not names:
        raise FormatError(f"no .pan files found under {data_dir!r}")
    return [load_label(os.path.join(data_dir, name)) for name in names]


def _load_config(args) -> RunConfig:
    with open(args.config, "r", encoding="utf-8") as f:
        try:
            raw = json.load(f)
        except json.JSONDecodeError as err:
            raise ConfigError(f"{args.config}: not valid JSON ({err})") from err
    if not isinstance(raw, dict):
        raise ConfigError("config must be a JSON object")
    seed = resolve_seed(args.seed, "seed" in raw, raw.get("seed", 0))
    raw["seed"] = seed
    for key, flag in (("data_dir", args.data), ("out_dir", args.out)):
        if flag is not None:
            raw[key] = flag
    for item in args.set or []:
        if "=" not in item:
            raise ConfigError(f"--set expects KEY=VALUE, got {item!r}")
        key, value = item.split("=", 1)
        try:
            raw[key] = json.loads(value)
        except json.JSONDecodeError:
            raw[key] = value
    return RunConfig.from_dict(raw)


def cmd_train(args) -> int:
    config = _load_config(args)
    if not config.data_dir:
        raise ConfigError("no dataset: set data_dir in the config or pass --data")
    dataset = load_dataset(config.data_dir)
    os.makedirs(config.out_dir, exist_ok=True)
    config.save(os.path.join(config.out_dir, "config.json"))
    result = train(config, dataset, config.out_dir, resume=args.resume)
    print(f"trained {result.iterations_run} iterations, "
          f"final loss {result.final_loss:.4f}")
    print(f"checkpoint: {result.checkpoint_path}")
    print(f"metrics: {result.metrics_path}")
    return 0


def cmd_eval(args) -> int:
    model = load_model(args.checkpoint)
    dataset = load_dataset(args.data)
    report = evaluate(model, dataset)
    os.makedirs(args.out, exist_ok=True)
    out_path = os.path.join(args.out, "pq_report.json")
    with open(out_path, "w", encoding="utf-8") as f:
        f.write(report.to_json())
        f.write("\n")
    print(report.to_json())
    print(f"report: {out_path}")
    return 0


def cmd_infer(args) -> int:
    model = load_model(args.checkpoint)
    dataset = load_dataset(args.data)
    os.makedirs(args.out, exist_ok=True)
    for i, label in enumerate(dataset):
        pred = model.run_inference([label])[0]
        save_prediction(os.path.join(args.out, f"pred_{i:04d}.pred"), pred)
        if args.render:
            render(pred, label.image,
                   os.path.join(args.out, f"pred_{i:04d}.png"))
    print(f"wrote {len(dataset)} predictions to {args.out}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="spinet",
        description="Single-shot panoptic segmentation on synthetic scenes.")
    sub = parser.add_subparsers(dest="command", required=True)

    gen = sub.add_parser("gen", help="generate a synthetic dataset")
    gen.add_argument("--out", required=True)
    gen.add_argument("--count", type=int, required=True)
    gen.add_argument("--seed", type=int, default=None)
    gen.add_argument("--height", type=int, default=64)
    gen.add_argument("--width", type=int, default=64)
    gen.add_argument("--things", type=int, default=2)
    gen.add_argument("--stuffs", type=int, default=2)
    gen.add_argument("--max-instances", type=int, default=3)
    gen.set_defaults(func=cmd_gen)

    tr = sub.add_parser("train", help="train from a JSON config")
    tr.add_argument("--config", required=True)
    tr.add_argument("--resume", default=None)
    tr.add_argument("--data", default=None, help="override data_dir")
    tr.add_argument("--out", default=None, help="override out_dir")
    tr.add_argument("--seed", type=int, default=None)
    tr.add_argument("--set", action="append", metavar="KEY=VALUE",
                    help="override any config key")
    tr.set_defaults(func=cmd_train)

    ev = sub.add_parser("eval", help="evaluate PQ on a dataset")
    ev.add_argument("--checkpoint", required=True)
    ev.add_argument("--data", required=True)
    ev.add_argument("--out", required=True)
    ev.set_defaults(func=cmd_eval)

    inf = sub.add_parser("infer", help="write per-image predictions")
    inf.add_argument("--checkpoint", required=True)
    inf.add_argument("--data", required=True)
    inf.add_argument("--out", required=True)
    inf.add_argument("--render", action="store_true")
    inf.set_defaults(func=cmd_infer)
    return parser


def main(argv=None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except (ConfigError, ShapeError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    except (FormatError, CheckpointError, OSError) as err:
        print(f"error: {err}", file=sys.stderr)
        return 3
    except NumericError as err:
        print(f"error: {err}", file=sys.stderr)
        return 4


if __name__ == "__main__":
    sys.exit(main())
