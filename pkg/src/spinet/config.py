"""Run configuration: one flat key space covering data, model, losses,
post-processing and training.

Configs are stored as flat JSON. A ``preset`` key expands to a bundle of
loss coefficients (and, for the coco-style preset, the extra pyramid
level) before any explicit keys are applied, so explicit keys always win.
Unknown keys are rejected.
"""

from __future__ import annotations

import dataclasses
import json
from dataclasses import dataclass, field

from .errors import ConfigError

PRESETS = ("cityscapes-style", "coco-style", "custom")

# Preset bundles. cityscapes-style pairs the heavier contour weight with
# bootstrapped CE at top-k 0.2; coco-style drops the contour term, uses
# plain CE, and extends the pyramid with P6.
_PRESET_VALUES: dict[str, dict] = {
    "cityscapes-style": {
        "lambda0": 1.0,
        "lambda1": 1.0,
        "lambda2": 5.0,
        "lambda3": 20.0,
        "lambda4": 1.0,
        "topk_ratio": 0.2,
    },
    "coco-style": {
        "lambda0": 1.0,
        "lambda1": 0.5,
        "lambda2": 3.0,
        "lambda3": 0.0,
        "lambda4": 1.0,
        "topk_ratio": 1.0,
        "include_p6": True,
        "filter_levels": ("P2", "P3", "P4", "P5", "P6"),
    },
    "custom": {},
}

_LEVEL_NAMES = ("P2", "P3", "P4", "P5", "P6")


def preset_lambdas(preset: str):
    """Loss coefficients (lambda0..lambda4) for a named preset.

    Returns None for "custom", which carries no fixed coefficients.
    """
    if preset not in PRESETS:
        raise ConfigError(f"unknown preset {preset!r} (expected one of {PRESETS})")
    values = _PRESET_VALUES[preset]
    if "lambda0" not in values:
        return None
    return tuple(values[f"lambda{i}"] for i in range(5))


@dataclass
class RunConfig:
    # scene generation
    height: int = 64
    width: int = 64
    num_things: int = 2
    num_stuffs: int = 2
    max_instances: int = 3

    # model
    fpn_channels: int = 64
    backbone_widths: tuple[int, ...] = (32, 64, 128, 256)
    include_p6: bool = False
    kernel_k: int = 1
    d_f: int = 16
    d_phi: int = 16
    filter_levels: tuple[str, ...] = ("P2", "P3", "P4", "P5")
    score_threshold: float = 0.45
    samples_per_instance: int = 4
    generator_internal_channels: int = 64
    d_emb: int = 32

    # losses
    preset: str = "cityscapes-style"
    lambda0: float = 1.0
    lambda1: float = 1.0
    lambda2: float = 5.0
    lambda3: float = 20.0
    lambda4: float = 1.0
    topk_ratio: float = 0.2
    focal_alpha: float = 0.25
    focal_gamma: float = 2.0

    # post-processing
    nms_iou_threshold: float = 0.6
    min_thing_area: int = 16
    min_stuff_area: int = 64
    max_detections: int = 100

    # training
    iterations: int = 1000
    batch_size: int = 4
    base_lr: float = 0.01
    lr_decay_steps: tuple[int, ...] = (700, 900)
    decay_factor: float = 0.1
    momentum: float = 0.9
    weight_decay: float = 1e-4
    clip_norm: float = 10.0
    seed: int = 0
    checkpoint_every: int = 500

    # paths (flag-overridable at the command line)
    data_dir: str = ""
    out_dir: str = "runs"

    def lambdas(self) -> tuple[float, float, float, float, float]:
        return (self.lambda0, self.lambda1, self.lambda2, self.lambda3, self.lambda4)

    def validate(self) -> None:
        if self.height < 32 or self.width < 32:
            raise ConfigError("height and width must be at least 32")
        if self.height % 32 or self.width % 32:
            raise ConfigError("height and width must be divisible by 32")
        if self.num_things < 1 or self.num_stuffs < 1:
            raise ConfigError("need at least one thing class and one stuff class")
        if self.max_instances < 1:
            raise ConfigError("max_instances must be >= 1")
        if self.kernel_k < 1 or self.kernel_k % 2 == 0:
            raise ConfigError(f"kernel_k must be odd and positive, got {self.kernel_k}")
        for name in ("d_f", "d_phi", "d_emb", "fpn_channels", "generator_internal_channels"):
            if getattr(self, name) < 1:
                raise ConfigError(f"{name} must be positive")
        if len(self.backbone_widths) != 4 or any(w < 1 for w in self.backbone_widths):
            raise ConfigError("backbone_widths must list four positive widths")
        if self.preset not in PRESETS:
            raise ConfigError(f"unknown preset {self.preset!r} (expected one of {PRESETS})")
        bad = [l for l in self.filter_levels if l not in _LEVEL_NAMES]
        if bad:
            raise ConfigError(f"unknown filter levels {bad}")
        if len(set(self.filter_levels)) != len(self.filter_levels):
            raise ConfigError("filter_levels contains duplicates")
        if "P6" in self.filter_levels and not self.include_p6:
            raise ConfigError("filter_levels includes P6 but include_p6 is false")
        if not 0.0 < self.score_threshold < 1.0:
            raise ConfigError("score_threshold must lie in (0, 1)")
        if not 0.0 < self.topk_ratio <= 1.0:
            raise ConfigError("topk_ratio must lie in (0, 1]")
        if self.samples_per_instance < 1:
            raise ConfigError("samples_per_instance must be >= 1")
        if self.iterations < 1:
            raise ConfigError("iterations must be positive")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be positive")
        steps = self.lr_decay_steps
        if any(steps[i] >= steps[i + 1] for i in range(len(steps) - 1)):
            raise ConfigError("lr_decay_steps must be strictly increasing")
        if steps and (steps[0] < 0 or steps[-1] >= self.iterations):
            raise ConfigError("lr_decay_steps must lie in [0, iterations)")
        if not 0.0 < self.decay_factor < 1.0:
            raise ConfigError("decay_factor must lie in (0, 1)")
        if self.checkpoint_every < 1:
            raise ConfigError("checkpoint_every must be positive")

    def to_dict(self) -> dict:
        out = dataclasses.asdict(self)
        for key, value in out.items():
            if isinstance(value, tuple):
                out[key] = list(value)
        return out

    @classmethod
    def from_dict(cls, data: dict) -> "RunConfig":
        """Build a config from a flat dict, expanding the preset first."""
        if not isinstance(data, dict):
            raise ConfigError("config must be a JSON object")
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = sorted(set(data) - known)
        if unknown:
            raise ConfigError(f"unknown config keys: {', '.join(unknown)}")
        preset = data.get("preset", cls.preset)
        if preset not in PRESETS:
            raise ConfigError(f"unknown preset {preset!r} (expected one of {PRESETS})")
        merged: dict = {"preset": preset}
        merged.update(_PRESET_VALUES[preset])
        merged.update({k: v for k, v in data.items() if k != "preset"})
        tuple_fields = ("backbone_widths", "filter_levels", "lr_decay_steps")
        for name in tuple_fields:
            if name in merged and isinstance(merged[name], list):
                merged[name] = tuple(merged[name])
        cfg = cls(**merged)
        cfg.validate()
        return cfg

    def save(self, path: str) -> None:
        with open(path, "w", encoding="utf-8") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load(cls, path: str) -> "RunConfig":
        try:
            with open(path, "r", encoding="utf-8") as f:
                data = json.load(f)
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: not valid JSON ({exc})") from exc
        return cls.from_dict(data)

    # Keys that determine parameter shapes; a checkpoint trained with one
    # set cannot be loaded into a model built from another.
    MODEL_SHAPE_KEYS = (
        "num_things",
        "num_stuffs",
        "fpn_channels",
        "backbone_widths",
        "include_p6",
        "kernel_k",
        "d_f",
        "d_phi",
        "generator_internal_channels",
        "d_emb",
    )

    def model_signature(self) -> dict:
        return {k: getattr(self, k) for k in self.MODEL_SHAPE_KEYS}
