"""Single-shot panoptic segmentation on synthetic scenes."""

from .config import PRESETS, RunConfig, preset_lambdas
from .errors import (CheckpointError, ConfigError, FormatError, NumericError,
                     ShapeError, SpinetError)
from .model import PanopticNet, images_to_tensor
from .postprocess import (PanopticPrediction, PQAccumulator, PQReport,
                          SegmentInfo, label_to_prediction, mask_nms,
                          panoptic_merge, pq_evaluate, render)
from .synth import (PanopticLabel, SceneSpec, contour_ground_truth,
                    generate_scene, load_label, save_label)
from .trainer import TrainResult, build_model, evaluate, load_model, train

__version__ = "0.1.0"

__all__ = [
    "CheckpointError",
    "ConfigError",
    "FormatError",
    "NumericError",
    "PanopticLabel",
    "PanopticNet",
    "PanopticPrediction",
    "PQAccumulator",
    "PQReport",
    "PRESETS",
    "RunConfig",
    "SceneSpec",
    "SegmentInfo",
    "ShapeError",
    "SpinetError",
    "TrainResult",
    "build_model",
    "contour_ground_truth",
    "evaluate",
    "generate_scene",
    "images_to_tensor",
    "label_to_prediction",
    "load_label",
    "load_model",
    "mask_nms",
    "panoptic_merge",
    "pq_evaluate",
    "preset_lambdas",
    "render",
    "save_label",
    "train",
    "__version__",
]
