"""Synthetic panoptic scenes: geometric things over banded stuff backgrounds.

A scene is a ``PanopticLabel``: an RGB image plus per-pixel semantic and
instance maps. Stuff classes occupy ids ``0 .. num_stuffs-1`` and fill the
background as horizontal or vertical bands; thing classes occupy
``num_stuffs .. num_stuffs+num_things-1`` and appear as filled ellipses,
rectangles, or triangles (shape keyed to the class). Later instances
occlude earlier ones; fully hidden instances are dropped, so every
surviving instance id labels a nonempty region of exactly one class.

Pixels take a class-keyed base color with seeded noise on top, which keeps
the task easy enough to overfit yet not solvable from a single pixel.
"""

from __future__ import annotations

import colorsys
import json
from dataclasses import dataclass

import numpy as np

from .blockio import read_sections, write_sections
from .errors import ConfigError, FormatError

PAN_VERSION = 1
NOISE_STD = 0.06


@dataclass
class SceneSpec:
    height: int
    width: int
    num_things: int
    num_stuffs: int
    max_instances: int

    @property
    def num_classes(self) -> int:
        return self.num_things + self.num_stuffs

    def validate(self) -> None:
        if self.height < 32 or self.width < 32 or self.height % 32 or self.width % 32:
            raise ConfigError(
                f"scene size {self.height}x{self.width} must be >=32 and divisible by 32"
            )
        if self.max_instances < 1:
            raise ConfigError("max_instances must be >= 1")
        if self.num_things < 1 or self.num_stuffs < 1:
            raise ConfigError("need at least one thing and one stuff class")


@dataclass
class PanopticLabel:
    """Ground truth for one scene.

    image        : (H, W, 3) float32 in [0, 1]
    semantic_map : (H, W) int32, class id per pixel
    instance_map : (H, W) int32, 0 where no instance
    class_table  : [(class_id, is_thing), ...] for all class ids
    """

    image: np.ndarray
    semantic_map: np.ndarray
    instance_map: np.ndarray
    class_table: list[tuple[int, bool]]

    @property
    def height(self) -> int:
        return int(self.semantic_map.shape[0])

    @property
    def width(self) -> int:
        return int(self.semantic_map.shape[1])

    def thing_ids(self) -> list[int]:
        return [cid for cid, is_thing in self.class_table if is_thing]

    def stuff_ids(self) -> list[int]:
        return [cid for cid, is_thing in self.class_table if not is_thing]

    def num_stuffs(self) -> int:
        return len(self.stuff_ids())

    def instances(self) -> list[int]:
        ids = np.unique(self.instance_map)
        return [int(i) for i in ids if i != 0]

    def instance_mask(self, instance_id: int) -> np.ndarray:
        return self.instance_map == instance_id

    def instance_class(self, instance_id: int) -> int:
        classes = np.unique(self.semantic_map[self.instance_map == instance_id])
        if len(classes) != 1:
            raise FormatError(
                f"instance {instance_id} spans classes {classes.tolist()}"
            )
        return int(classes[0])


@dataclass
class ContourTarget:
    """Binary map marking pixels adjacent (4-connectivity) to another class."""

    contour_map: np.ndarray  # (H, W) uint8


def class_color(class_id: int, num_classes: int) -> np.ndarray:
    """Deterministic, well-separated base color for a class id."""
    hue = (class_id / max(num_classes, 1) + 0.13) % 1.0
    val = 0.45 + 0.5 * ((class_id * 7) % 3) / 2.0
    return np.asarray(colorsys.hsv_to_rgb(hue, 0.55, val), dtype=np.float32)


def _shape_mask(kind: int, height: int, width: int, cy: float, cx: float,
                ry: float, rx: float) -> np.ndarray:
    ys = np.arange(height, dtype=np.float64)[:, None]
    xs = np.arange(width, dtype=np.float64)[None, :]
    if kind == 0:  # ellipse
        return ((ys - cy) / ry) ** 2 + ((xs - cx) / rx) ** 2 <= 1.0
    if kind == 1:  # rectangle
        return (np.abs(ys - cy) <= ry) & (np.abs(xs - cx) <= rx)
    # upward triangle: width grows linearly from apex (cy - ry) to base (cy + ry)
    t = (ys - (cy - ry)) / (2.0 * ry)
    half_width = rx * np.clip(t, 0.0, 1.0)
    return (t >= 0.0) & (t <= 1.0) & (np.abs(xs - cx) <= half_width)


def generate_scene(seed: int, spec: SceneSpec) -> PanopticLabel:
    """Generate one deterministic scene for ``seed``."""
    spec.validate()
    rng = np.random.default_rng(seed)
    h, w = spec.height, spec.width

    class_table = [(cid, False) for cid in range(spec.num_stuffs)]
    class_table += [(spec.num_stuffs + t, True) for t in range(spec.num_things)]

    # stuff background: bands along a random axis, random class per band
    semantic = np.zeros((h, w), dtype=np.int32)
    horizontal = bool(rng.integers(0, 2))
    axis_len = h if horizontal else w
    n_bands = int(rng.integers(2, 5))
    cuts = np.sort(rng.choice(np.arange(4, axis_len - 3), size=n_bands - 1, replace=False))
    edges = [0, *cuts.tolist(), axis_len]
    for b in range(n_bands):
        cls = int(rng.integers(0, spec.num_stuffs))
        if horizontal:
            semantic[edges[b]:edges[b + 1], :] = cls
        else:
            semantic[:, edges[b]:edges[b + 1]] = cls

    # things: painter's algorithm, later instances occlude earlier ones
    instance = np.zeros((h, w), dtype=np.int32)
    n_instances = int(rng.integers(1, spec.max_instances + 1))
    scale = min(h, w)
    for k in range(1, n_instances + 1):
        cls = spec.num_stuffs + int(rng.integers(0, spec.num_things))
        kind = (cls - spec.num_stuffs) % 3
        ry = rng.uniform(scale / 10.0, scale / 4.5)
        rx = rng.uniform(scale / 10.0, scale / 4.5)
        cy = rng.uniform(ry * 0.5, h - ry * 0.5)
        cx = rng.uniform(rx * 0.5, w - rx * 0.5)
        mask = _shape_mask(kind, h, w, cy, cx, ry, rx)
        if not mask.any():
            continue
        semantic[mask] = cls
        instance[mask] = k

    # drop fully occluded instances and renumber the survivors 1..K
    survivors = [k for k in np.unique(instance) if k != 0]
    remap = np.zeros(n_instances + 1, dtype=np.int32)
    for new_id, old_id in enumerate(survivors, start=1):
        remap[old_id] = new_id
    instance = remap[instance]

    # class-keyed colors plus seeded noise
    palette = np.stack([class_color(cid, spec.num_classes) for cid in range(spec.num_classes)])
    image = palette[semantic].astype(np.float32)
    image += rng.normal(0.0, NOISE_STD, size=image.shape).astype(np.float32)
    np.clip(image, 0.0, 1.0, out=image)

    return PanopticLabel(image=image, semantic_map=semantic,
                         instance_map=instance, class_table=class_table)


def contour_ground_truth(label: PanopticLabel) -> ContourTarget:
    """Mark pixels whose 4-neighborhood contains a different semantic class.

    Neighbors outside the image are ignored, so the border itself is never
    contour. Instance-vs-instance borders within one class are not contour.
    """
    sem = label.semantic_map
    contour = np.zeros(sem.shape, dtype=bool)
    diff_v = sem[1:, :] != sem[:-1, :]
    contour[1:, :] |= diff_v
    contour[:-1, :] |= diff_v
    diff_h = sem[:, 1:] != sem[:, :-1]
    contour[:, 1:] |= diff_h
    contour[:, :-1] |= diff_h
    return ContourTarget(contour_map=contour.astype(np.uint8))


def validate_label(label: PanopticLabel) -> None:
    """Check every PanopticLabel invariant; raise FormatError on violation."""
    h, w = label.semantic_map.shape
    if label.instance_map.shape != (h, w):
        raise FormatError("semantic_map and instance_map shapes differ")
    if label.image.shape != (h, w, 3):
        raise FormatError(f"image shape {label.image.shape} does not match maps {h}x{w}")
    ids = sorted({cid for cid, _ in label.class_table})
    if ids != list(range(len(label.class_table))):
        raise FormatError(f"class ids must be 0..N-1 without gaps, got {ids}")
    stuff = set(label.stuff_ids())
    things = set(label.thing_ids())
    if stuff and things and max(stuff) > min(things):
        raise FormatError("stuff ids must precede thing ids")

    present = np.unique(label.semantic_map)
    unknown = [int(c) for c in present if c < 0 or c >= len(label.class_table)]
    if unknown:
        raise FormatError(f"semantic_map contains unknown class ids {unknown}")

    thing_pixels = np.isin(label.semantic_map, sorted(things))
    bad = (label.instance_map != 0) & ~thing_pixels
    if bad.any():
        y, x = np.argwhere(bad)[0]
        raise FormatError(
            f"instance id on non-thing pixel at ({int(y)}, {int(x)}): "
            f"class {int(label.semantic_map[y, x])}"
        )
    orphan = thing_pixels & (label.instance_map == 0)
    if orphan.any():
        y, x = np.argwhere(orphan)[0]
        raise FormatError(f"thing pixel without instance id at ({int(y)}, {int(x)})")

    for inst in label.instances():
        classes = np.unique(label.semantic_map[label.instance_map == inst])
        if len(classes) != 1:
            raise FormatError(
                f"instance {inst} spans multiple classes {classes.tolist()}"
            )

    if not np.isfinite(label.image).all():
        raise FormatError("image contains non-finite values")
    if label.image.min() < 0.0 or label.image.max() > 1.0:
        raise FormatError("image values must lie in [0, 1]")


def save_label(path: str, label: PanopticLabel) -> None:
    """Write a ``.pan`` file: image, semantic, instance blocks, JSON header."""
    h, w = label.semantic_map.shape
    header = {
        "H": int(h),
        "W": int(w),
        "class_table": [[int(cid), bool(t)] for cid, t in label.class_table],
        "version": PAN_VERSION,
    }
    sections = [
        np.ascontiguousarray(label.image, dtype="<f4").tobytes(),
        np.ascontiguousarray(label.semantic_map, dtype="<i4").tobytes(),
        np.ascontiguousarray(label.instance_map, dtype="<i4").tobytes(),
        json.dumps(header).encode("utf-8"),
    ]
    write_sections(path, sections)


def load_label(path: str) -> PanopticLabel:
    """Read and fully validate a ``.pan`` file."""
    sections = read_sections(path, expect=4)
    try:
        header = json.loads(sections[3].decode("utf-8"))
    except (UnicodeDecodeError, json.JSONDecodeError) as exc:
        raise FormatError(f"{path}: header is not valid JSON ({exc})") from exc
    for key in ("H", "W", "class_table", "version"):
        if key not in header:
            raise FormatError(f"{path}: header missing field {key!r}")
    if header["version"] != PAN_VERSION:
        raise FormatError(f"{path}: unsupported version {header['version']}")
    h, w = int(header["H"]), int(header["W"])
    if h < 1 or w < 1:
        raise FormatError(f"{path}: bad dimensions {h}x{w}")
    expected = [("image", h * w * 3 * 4), ("semantic_map", h * w * 4), ("instance_map", h * w * 4)]
    for (name, size), blob in zip(expected, sections[:3]):
        if len(blob) != size:
            raise FormatError(
                f"{path}: section {name} has {len(blob)} bytes, expected {size}"
            )
    image = np.frombuffer(sections[0], dtype="<f4").reshape(h, w, 3).copy()
    semantic = np.frombuffer(sections[1], dtype="<i4").reshape(h, w).astype(np.int32)
    instance = np.frombuffer(sections[2], dtype="<i4").reshape(h, w).astype(np.int32)
    try:
        table = [(int(cid), bool(t)) for cid, t in header["class_table"]]
    except (TypeError, ValueError) as exc:
        raise FormatError(f"{path}: malformed class_table") from exc
    label = PanopticLabel(image=image, semantic_map=semantic,
                          instance_map=instance, class_table=table)
    try:
        validate_label(label)
    except FormatError as exc:
        raise FormatError(f"{path}: {exc}") from exc
    return label
