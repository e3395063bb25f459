"""Procedural paired-domain segmentation scenes with a controllable gap.

Every scene is a sky band, a road band, a textured background, and a few
elliptical blobs of two "thing" classes (one rare). Appearance shifts are
applied after layout, so the two domains share geometry statistics but
differ in color, which is exactly the gap prototype calibration targets.

All randomness is drawn from counter-based generators keyed by
(seed, purpose, index), so scenes are reproducible individually and in any
order. Source scenes are simply scenes generated with the zero shift.
"""
from __future__ import annotations

from dataclasses import dataclass, field, replace

import numpy as np

from .core import ContractViolation, LabelMap, SealedLabelError
from .encoder import keyed_rng

#: Scene index bases keeping training-source, training-target, and
#: evaluation streams disjoint.
TARGET_INDEX_BASE = 1_000_000
EVAL_INDEX_BASE = 2_000_000

CLASS_NAMES = ("background", "road", "sky", "blob_a", "blob_b")

_DEFAULT_COLORS = (
    (0.36, 0.44, 0.30),  # background: muted green
    (0.46, 0.46, 0.56),  # road: gray-blue
    (0.55, 0.72, 0.90),  # sky: light blue
    (0.70, 0.28, 0.22),  # blob_a: brick red
    (0.78, 0.66, 0.20),  # blob_b: ochre (rare)
)


@dataclass(frozen=True)
class SceneSpec:
    """Geometry and source-domain appearance of the generated scenes."""

    height: int = 64
    width: int = 64
    num_classes: int = 5
    base_colors: tuple = _DEFAULT_COLORS
    blobs_min: int = 1
    blobs_max: int = 4
    rare_class_rate: float = 0.3  # fraction of scenes containing blob_b
    class_wobble: float = 0.04  # per-scene per-class brightness jitter
    texture: float = 0.03  # per-pixel appearance noise
    seed: int = 0

    def __post_init__(self):
        if self.num_classes != len(self.base_colors):
            raise ContractViolation("one base color per class required")
        colors = np.asarray(self.base_colors)
        for i in range(len(colors)):
            for j in range(i + 1, len(colors)):
                if np.abs(colors[i] - colors[j]).max() < 0.1:
                    raise ContractViolation(
                        f"class colors {i} and {j} closer than 0.1 in max-norm"
                    )


@dataclass(frozen=True)
class DomainShift:
    """Appearance shift applied to target scenes after layout."""

    global_offset: tuple = (0.0, 0.0, 0.0)
    class_offsets: tuple = ()  # per-class 3-vectors; empty means all zero
    noise_sigma: float = 0.0
    texture_jitter: float = 0.0

    def is_zero(self) -> bool:
        return (
            not any(self.global_offset)
            and not any(any(row) for row in self.class_offsets)
            and self.noise_sigma == 0.0
            and self.texture_jitter == 0.0
        )

    @staticmethod
    def zero() -> "DomainShift":
        return DomainShift()


def benchmark_shift(strength: float = 1.0) -> DomainShift:
    """The stock benchmark gap; `strength` scales every component.

    A dominant global color cast plus smaller class-wise drifts in
    non-confusable directions: the global part suppresses naive cross-domain
    prototype matching while the class-wise part is what per-class bias
    calibration has to recover.
    """
    s = strength
    return DomainShift(
        global_offset=(-0.042 * s, 0.021 * s, 0.056 * s),
        class_offsets=(
            (0.025 * s, 0.025 * s, 0.02 * s),  # background brightens
            (-0.025 * s, -0.025 * s, -0.025 * s),  # road darkens
            (0.015 * s, -0.015 * s, -0.025 * s),  # sky desaturates
            (0.03 * s, 0.025 * s, -0.015 * s),  # blob_a warms
            (-0.025 * s, -0.03 * s, 0.02 * s),  # blob_b cools
        ),
        noise_sigma=0.02 * s,
        texture_jitter=0.02 * s,
    )


@dataclass(frozen=True)
class LabeledScene:
    """Image in [0, 1] plus fully labeled ground truth."""

    image: np.ndarray
    ground_truth: LabelMap
    domain: str
    index: int

    def __post_init__(self):
        if not np.isfinite(self.image).all():
            raise ContractViolation("scene image must be finite")
        if self.image.min() < 0.0 or self.image.max() > 1.0:
            raise ContractViolation("scene image must lie in [0, 1]")
        if not self.ground_truth.labeled_mask().all():
            raise ContractViolation("scene ground truth must label every pixel")


def _layout(spec: SceneSpec, index: int) -> np.ndarray:
    rng = keyed_rng(spec.seed, "layout", index)
    h, w = spec.height, spec.width
    grid = np.zeros((h, w), dtype=np.int16)  # background
    sky_h = int(rng.integers(round(0.15 * h), round(0.30 * h) + 1))
    road_h = int(rng.integers(round(0.18 * h), round(0.32 * h) + 1))
    grid[:sky_h] = 2
    grid[h - road_h:] = 1

    n_blobs = int(rng.integers(spec.blobs_min, spec.blobs_max + 1))
    has_rare = rng.random() < spec.rare_class_rate
    rare_slot = int(rng.integers(0, n_blobs)) if has_rare else -1
    yy, xx = np.mgrid[0:h, 0:w]
    for k in range(n_blobs):
        cy = rng.uniform(sky_h + 0.05 * h, h - road_h - 0.05 * h)
        cx = rng.uniform(0.1 * w, 0.9 * w)
        ry = rng.uniform(0.07 * h, 0.17 * h)
        rx = rng.uniform(0.07 * w, 0.17 * w)
        mask = ((yy - cy) / ry) ** 2 + ((xx - cx) / rx) ** 2 <= 1.0
        grid[mask] = 4 if k == rare_slot else 3
    return grid


def generate(spec: SceneSpec, shift: DomainShift, index: int) -> LabeledScene:
    """Deterministic scene for (spec.seed, index); shift=zero gives the source look."""
    classmap = _layout(spec, index)
    h, w = spec.height, spec.width
    colors = np.asarray(spec.base_colors)

    rng_tex = keyed_rng(spec.seed, "texture", index)
    wobble = rng_tex.uniform(-spec.class_wobble, spec.class_wobble, size=spec.num_classes)
    image = colors[classmap] + wobble[classmap][..., None]
    if spec.texture > 0:
        image = image + rng_tex.uniform(-spec.texture, spec.texture, size=(h, w, 3))

    # Shift components are guarded so the zero shift is bit-identical to source.
    if any(shift.global_offset):
        image = image + np.asarray(shift.global_offset)
    if shift.class_offsets and any(any(row) for row in shift.class_offsets):
        offsets = np.asarray(shift.class_offsets)
        if offsets.shape != (spec.num_classes, 3):
            raise ContractViolation("class_offsets must be one 3-vector per class")
        image = image + offsets[classmap]
    if shift.noise_sigma > 0 or shift.texture_jitter > 0:
        rng_shift = keyed_rng(spec.seed, "shift", index)
        if shift.noise_sigma > 0:
            image = image + rng_shift.normal(0.0, shift.noise_sigma, size=(h, w, 3))
        if shift.texture_jitter > 0:
            image = image + rng_shift.uniform(
                -shift.texture_jitter, shift.texture_jitter, size=(h, w, 3)
            )

    image = np.clip(image, 0.0, 1.0)
    domain = "source" if shift.is_zero() else "target"
    return LabeledScene(image, LabelMap(classmap, spec.num_classes), domain, index)


class TargetView:
    """Training view of a target scene: image only, ground truth sealed."""

    def __init__(self, image: np.ndarray, index: int, num_classes: int):
        self.image = image
        self.index = index
        self.num_classes = num_classes

    @property
    def ground_truth(self):
        raise SealedLabelError(
            "target ground truth is sealed during training; use the evaluation handle"
        )


class EvalHandle:
    """Evaluation-only access to target ground truth.

    Metrics code may read training-target labels and the held-out evaluation
    scenes through this handle; the training path never touches it.
    """

    def __init__(self, train_gt: list, eval_scenes: list):
        self._train_gt = train_gt
        self.eval_scenes = eval_scenes

    def train_ground_truth(self, position: int) -> LabelMap:
        return self._train_gt[position]


@dataclass
class SceneDataset:
    """Source scenes with labels, sealed target views, and the eval handle."""

    spec: SceneSpec
    shift: DomainShift
    source: list
    target: list
    eval_handle: EvalHandle


def dataset(
    spec: SceneSpec,
    shift: DomainShift,
    n_source: int,
    n_target: int,
    n_eval: int = 0,
) -> SceneDataset:
    """Build disjoint source/target/eval streams with target labels sequestered."""
    if n_source < 1 or n_target < 1 or n_eval < 0:
        raise ContractViolation("need at least one scene per training domain")
    source = [generate(spec, DomainShift.zero(), i) for i in range(n_source)]
    target_scenes = [
        generate(spec, shift, TARGET_INDEX_BASE + i) for i in range(n_target)
    ]
    target = [
        TargetView(sc.image, sc.index, spec.num_classes) for sc in target_scenes
    ]
    train_gt = [sc.ground_truth for sc in target_scenes]
    eval_scenes = [generate(spec, shift, EVAL_INDEX_BASE + i) for i in range(n_eval)]
    return SceneDataset(spec, shift, source, target, EvalHandle(train_gt, eval_scenes))
