"""Static, dynamic, and hybrid pseudo labels for the unlabeled domain.

Static labels keep a fixed per-class fraction of the most confident
parametric predictions. Dynamic labels transfer class identity from
calibrated prototypes to pixels through cosine matching and are regenerated
whenever the paired batch changes. Hybrid fusion lets dynamic labels win.
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

from .core import (
    ConfigError,
    ContractViolation,
    FeatureMap,
    LabelMap,
    ProbMap,
    UNLABELED,
    cosine_similarity_matrix,
)
from .prototypes import PrototypeSet


@dataclass(frozen=True)
class StaticLabelConfig:
    """Per-class keep fraction and how often the labels are recomputed."""

    fraction: float = 0.5
    refresh_interval: int = 100

    def __post_init__(self):
        if not (0.0 <= self.fraction <= 1.0):
            raise ConfigError(f"fraction must be in [0, 1], got {self.fraction}")
        if self.refresh_interval < 1:
            raise ConfigError("refresh_interval must be >= 1")


@dataclass(frozen=True)
class PseudoLabelReport:
    """Label density and agreement with ground truth."""

    density: float
    accuracy: float
    per_class_density: np.ndarray
    labeled_pixels: int
    total_pixels: int
    no_labels: bool


def static_labels(probs: ProbMap, cfg: StaticLabelConfig) -> LabelMap:
    """Keep the top fraction of each argmax class by confidence, class-balanced.

    Within a class, ties on confidence resolve toward the lower pixel index.
    """
    flat = probs.data.reshape(-1, probs.num_classes)
    pred = flat.argmax(axis=1)
    conf = flat[np.arange(flat.shape[0]), pred]
    out = np.full(flat.shape[0], UNLABELED, dtype=np.int16)
    for c in range(probs.num_classes):
        members = np.flatnonzero(pred == c)
        if members.size == 0:
            continue
        keep = math.ceil(cfg.fraction * members.size)
        if keep == 0:
            continue
        order = np.argsort(-conf[members], kind="stable")
        out[members[order[:keep]]] = c
    return LabelMap(out.reshape(probs.height, probs.width), probs.num_classes)


def dynamic_labels(
    features: FeatureMap,
    calibrated: PrototypeSet,
    threshold: float,
    num_classes: int,
) -> LabelMap:
    """Assign each pixel its best-matching prototype class if the match is confident.

    The winning class is the cosine argmax over available prototypes (ties
    break toward the lowest class index); the pixel stays unlabeled unless
    the winning similarity exceeds the threshold. An empty prototype set
    yields an all-unlabeled map.
    """
    if not (-1.0 < threshold < 1.0):
        raise ConfigError(f"similarity threshold must be in (-1, 1), got {threshold}")
    classes, proto_mat = calibrated.matrix()
    if not classes:
        return LabelMap.empty(features.height, features.width, num_classes)
    sims = cosine_similarity_matrix(features.pixels(), proto_mat)
    best = sims.argmax(axis=1)  # first max wins; columns are in class order
    best_sim = sims[np.arange(sims.shape[0]), best]
    out = np.full(sims.shape[0], UNLABELED, dtype=np.int16)
    hit = best_sim > threshold
    out[hit] = np.asarray(classes, dtype=np.int16)[best[hit]]
    return LabelMap(out.reshape(features.height, features.width), num_classes)


def hybrid_fuse(dynamic: LabelMap, static: LabelMap) -> LabelMap:
    """Per-pixel fusion: dynamic label if present, else static, else unlabeled."""
    if (dynamic.height, dynamic.width, dynamic.num_classes) != (
        static.height,
        static.width,
        static.num_classes,
    ):
        raise ContractViolation("label maps disagree on shape or classes")
    out = np.where(dynamic.indices != UNLABELED, dynamic.indices, static.indices)
    return LabelMap(out.astype(np.int16), dynamic.num_classes)


def label_metrics(labels: LabelMap, ground_truth: LabelMap) -> PseudoLabelReport:
    """Density over all pixels and accuracy over labeled ones.

    A map with zero labels reports accuracy 1.0 with the `no_labels` flag set.
    Per-class density is the labeled fraction within each ground-truth class.
    """
    if (labels.height, labels.width) != (ground_truth.height, ground_truth.width):
        raise ContractViolation("label/ground-truth shape mismatch")
    if not ground_truth.labeled_mask().all():
        raise ContractViolation("ground truth must be fully labeled")
    mask = labels.labeled_mask()
    total = labels.height * labels.width
    labeled = int(mask.sum())
    if labeled == 0:
        per_class = np.zeros(ground_truth.num_classes)
        return PseudoLabelReport(0.0, 1.0, per_class, 0, total, True)
    correct = int((labels.indices[mask] == ground_truth.indices[mask]).sum())
    per_class = np.zeros(ground_truth.num_classes)
    for c in range(ground_truth.num_classes):
        gt_c = ground_truth.indices == c
        if gt_c.any():
            per_class[c] = float(mask[gt_c].mean())
    return PseudoLabelReport(
        density=labeled / total,
        accuracy=correct / labeled,
        per_class_density=per_class,
        labeled_pixels=labeled,
        total_pixels=total,
        no_labels=False,
    )
