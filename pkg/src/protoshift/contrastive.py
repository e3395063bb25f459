"""Bi-directional pixel-prototype contrastive losses plus the base terms.

The forward term matches target pixels against source prototypes, the
backward term source pixels against target prototypes; both share one
implementation. Every loss returns its analytical gradients; labels and
bias corrections are constants as far as gradients are concerned.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import (
    COSINE_EPS,
    ConfigError,
    ContractViolation,
    FeatureMap,
    LabelMap,
    ProbMap,
    UNLABELED,
    entropy_map,
    log_softmax,
    stable_softmax,
)
from .prototypes import PrototypeSet


@dataclass(frozen=True)
class LossWeights:
    """Balance factors for the loss terms and the contrastive temperature."""

    seg_source: float = 1.0
    seg_target: float = 1.0
    ent_source: float = 0.0
    ent_target: float = 0.0
    fcl: float = 1.0
    bcl: float = 1.0
    temperature: float = 0.1

    def __post_init__(self):
        if self.temperature <= 0:
            raise ConfigError(f"temperature must be positive, got {self.temperature}")
        for name in ("seg_source", "seg_target", "ent_source", "ent_target", "fcl", "bcl"):
            if getattr(self, name) < 0:
                raise ConfigError(f"loss weight {name} must be nonnegative")


@dataclass(frozen=True)
class LossBreakdown:
    """Per-term loss values with their exact weighted recomposition."""

    seg_source: float
    seg_target: float
    ent_source: float
    ent_target: float
    fcl: float
    bcl: float
    base: float
    total: float
    pixel_counts: dict = field(default_factory=dict)


@dataclass(frozen=True)
class ContrastResult:
    loss: float
    grad_features: np.ndarray
    grad_protos: dict[int, np.ndarray]
    num_pixels: int
    num_skipped: int

    @property
    def no_pairs(self) -> bool:
        return self.num_pixels == 0


@dataclass(frozen=True)
class PixelLossResult:
    loss: float
    grad_logits: np.ndarray
    num_pixels: int

    @property
    def no_pairs(self) -> bool:
        return self.num_pixels == 0


def pixel_prototype_contrast(
    features: FeatureMap,
    labels: LabelMap,
    protos: PrototypeSet,
    temperature: float,
) -> ContrastResult:
    """Cross-entropy over cosine-similarity logits between pixels and prototypes.

    For each labeled pixel whose class has a prototype, the logits are the
    cosine similarities to every available prototype divided by the
    temperature; the loss is the mean negative log-probability of the
    pixel's own class. Labeled pixels whose class has no prototype are
    skipped and counted. Gradients flow into both the pixel features and
    the prototype vectors.
    """
    if temperature <= 0:
        raise ConfigError(f"temperature must be positive, got {temperature}")
    if (features.height, features.width) != (labels.height, labels.width):
        raise ContractViolation("feature/label shape mismatch")

    zero_grad = np.zeros_like(features.data)
    labeled = labels.labeled_mask().ravel()
    classes, proto_mat = protos.matrix()
    if not classes:
        return ContrastResult(0.0, zero_grad, {}, 0, int(labeled.sum()))

    class_arr = np.asarray(classes)
    idx = labels.indices.ravel()
    in_set = np.isin(idx, class_arr) & labeled
    num_skipped = int(labeled.sum() - in_set.sum())
    if not in_set.any():
        return ContrastResult(0.0, zero_grad, {}, 0, num_skipped)

    pix = np.flatnonzero(in_set)
    feats = features.pixels()[pix]
    cols = np.searchsorted(class_arr, idx[pix])
    n = len(pix)

    f_norm_raw = np.linalg.norm(feats, axis=1)
    p_norm_raw = np.linalg.norm(proto_mat, axis=1)
    a = np.maximum(f_norm_raw, COSINE_EPS)
    b = np.maximum(p_norm_raw, COSINE_EPS)
    sims = (feats @ proto_mat.T) / (a[:, None] * b[None, :])

    logits = sims / temperature
    logp = log_softmax(logits, axis=1)
    loss = float(-logp[np.arange(n), cols].mean())

    # dL/dsims, with the mean reduction and temperature folded in
    dsim = stable_softmax(logits, axis=1)
    dsim[np.arange(n), cols] -= 1.0
    dsim /= n * temperature

    scaled = dsim / (a[:, None] * b[None, :])
    # feature side: d s / d f = rho/(a b) - s f / a^2 (second term only past the norm floor)
    row = (dsim * sims).sum(axis=1) * (f_norm_raw > COSINE_EPS) / (a * a)
    gfeat = scaled @ proto_mat - row[:, None] * feats
    grad_features = zero_grad
    grad_features.reshape(-1, features.dim)[pix] = gfeat

    col = (dsim * sims).sum(axis=0) * (p_norm_raw > COSINE_EPS) / (b * b)
    gproto = scaled.T @ feats - col[:, None] * proto_mat
    grad_protos = {c: gproto[k] for k, c in enumerate(classes)}

    return ContrastResult(loss, grad_features, grad_protos, n, num_skipped)


def fcl(
    features_target: FeatureMap,
    labels_target: LabelMap,
    protos_source: PrototypeSet,
    temperature: float,
) -> ContrastResult:
    """Forward term: target pixels against source prototypes."""
    return pixel_prototype_contrast(features_target, labels_target, protos_source, temperature)


def bcl(
    features_source: FeatureMap,
    labels_source: LabelMap,
    protos_target: PrototypeSet,
    temperature: float,
) -> ContrastResult:
    """Backward term: source pixels against target prototypes."""
    return pixel_prototype_contrast(features_source, labels_source, protos_target, temperature)


def segmentation_loss(probs: ProbMap, labels: LabelMap) -> PixelLossResult:
    """Mean cross-entropy over labeled pixels; gradient is w.r.t. pre-softmax logits."""
    if (probs.height, probs.width) != (labels.height, labels.width):
        raise ContractViolation("prob/label shape mismatch")
    if probs.num_classes != labels.num_classes:
        raise ContractViolation("prob/label class count mismatch")
    mask = labels.labeled_mask()
    n = int(mask.sum())
    grad = np.zeros_like(probs.data)
    if n == 0:
        return PixelLossResult(0.0, grad, 0)
    ys, xs = np.nonzero(mask)
    cls = labels.indices[ys, xs]
    p_correct = probs.data[ys, xs, cls]
    loss = float(-np.log(np.maximum(p_correct, 1e-300)).mean())
    grad[ys, xs] = probs.data[ys, xs] / n
    grad[ys, xs, cls] -= 1.0 / n
    return PixelLossResult(loss, grad, n)


def entropy_loss(probs: ProbMap) -> PixelLossResult:
    """Mean per-pixel prediction entropy; gradient is w.r.t. pre-softmax logits."""
    p = probs.data
    n = probs.height * probs.width
    ent = entropy_map(p)
    loss = float(ent.mean())
    # dH/dz_j = -p_j (log p_j + H); the p_j -> 0 limit is 0
    logp = np.log(np.where(p > 0, p, 1.0))
    grad = -p * (logp + ent[..., None]) / n
    return PixelLossResult(loss, grad, n)


def total_loss(
    seg_source: float,
    seg_target: float,
    ent_source: float,
    ent_target: float,
    fcl_value: float,
    bcl_value: float,
    weights: LossWeights,
    pixel_counts: dict | None = None,
) -> LossBreakdown:
    """Assemble the weighted base loss and the full objective."""
    base = (
        weights.seg_source * seg_source
        + weights.seg_target * seg_target
        + weights.ent_source * ent_source
        + weights.ent_target * ent_target
    )
    total = base + weights.fcl * fcl_value + weights.bcl * bcl_value
    return LossBreakdown(
        seg_source=seg_source,
        seg_target=seg_target,
        ent_source=ent_source,
        ent_target=ent_target,
        fcl=fcl_value,
        bcl=bcl_value,
        base=base,
        total=total,
        pixel_counts=dict(pixel_counts or {}),
    )
