"""Per-class prototypes: masked average pooling, momentum banks, calibration.

Instance prototypes come from the current image or batch; the slow-moving
banks track per-domain class statistics and supply the class-wise bias used
to calibrate instance prototypes across domains.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .core import ConfigError, ContractViolation, FeatureMap, LabelMap, UNLABELED


@dataclass(frozen=True)
class ProtoEntry:
    vector: np.ndarray
    pixel_count: int

    def __post_init__(self):
        if self.pixel_count < 1:
            raise ContractViolation("prototype entry needs at least one pixel")


@dataclass(frozen=True)
class PrototypeSet:
    """Partial map class -> prototype, only for classes present in the labels."""

    entries: dict[int, ProtoEntry]

    def classes(self) -> list[int]:
        return sorted(self.entries)

    def __contains__(self, c: int) -> bool:
        return c in self.entries

    def __len__(self) -> int:
        return len(self.entries)

    def matrix(self) -> tuple[list[int], np.ndarray]:
        """Sorted class list plus the stacked (K, D) prototype matrix."""
        classes = self.classes()
        if not classes:
            return [], np.zeros((0, 0))
        return classes, np.stack([self.entries[c].vector for c in classes])

    @property
    def dim(self) -> int:
        for e in self.entries.values():
            return e.vector.shape[0]
        raise ContractViolation("empty prototype set has no dimension")


class PrototypeBank:
    """Full per-class prototype store updated by exponential moving average.

    Uninitialized classes are never exposed as vectors; `get` returns None
    for them. Mutated only by the trainer's single writer.
    """

    def __init__(self, num_classes: int, dim: int, momentum: float):
        if not (0.0 <= momentum <= 1.0):
            raise ConfigError(f"EMA momentum must be in [0, 1], got {momentum}")
        self.num_classes = num_classes
        self.dim = dim
        self.momentum = momentum
        self.mu = np.zeros((num_classes, dim))
        self.initialized = np.zeros(num_classes, dtype=bool)

    def get(self, c: int) -> np.ndarray | None:
        if not self.initialized[c]:
            return None
        return self.mu[c]

    def snapshot(self) -> tuple[np.ndarray, np.ndarray]:
        return self.mu.copy(), self.initialized.copy()

    def copy(self) -> "PrototypeBank":
        out = PrototypeBank(self.num_classes, self.dim, self.momentum)
        out.mu = self.mu.copy()
        out.initialized = self.initialized.copy()
        return out


@dataclass(frozen=True)
class BiasMap:
    """Class-wise domain bias vectors; zero rows where either bank lacks the class."""

    xi: np.ndarray

    def is_zero(self) -> bool:
        return not self.xi.any()

    @staticmethod
    def zero(num_classes: int, dim: int) -> "BiasMap":
        return BiasMap(np.zeros((num_classes, dim)))


def masked_average_pool(features: FeatureMap, labels: LabelMap) -> PrototypeSet:
    """Mean feature vector per class over that class's labeled pixels.

    Classes with zero pixels get no entry.
    """
    if (features.height, features.width) != (labels.height, labels.width):
        raise ContractViolation(
            f"features {features.height}x{features.width} vs labels "
            f"{labels.height}x{labels.width}"
        )
    return _pool_pixels(features.pixels(), labels.indices.ravel(), labels.num_classes)


def masked_average_pool_batch(pairs: list[tuple[FeatureMap, LabelMap]]) -> PrototypeSet:
    """Single pooled prototype set over the concatenated pixels of a batch."""
    if not pairs:
        raise ContractViolation("empty batch")
    feats = []
    idx = []
    num_classes = pairs[0][1].num_classes
    for fm, lm in pairs:
        if (fm.height, fm.width) != (lm.height, lm.width):
            raise ContractViolation("feature/label shape mismatch in batch")
        if lm.num_classes != num_classes:
            raise ContractViolation("inconsistent class count in batch")
        feats.append(fm.pixels())
        idx.append(lm.indices.ravel())
    return _pool_pixels(np.concatenate(feats), np.concatenate(idx), num_classes)


def _pool_pixels(pixels: np.ndarray, indices: np.ndarray, num_classes: int) -> PrototypeSet:
    entries: dict[int, ProtoEntry] = {}
    for c in np.unique(indices):
        if c == UNLABELED:
            continue
        mask = indices == c
        entries[int(c)] = ProtoEntry(pixels[mask].mean(axis=0), int(mask.sum()))
    return PrototypeSet(entries)


def masked_average_pool_backward(
    grad_protos: dict[int, np.ndarray], labels: LabelMap, protos: PrototypeSet
) -> np.ndarray:
    """Distribute prototype gradients back to the pooled pixel features.

    d rho(c) / d f(p) = y(p, c) / n_c, so each labeled pixel of class c
    receives grad_protos[c] / n_c. Returns an (H, W, D) gradient grid.
    """
    some = next(iter(grad_protos.values()), None)
    if some is None:
        raise ContractViolation("no prototype gradients to distribute")
    out = np.zeros((labels.height, labels.width, some.shape[0]))
    for c, g in grad_protos.items():
        if c not in protos:
            raise ContractViolation(f"gradient for class {c} absent from prototype set")
        mask = labels.indices == c
        out[mask] = g / protos.entries[c].pixel_count
    return out


def ema_update(bank: PrototypeBank, fresh: PrototypeSet) -> PrototypeBank:
    """Fold fresh instance prototypes into the bank.

    First observation of a class copies the prototype; afterwards
    mu <- momentum * mu + (1 - momentum) * rho. Classes absent from `fresh`
    are untouched.
    """
    lam = bank.momentum
    for c, entry in fresh.entries.items():
        if entry.vector.shape[0] != bank.dim:
            raise ContractViolation("prototype dimension does not match bank")
        if bank.initialized[c]:
            bank.mu[c] = lam * bank.mu[c] + (1.0 - lam) * entry.vector
        else:
            bank.mu[c] = entry.vector.copy()
            bank.initialized[c] = True
    return bank


def domain_bias(source_bank: PrototypeBank, target_bank: PrototypeBank) -> BiasMap:
    """Per-class bank difference (target - source); zero where either side is missing."""
    if (source_bank.num_classes, source_bank.dim) != (
        target_bank.num_classes,
        target_bank.dim,
    ):
        raise ContractViolation("banks disagree on classes or dimension")
    xi = np.zeros((source_bank.num_classes, source_bank.dim))
    both = source_bank.initialized & target_bank.initialized
    xi[both] = target_bank.mu[both] - source_bank.mu[both]
    return BiasMap(xi)


def calibrate(instance: PrototypeSet, bias: BiasMap) -> PrototypeSet:
    """Shift each instance prototype by its class bias; pixel counts carry over."""
    entries = {}
    for c, entry in instance.entries.items():
        if entry.vector.shape[0] != bias.xi.shape[1]:
            raise ContractViolation("bias dimension does not match prototypes")
        entries[c] = ProtoEntry(entry.vector + bias.xi[c], entry.pixel_count)
    return PrototypeSet(entries)
