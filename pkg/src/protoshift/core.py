"""Shared domain types and deterministic numerics.

Pixel grids are row-major everywhere: flat index p = y * width + x. All loss
math runs in float64.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

#: Class index marking an unlabeled pixel inside a LabelMap.
UNLABELED = -1

#: Norm floor used in cosine denominators so zero vectors stay finite.
COSINE_EPS = 1e-8


class ContractViolation(ValueError):
    """An operation was called with arguments that break its contract."""


class ConfigError(ValueError):
    """A configuration value is outside its legal range."""


class SealedLabelError(RuntimeError):
    """Training code tried to read ground truth it is not allowed to see."""


def _require(cond: bool, msg: str) -> None:
    if not cond:
        raise ContractViolation(msg)


@dataclass(frozen=True)
class ClassSet:
    """The set of semantic classes, optionally with display names."""

    num_classes: int
    names: tuple[str, ...] | None = None

    def __post_init__(self):
        if self.num_classes < 2:
            raise ContractViolation("need at least 2 classes")
        if self.names is not None and len(self.names) != self.num_classes:
            raise ContractViolation("names length must match num_classes")


@dataclass(frozen=True)
class FeatureMap:
    """Dense per-pixel embedding grid, shape (height, width, dim)."""

    data: np.ndarray

    def __post_init__(self):
        _require(self.data.ndim == 3, "FeatureMap data must be (H, W, D)")
        _require(self.data.shape[2] >= 1, "embedding dim must be >= 1")
        _require(self.data.shape[0] * self.data.shape[1] >= 1, "empty grid")
        _require(bool(np.isfinite(self.data).all()), "FeatureMap must be finite")
        object.__setattr__(self, "data", np.asarray(self.data, dtype=np.float64))

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def dim(self) -> int:
        return self.data.shape[2]

    def pixels(self) -> np.ndarray:
        """Row-major (H*W, D) view of the grid."""
        return self.data.reshape(-1, self.data.shape[2])


@dataclass(frozen=True)
class LabelMap:
    """Per-pixel class indices, UNLABELED (-1) for pixels without a label.

    Equivalent to a one-hot-or-all-zero assignment grid; `one_hot()` gives
    the dense view.
    """

    indices: np.ndarray
    num_classes: int

    def __post_init__(self):
        idx = np.asarray(self.indices, dtype=np.int16)
        _require(idx.ndim == 2, "LabelMap indices must be (H, W)")
        _require(self.num_classes >= 1, "num_classes must be >= 1")
        _require(bool((idx >= UNLABELED).all()), "class index below UNLABELED")
        _require(bool((idx < self.num_classes).all()), "class index out of range")
        object.__setattr__(self, "indices", idx)

    @property
    def height(self) -> int:
        return self.indices.shape[0]

    @property
    def width(self) -> int:
        return self.indices.shape[1]

    def labeled_mask(self) -> np.ndarray:
        return self.indices != UNLABELED

    def one_hot(self) -> np.ndarray:
        """Dense (H, W, C) float64 view; all-zero rows for unlabeled pixels."""
        out = np.zeros((*self.indices.shape, self.num_classes))
        mask = self.labeled_mask()
        ys, xs = np.nonzero(mask)
        out[ys, xs, self.indices[ys, xs]] = 1.0
        return out

    def fraction_labeled(self) -> float:
        return float(self.labeled_mask().mean())

    @staticmethod
    def empty(height: int, width: int, num_classes: int) -> "LabelMap":
        return LabelMap(np.full((height, width), UNLABELED, dtype=np.int16), num_classes)


@dataclass(frozen=True)
class ProbMap:
    """Per-pixel probability simplex over classes, shape (H, W, C)."""

    data: np.ndarray

    def __post_init__(self):
        p = np.asarray(self.data, dtype=np.float64)
        _require(p.ndim == 3, "ProbMap data must be (H, W, C)")
        _require(bool((p >= 0).all()), "probabilities must be nonnegative")
        sums = p.sum(axis=2)
        _require(bool(np.abs(sums - 1.0).max() <= 1e-6), "rows must sum to 1")
        object.__setattr__(self, "data", p)

    @property
    def height(self) -> int:
        return self.data.shape[0]

    @property
    def width(self) -> int:
        return self.data.shape[1]

    @property
    def num_classes(self) -> int:
        return self.data.shape[2]

    def argmax_labels(self) -> LabelMap:
        return LabelMap(self.data.argmax(axis=2).astype(np.int16), self.num_classes)


def cosine_similarity(a: np.ndarray, b: np.ndarray) -> float:
    """Cosine similarity with an epsilon-floored denominator, clamped to [-1, 1]."""
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    _require(a.shape == b.shape and a.ndim == 1, "vectors must share one dimension")
    denom = max(float(np.linalg.norm(a)), COSINE_EPS) * max(
        float(np.linalg.norm(b)), COSINE_EPS
    )
    return float(np.clip(float(a @ b) / denom, -1.0, 1.0))


def cosine_similarity_matrix(feats: np.ndarray, protos: np.ndarray) -> np.ndarray:
    """Pairwise cosine similarities between rows of `feats` (N, D) and `protos` (K, D)."""
    feats = np.asarray(feats, dtype=np.float64)
    protos = np.asarray(protos, dtype=np.float64)
    _require(feats.shape[1] == protos.shape[1], "dimension mismatch")
    fn = np.maximum(np.linalg.norm(feats, axis=1), COSINE_EPS)
    pn = np.maximum(np.linalg.norm(protos, axis=1), COSINE_EPS)
    sims = (feats @ protos.T) / (fn[:, None] * pn[None, :])
    return np.clip(sims, -1.0, 1.0)


def stable_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    """Shift-invariant softmax; rows sum to 1 within 1e-9."""
    z = np.asarray(logits, dtype=np.float64)
    _require(z.size > 0, "softmax of an empty vector")
    _require(bool(np.isfinite(z).all()), "softmax needs finite logits")
    z = z - z.max(axis=axis, keepdims=True)
    e = np.exp(z)
    return e / e.sum(axis=axis, keepdims=True)


def log_softmax(logits: np.ndarray, axis: int = -1) -> np.ndarray:
    z = np.asarray(logits, dtype=np.float64)
    _require(z.size > 0, "softmax of an empty vector")
    z = z - z.max(axis=axis, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=axis, keepdims=True))


def shannon_entropy(p: np.ndarray) -> float:
    """Entropy in nats of one probability vector, with 0*log(0) := 0."""
    p = np.asarray(p, dtype=np.float64)
    nz = p[p > 0]
    return float(-(nz * np.log(nz)).sum())


def entropy_map(probs: np.ndarray) -> np.ndarray:
    """Per-pixel entropy of an (..., C) probability array."""
    p = np.asarray(probs, dtype=np.float64)
    terms = np.where(p > 0, p * np.log(np.where(p > 0, p, 1.0)), 0.0)
    return -terms.sum(axis=-1)


def resize_nearest(grid: np.ndarray, height: int, width: int) -> np.ndarray:
    """Nearest-neighbor resample of an (H, W, ...) grid to (height, width, ...).

    Preserves exact values, so one-hot label semantics survive the resample.
    """
    _require(height >= 1 and width >= 1, "target size must be positive")
    src_h, src_w = grid.shape[0], grid.shape[1]
    rows = np.minimum((np.arange(height) + 0.5) * src_h / height, src_h - 1).astype(int)
    cols = np.minimum((np.arange(width) + 0.5) * src_w / width, src_w - 1).astype(int)
    return grid[rows][:, cols]
