"""Small convolutional feature extractor with exact manual backprop.

Three 3x3 same-padded conv layers (ReLU between them, none after the last)
produce the pixel embeddings; a per-pixel linear head produces class logits.
Convolutions run on the active kernel backend. Parameters are float64 and
initialized fan-in-uniform from a seed.
"""
from __future__ import annotations

import zlib
from dataclasses import dataclass, field

import numpy as np

from . import _kernels as K
from .core import ContractViolation, FeatureMap, ProbMap, stable_softmax


class NonFiniteGradient(RuntimeError):
    """An optimizer step received NaN or Inf gradients."""


def keyed_rng(seed: int, *key) -> np.random.Generator:
    """Counter-based generator keyed by (seed, *key); strings hash stably."""
    words = [int(seed)]
    for part in key:
        words.append(zlib.crc32(part.encode()) if isinstance(part, str) else int(part))
    return np.random.Generator(np.random.Philox(np.random.SeedSequence(words)))


@dataclass
class EncoderParams:
    """Conv stack kernels/biases plus the linear classifier head."""

    conv_w: list  # each (k, k, c_in, c_out)
    conv_b: list  # each (c_out,)
    head_w: np.ndarray  # (num_classes, dim)
    head_b: np.ndarray  # (num_classes,)
    stride: int = 1  # applied by the first conv layer only

    @property
    def dim(self) -> int:
        return self.conv_w[-1].shape[3]

    @property
    def num_classes(self) -> int:
        return self.head_w.shape[0]

    def arrays(self) -> list:
        """All parameter arrays in a fixed order (conv pairs, then head)."""
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out.extend((w, b))
        out.extend((self.head_w, self.head_b))
        return out

    def copy(self) -> "EncoderParams":
        return EncoderParams(
            conv_w=[w.copy() for w in self.conv_w],
            conv_b=[b.copy() for b in self.conv_b],
            head_w=self.head_w.copy(),
            head_b=self.head_b.copy(),
            stride=self.stride,
        )


@dataclass
class EncoderGrads:
    conv_w: list
    conv_b: list
    head_w: np.ndarray
    head_b: np.ndarray

    def arrays(self) -> list:
        out = []
        for w, b in zip(self.conv_w, self.conv_b):
            out.extend((w, b))
        out.extend((self.head_w, self.head_b))
        return out


@dataclass
class ForwardTrace:
    """Everything backward needs to reproduce the forward pass exactly."""

    params: EncoderParams
    inputs: list  # input grid of each conv layer
    preacts: list  # pre-ReLU grids (one per hidden layer)
    features: np.ndarray
    logits: np.ndarray


def init_params(
    seed: int,
    num_classes: int,
    widths: tuple = (8, 16, 16),
    in_channels: int = 3,
    kernel: int = 3,
    stride: int = 1,
) -> EncoderParams:
    """Fan-in-scaled uniform initialization, deterministic in the seed."""
    rng = keyed_rng(seed, "encoder-init")
    conv_w, conv_b = [], []
    c_in = in_channels
    for c_out in widths:
        bound = 1.0 / np.sqrt(kernel * kernel * c_in)
        conv_w.append(rng.uniform(-bound, bound, size=(kernel, kernel, c_in, c_out)))
        conv_b.append(np.zeros(c_out))
        c_in = c_out
    bound = 1.0 / np.sqrt(c_in)
    head_w = rng.uniform(-bound, bound, size=(num_classes, c_in))
    head_b = np.zeros(num_classes)
    return EncoderParams(conv_w, conv_b, head_w, head_b, stride)


def forward(params: EncoderParams, image: np.ndarray):
    """Run the net on an (H, W, 3) image.

    Returns (FeatureMap, logits, ProbMap, ForwardTrace).
    """
    if image.ndim != 3 or image.shape[2] != params.conv_w[0].shape[2]:
        raise ContractViolation("image must be (H, W, C_in)")
    x = np.ascontiguousarray(image, dtype=np.float64)
    inputs, preacts = [], []
    n_layers = len(params.conv_w)
    for layer in range(n_layers):
        stride = params.stride if layer == 0 else 1
        inputs.append(x)
        z = K.conv2d_forward(x, params.conv_w[layer], params.conv_b[layer], stride)
        if layer < n_layers - 1:
            preacts.append(z)
            x = np.maximum(z, 0.0)
        else:
            x = z
    features = x
    logits = features @ params.head_w.T + params.head_b
    probs = stable_softmax(logits, axis=-1)
    trace = ForwardTrace(params, inputs, preacts, features, logits)
    return FeatureMap(features), logits, ProbMap(probs), trace


def backward(trace: ForwardTrace, grad_features: np.ndarray, grad_logits: np.ndarray) -> EncoderGrads:
    """Exact gradients of the upstream-weighted outputs w.r.t. every parameter."""
    params = trace.params
    if grad_features.shape != trace.features.shape:
        raise ContractViolation("grad_features shape mismatch")
    if grad_logits.shape != trace.logits.shape:
        raise ContractViolation("grad_logits shape mismatch")

    dim = params.dim
    num_classes = params.num_classes
    gl_flat = grad_logits.reshape(-1, num_classes)
    f_flat = trace.features.reshape(-1, dim)
    g_head_w = gl_flat.T @ f_flat
    g_head_b = gl_flat.sum(axis=0)

    g = np.ascontiguousarray(grad_features + grad_logits @ params.head_w)
    n_layers = len(params.conv_w)
    gw = [None] * n_layers
    gb = [None] * n_layers
    for layer in range(n_layers - 1, -1, -1):
        stride = params.stride if layer == 0 else 1
        k = params.conv_w[layer].shape[0]
        gw[layer], gb[layer] = K.conv2d_backward_weights(trace.inputs[layer], g, k, k, stride)
        if layer > 0:
            in_h, in_w = trace.inputs[layer].shape[:2]
            g = K.conv2d_backward_input(g, params.conv_w[layer], stride, in_h, in_w)
            g = np.ascontiguousarray(g * (trace.preacts[layer - 1] > 0))
    return EncoderGrads(gw, gb, g_head_w, g_head_b)


@dataclass
class SgdState:
    """Momentum buffers, one per parameter array."""

    velocity: list = field(default_factory=list)

    @staticmethod
    def zeros_like(params: EncoderParams) -> "SgdState":
        return SgdState([np.zeros_like(a) for a in params.arrays()])


def sgd_step(
    params: EncoderParams,
    grads: EncoderGrads,
    state: SgdState,
    lr: float,
    momentum: float = 0.0,
    weight_decay: float = 0.0,
) -> EncoderParams:
    """Momentum SGD with decoupled L2: v <- m*v + g; p <- p - lr*(v + wd*p).

    Mutates params and state in place and returns params. Non-finite
    gradients abort the step before anything is touched.
    """
    garrs = grads.arrays()
    for g in garrs:
        if not np.isfinite(g).all():
            raise NonFiniteGradient("non-finite gradient; step aborted")
    for p, g, v in zip(params.arrays(), garrs, state.velocity):
        v *= momentum
        v += g
        p -= lr * (v + weight_decay * p)
    return params


def poly_lr(lr0: float, step: int, total_steps: int, exponent: float = 0.9) -> float:
    """Polynomially decaying learning rate, lr0 * (1 - t/T)^exponent."""
    frac = min(max(step / total_steps, 0.0), 1.0)
    return lr0 * (1.0 - frac) ** exponent
