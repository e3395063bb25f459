"""Independent straight-line oracles used to check the library.

Everything here is deliberately written with plain loops and local math so
it shares no code with the implementation under test.
"""
from __future__ import annotations

import math

import numpy as np

EPS = 1e-8
UNLABELED = -1


def oracle_cosine(a, b) -> float:
    na = math.sqrt(sum(float(v) * float(v) for v in a))
    nb = math.sqrt(sum(float(v) * float(v) for v in b))
    dot = sum(float(x) * float(y) for x, y in zip(a, b))
    s = dot / (max(na, EPS) * max(nb, EPS))
    return max(-1.0, min(1.0, s))


def oracle_map(features: np.ndarray, labels: np.ndarray, num_classes: int) -> dict:
    """Brute-force masked average pooling over an (H, W, D) grid."""
    h, w, d = features.shape
    sums = {c: np.zeros(d) for c in range(num_classes)}
    counts = {c: 0 for c in range(num_classes)}
    for y in range(h):
        for x in range(w):
            c = int(labels[y, x])
            if c == UNLABELED:
                continue
            sums[c] += features[y, x]
            counts[c] += 1
    return {c: (sums[c] / counts[c], counts[c]) for c in range(num_classes) if counts[c] > 0}


def oracle_contrast_loss(features, labels, protos: dict, temperature: float) -> tuple:
    """Brute-force pixel-prototype contrastive loss; returns (loss, n, skipped)."""
    h, w, _ = features.shape
    classes = sorted(protos)
    total = 0.0
    n = 0
    skipped = 0
    for y in range(h):
        for x in range(w):
            c = int(labels[y, x])
            if c == UNLABELED:
                continue
            if c not in protos:
                skipped += 1
                continue
            logits = [oracle_cosine(features[y, x], protos[k]) / temperature for k in classes]
            m = max(logits)
            denom = sum(math.exp(v - m) for v in logits)
            logp = logits[classes.index(c)] - m - math.log(denom)
            total += -logp
            n += 1
    return ((total / n) if n else 0.0, n, skipped)


def oracle_static_labels(probs: np.ndarray, fraction: float) -> np.ndarray:
    """Per-class sort-and-cut selection of confident argmax pixels."""
    h, w, num_classes = probs.shape
    out = np.full((h, w), UNLABELED, dtype=np.int16)
    flat = probs.reshape(-1, num_classes)
    pred = [int(np.argmax(flat[p])) for p in range(h * w)]
    conf = [float(flat[p][pred[p]]) for p in range(h * w)]
    for c in range(num_classes):
        members = [p for p in range(h * w) if pred[p] == c]
        if not members:
            continue
        keep = math.ceil(fraction * len(members))
        members.sort(key=lambda p: (-conf[p], p))
        for p in members[:keep]:
            out[p // w, p % w] = c
    return out


def oracle_dynamic_labels(features, protos: dict, threshold: float) -> np.ndarray:
    """Brute-force argmax-then-threshold label transfer."""
    h, w, _ = features.shape
    classes = sorted(protos)
    out = np.full((h, w), UNLABELED, dtype=np.int16)
    for y in range(h):
        for x in range(w):
            best_c, best_s = None, -2.0
            for c in classes:
                s = oracle_cosine(features[y, x], protos[c])
                if s > best_s:
                    best_c, best_s = c, s
            if best_c is not None and best_s > threshold:
                out[y, x] = best_c
    return out


def oracle_conv_forward(x, w, b, stride=1):
    """Straight-line same-padded correlation."""
    h, wd, ci = x.shape
    kh, kw, _, co = w.shape
    ph, pw = kh // 2, kw // 2
    ho = (h + 2 * ph - kh) // stride + 1
    wo = (wd + 2 * pw - kw) // stride + 1
    out = np.zeros((ho, wo, co))
    for i in range(ho):
        for j in range(wo):
            for k in range(co):
                acc = float(b[k])
                for ki in range(kh):
                    for kj in range(kw):
                        ii = i * stride + ki - ph
                        jj = j * stride + kj - pw
                        if 0 <= ii < h and 0 <= jj < wd:
                            for c in range(ci):
                                acc += float(x[ii, jj, c]) * float(w[ki, kj, c, k])
                out[i, j, k] = acc
    return out


def oracle_encoder_forward(params, image):
    """Straight-line re-implementation of the conv stack + linear head."""
    x = np.asarray(image, dtype=np.float64)
    n_layers = len(params.conv_w)
    for layer in range(n_layers):
        stride = params.stride if layer == 0 else 1
        x = oracle_conv_forward(x, params.conv_w[layer], params.conv_b[layer], stride)
        if layer < n_layers - 1:
            x = np.where(x > 0, x, 0.0)
    feats = x
    h, w, d = feats.shape
    num_classes = params.head_w.shape[0]
    logits = np.zeros((h, w, num_classes))
    for i in range(h):
        for j in range(w):
            for c in range(num_classes):
                logits[i, j, c] = float(params.head_w[c] @ feats[i, j]) + float(params.head_b[c])
    return feats, logits


def finite_difference(fn, arrays, step=1e-5):
    """Central finite differences of scalar fn w.r.t. each array in `arrays`."""
    grads = []
    for arr in arrays:
        g = np.zeros_like(arr)
        flat = arr.ravel()
        gflat = g.ravel()
        for i in range(flat.size):
            orig = flat[i]
            flat[i] = orig + step
            hi = fn()
            flat[i] = orig - step
            lo = fn()
            flat[i] = orig
            gflat[i] = (hi - lo) / (2 * step)
        grads.append(g)
    return grads


def rel_error_ok(analytic, numeric, tol=1e-4, floor=1e-6):
    """Per-coordinate relative error check with an absolute floor for tiny values."""
    a = np.asarray(analytic).ravel()
    n = np.asarray(numeric).ravel()
    scale = np.maximum(np.maximum(np.abs(a), np.abs(n)), floor)
    return bool((np.abs(a - n) / scale <= tol).all())
