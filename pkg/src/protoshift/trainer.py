"""Training orchestration: per-step pipeline, evaluation, and ablation runs.

Step order is fixed: forward both domains, pool source prototypes, read the
banks for bias and calibration, generate dynamic then hybrid labels, pool
target prototypes, compute losses and gradients, take the optimizer step,
and only then fold this step's prototypes into the banks. Pseudo labels at
step t therefore always use bank statistics from steps < t.

All per-step randomness comes from generators keyed by (seed, purpose,
iteration), so runs are bit-reproducible and checkpoints resume exactly.
"""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from . import contrastive, pseudo
from .config import AblationSwitches, TrainConfig
from .core import FeatureMap, LabelMap, ProbMap, UNLABELED, cosine_similarity_matrix, resize_nearest
from .encoder import (
    EncoderGrads,
    EncoderParams,
    SgdState,
    backward,
    forward,
    init_params,
    keyed_rng,
    poly_lr,
    sgd_step,
)
from .prototypes import (
    BiasMap,
    PrototypeBank,
    PrototypeSet,
    calibrate,
    domain_bias,
    masked_average_pool,
    masked_average_pool_backward,
)
from .synthdata import SceneDataset, dataset


class TrainingDiverged(RuntimeError):
    """Loss or gradients became non-finite; carries the failing iteration."""

    def __init__(self, iteration: int, detail: str):
        super().__init__(f"training diverged at iteration {iteration}: {detail}")
        self.iteration = iteration


#: Ablation arms in benchmark order: each adds one ingredient.
ABLATION_ARMS = {
    "base": AblationSwitches(use_fcl=False, use_bcl=False, use_dynamic=False, use_calibration=False),
    "fcl": AblationSwitches(use_fcl=True, use_bcl=False, use_dynamic=False, use_calibration=False),
    "fcl_bcl": AblationSwitches(use_fcl=True, use_bcl=True, use_dynamic=False, use_calibration=False),
    "dynamic_nocal": AblationSwitches(use_fcl=True, use_bcl=True, use_dynamic=True, use_calibration=False),
    "full": AblationSwitches(use_fcl=True, use_bcl=True, use_dynamic=True, use_calibration=True),
}
ARM_ORDER = ["base", "fcl", "fcl_bcl", "dynamic_nocal", "full"]


@dataclass
class StepRecord:
    iteration: int
    lr: float
    loss_total: float
    loss_base: float
    loss_seg_source: float
    loss_seg_target: float
    loss_ent_source: float
    loss_ent_target: float
    loss_fcl: float
    loss_bcl: float
    seg_source_pixels: int
    seg_target_pixels: int
    fcl_pixels: int
    fcl_skipped: int
    bcl_pixels: int
    bcl_skipped: int
    density_static: float
    acc_static: float
    density_dynamic: float
    acc_dynamic: float
    density_hybrid: float
    acc_hybrid: float
    sim_same_class: float
    sim_diff_class: float


@dataclass
class EvalRecord:
    iteration: int
    miou: float
    per_class_iou: list
    static_density: float
    static_accuracy: float
    dyn_nocal_density: float
    dyn_nocal_accuracy: float
    dyn_cal_density: float
    dyn_cal_accuracy: float
    hybrid_density: float
    hybrid_accuracy: float
    sim_same_class: float
    sim_diff_class: float


@dataclass
class TrainState:
    config: TrainConfig
    params: EncoderParams
    sgd: SgdState
    bank_source: PrototypeBank
    bank_target: PrototypeBank
    static_store: list  # one LabelMap per target scene, scene resolution
    iteration: int = 0


@dataclass
class RunHistory:
    steps: list = field(default_factory=list)
    evals: list = field(default_factory=list)


def build_dataset(config: TrainConfig) -> SceneDataset:
    return dataset(
        config.scene,
        config.shift,
        config.data.n_source,
        config.data.n_target,
        config.data.n_eval,
    )


def init_state(config: TrainConfig, ds: SceneDataset) -> TrainState:
    dim = config.encoder_widths[-1]
    params = init_params(
        config.seed,
        config.scene.num_classes,
        widths=tuple(config.encoder_widths),
        stride=config.encoder_stride,
    )
    state = TrainState(
        config=config,
        params=params,
        sgd=SgdState.zeros_like(params),
        bank_source=PrototypeBank(config.scene.num_classes, dim, config.ema_momentum),
        bank_target=PrototypeBank(config.scene.num_classes, dim, config.ema_momentum),
        static_store=[
            LabelMap.empty(config.scene.height, config.scene.width, config.scene.num_classes)
            for _ in ds.target
        ],
    )
    # With a warmup phase the store stays empty until the first refresh at
    # warmup end: labels from an untrained net would only pollute the target
    # bank. Without warmup, refresh immediately.
    if warmup_iterations(config) == 0:
        refresh_static_labels(state, ds)
    return state


def refresh_static_labels(state: TrainState, ds: SceneDataset) -> TrainState:
    """Recompute the static label store from fresh predictions on every target scene."""
    cfg = state.config
    for pos, view in enumerate(ds.target):
        _, _, probs, _ = forward(state.params, view.image)
        labels = pseudo.static_labels(probs, cfg.static_labels)
        if (labels.height, labels.width) != (cfg.scene.height, cfg.scene.width):
            labels = LabelMap(
                resize_nearest(labels.indices, cfg.scene.height, cfg.scene.width),
                labels.num_classes,
            )
        state.static_store[pos] = labels
    return state


# ---------------------------------------------------------------------------
# augmentation


@dataclass(frozen=True)
class AugmentParams:
    flip: bool
    scale: float

    def apply_image(self, image: np.ndarray) -> np.ndarray:
        out = image[:, ::-1] if self.flip else image
        if self.scale != 1.0:
            h = max(8, round(out.shape[0] * self.scale))
            w = max(8, round(out.shape[1] * self.scale))
            out = resize_nearest(out, h, w)
        return np.ascontiguousarray(out)

    def apply_labels(self, labels: LabelMap) -> LabelMap:
        idx = labels.indices[:, ::-1] if self.flip else labels.indices
        if self.scale != 1.0:
            h = max(8, round(idx.shape[0] * self.scale))
            w = max(8, round(idx.shape[1] * self.scale))
            idx = resize_nearest(idx, h, w)
        return LabelMap(np.ascontiguousarray(idx), labels.num_classes)


def _sample_augment(rng, enabled: bool) -> AugmentParams:
    if not enabled:
        return AugmentParams(flip=False, scale=1.0)
    return AugmentParams(flip=bool(rng.random() < 0.5), scale=float(rng.uniform(0.8, 1.2)))


# ---------------------------------------------------------------------------
# per-domain batch bookkeeping


def _forward_domain(params, images):
    traces, shapes, feats, probs = [], [], [], []
    offsets = [0]
    for img in images:
        fm, _, pm, trace = forward(params, img)
        traces.append(trace)
        shapes.append((fm.height, fm.width))
        feats.append(fm.pixels())
        probs.append(pm.data.reshape(-1, pm.num_classes))
        offsets.append(offsets[-1] + fm.height * fm.width)
    flat_feats = FeatureMap(np.concatenate(feats)[None, :, :])
    flat_probs = ProbMap(np.concatenate(probs)[None, :, :])
    return traces, shapes, offsets, flat_feats, flat_probs


def _flatten_labels(label_maps, num_classes) -> LabelMap:
    flat = np.concatenate([lm.indices.ravel() for lm in label_maps])
    return LabelMap(flat[None, :], num_classes)


def _labels_at(labels: LabelMap, shape) -> LabelMap:
    if (labels.height, labels.width) == shape:
        return labels
    return LabelMap(resize_nearest(labels.indices, *shape), labels.num_classes)


def warmup_iterations(cfg: TrainConfig) -> int:
    return int(cfg.target_warmup_fraction * cfg.iterations)


def _in_warmup(cfg: TrainConfig, t: int) -> bool:
    return t < warmup_iterations(cfg)


def _effective_weights(cfg: TrainConfig, t: int) -> contrastive.LossWeights:
    w = cfg.loss_weights
    if _in_warmup(cfg, t):  # source-only phase
        return contrastive.LossWeights(
            seg_source=w.seg_source,
            seg_target=0.0,
            ent_source=w.ent_source,
            ent_target=0.0,
            fcl=0.0,
            bcl=0.0,
            temperature=w.temperature,
        )
    return contrastive.LossWeights(
        seg_source=w.seg_source,
        seg_target=w.seg_target,
        ent_source=w.ent_source,
        ent_target=w.ent_target,
        fcl=w.fcl if cfg.ablation.use_fcl else 0.0,
        bcl=w.bcl if cfg.ablation.use_bcl else 0.0,
        temperature=w.temperature,
    )


# ---------------------------------------------------------------------------
# the training step


def train_step(state: TrainState, ds: SceneDataset, record_metrics: bool = True):
    """One optimization step; returns (state, StepRecord)."""
    cfg = state.config
    t = state.iteration
    num_classes = cfg.scene.num_classes
    weights = _effective_weights(cfg, t)
    use_dynamic = cfg.ablation.use_dynamic and not _in_warmup(cfg, t)

    # (0) sample and augment batches
    rng_sample = keyed_rng(cfg.seed, "sample", t)
    src_weights = np.ones(len(ds.source))
    if cfg.oversample_rare:
        for i, sc in enumerate(ds.source):
            if (sc.ground_truth.indices == num_classes - 1).any():
                src_weights[i] = 2.0
    src_weights /= src_weights.sum()
    src_pos = rng_sample.choice(len(ds.source), size=cfg.batch_size, p=src_weights)
    tgt_pos = rng_sample.choice(len(ds.target), size=cfg.batch_size)

    rng_aug = keyed_rng(cfg.seed, "augment", t)
    src_aug = [_sample_augment(rng_aug, cfg.augment) for _ in range(cfg.batch_size)]
    tgt_aug = [_sample_augment(rng_aug, cfg.augment) for _ in range(cfg.batch_size)]

    src_images = [a.apply_image(ds.source[p].image) for p, a in zip(src_pos, src_aug)]
    tgt_images = [a.apply_image(ds.target[p].image) for p, a in zip(tgt_pos, tgt_aug)]

    # (1) forward both domains
    src_traces, src_shapes, src_off, f_s, p_s = _forward_domain(state.params, src_images)
    tgt_traces, tgt_shapes, tgt_off, f_t, p_t = _forward_domain(state.params, tgt_images)

    # source ground truth at feature resolution
    y_s_maps = [
        _labels_at(a.apply_labels(ds.source[p].ground_truth), shape)
        for p, a, shape in zip(src_pos, src_aug, src_shapes)
    ]
    y_s = _flatten_labels(y_s_maps, num_classes)

    # (2) instance source prototypes from the pooled batch
    rho_s = masked_average_pool(f_s, y_s)

    # (3) read banks (pre-update) for the class-wise bias
    if cfg.ablation.use_calibration:
        xi = domain_bias(state.bank_source, state.bank_target)
    else:
        xi = BiasMap.zero(num_classes, state.params.dim)
    rho_cal = calibrate(rho_s, xi)

    # per-image static labels at feature resolution
    y_f_maps = [
        _labels_at(a.apply_labels(state.static_store[p]), shape)
        for p, a, shape in zip(tgt_pos, tgt_aug, tgt_shapes)
    ]

    # (4) dynamic labels from the current batch's calibrated prototypes
    if use_dynamic:
        if cfg.prototype_pooling == "per_image":
            per_img_protos = [
                calibrate(masked_average_pool(
                    FeatureMap(f_s.pixels()[src_off[i]:src_off[i + 1]].reshape(*src_shapes[i], -1)),
                    y_s_maps[i]), xi)
                for i in range(cfg.batch_size)
            ]
        else:
            per_img_protos = [rho_cal] * cfg.batch_size
        y_d_maps = []
        for i, shape in enumerate(tgt_shapes):
            feats_i = FeatureMap(
                f_t.pixels()[tgt_off[i]:tgt_off[i + 1]].reshape(*shape, -1)
            )
            y_d_maps.append(
                pseudo.dynamic_labels(
                    feats_i, per_img_protos[i], cfg.similarity_threshold, num_classes
                )
            )
    else:
        y_d_maps = [LabelMap.empty(*shape, num_classes) for shape in tgt_shapes]

    # (5) hybrid fusion, dynamic wins
    y_t_maps = [pseudo.hybrid_fuse(d, f) for d, f in zip(y_d_maps, y_f_maps)]
    y_t = _flatten_labels(y_t_maps, num_classes)

    # (6) target prototypes from hybrid labels
    rho_t = masked_average_pool(f_t, y_t)

    # (7) losses and their gradients
    seg_labels_t = y_t if cfg.seg_target_labels == "hybrid" else _flatten_labels(y_f_maps, num_classes)
    seg_s = contrastive.segmentation_loss(p_s, y_s)
    seg_t = contrastive.segmentation_loss(p_t, seg_labels_t)
    ent_s = contrastive.entropy_loss(p_s)
    ent_t = contrastive.entropy_loss(p_t)

    fcl_protos = rho_s
    bcl_protos = rho_t
    if cfg.contrastive_all_classes:
        fcl_protos = _with_bank_fallback(rho_s, state.bank_source)
        bcl_protos = _with_bank_fallback(rho_t, state.bank_target)
    if weights.fcl > 0:
        fc = contrastive.fcl(f_t, y_t, fcl_protos, weights.temperature)
    else:
        fc = _zero_contrast(f_t)
    if weights.bcl > 0:
        bc = contrastive.bcl(f_s, y_s, bcl_protos, weights.temperature)
    else:
        bc = _zero_contrast(f_s)

    counts = {
        "seg_source": seg_s.num_pixels,
        "seg_target": seg_t.num_pixels,
        "fcl": fc.num_pixels,
        "fcl_skipped": fc.num_skipped,
        "bcl": bc.num_pixels,
        "bcl_skipped": bc.num_skipped,
    }
    breakdown = contrastive.total_loss(
        seg_s.loss, seg_t.loss, ent_s.loss, ent_t.loss, fc.loss, bc.loss, weights, counts
    )
    if not np.isfinite(breakdown.total):
        raise TrainingDiverged(t, f"non-finite loss {breakdown.total}")

    # upstream gradients for the pooled pixel grids
    d = state.params.dim
    gl_s = weights.seg_source * seg_s.grad_logits + weights.ent_source * ent_s.grad_logits
    gl_t = weights.seg_target * seg_t.grad_logits + weights.ent_target * ent_t.grad_logits
    gf_s = weights.bcl * bc.grad_features
    gf_t = weights.fcl * fc.grad_features
    if weights.fcl > 0 and fc.num_pixels > 0:
        proto_grads = {c: g for c, g in fc.grad_protos.items() if c in rho_s}
        if proto_grads:
            gf_s = gf_s + weights.fcl * masked_average_pool_backward(proto_grads, y_s, rho_s)
    if weights.bcl > 0 and bc.num_pixels > 0:
        proto_grads = {c: g for c, g in bc.grad_protos.items() if c in rho_t}
        if proto_grads:
            gf_t = gf_t + weights.bcl * masked_average_pool_backward(proto_grads, y_t, rho_t)

    # (8) backprop through every image and take the SGD step
    grads = _zero_grads(state.params)
    _accumulate_domain(grads, src_traces, src_shapes, src_off, gf_s, gl_s, d, num_classes)
    _accumulate_domain(grads, tgt_traces, tgt_shapes, tgt_off, gf_t, gl_t, d, num_classes)
    lr = poly_lr(cfg.lr0, t, cfg.iterations, cfg.poly_exponent)
    sgd_step(state.params, grads, state.sgd, lr, cfg.momentum, cfg.weight_decay)

    # (9) fold this step's prototypes into the banks (post-update only)
    ema_update_banks(state, rho_s, rho_t)

    record = _make_step_record(
        state, ds, t, lr, breakdown, counts,
        tgt_pos, tgt_aug, tgt_shapes, y_d_maps, y_f_maps, y_t_maps,
        f_s, y_s, f_t,
    ) if record_metrics else None
    state.iteration = t + 1
    return state, record


def ema_update_banks(state: TrainState, rho_s: PrototypeSet, rho_t: PrototypeSet):
    from .prototypes import ema_update

    ema_update(state.bank_source, rho_s)
    ema_update(state.bank_target, rho_t)


def _with_bank_fallback(protos: PrototypeSet, bank: PrototypeBank) -> PrototypeSet:
    from .prototypes import ProtoEntry

    entries = dict(protos.entries)
    for c in range(bank.num_classes):
        if c not in entries and bank.initialized[c]:
            entries[c] = ProtoEntry(bank.mu[c].copy(), 1)
    return PrototypeSet(entries)


def _zero_contrast(fm: FeatureMap) -> contrastive.ContrastResult:
    return contrastive.ContrastResult(0.0, np.zeros_like(fm.data), {}, 0, 0)


def _zero_grads(params: EncoderParams) -> EncoderGrads:
    return EncoderGrads(
        conv_w=[np.zeros_like(w) for w in params.conv_w],
        conv_b=[np.zeros_like(b) for b in params.conv_b],
        head_w=np.zeros_like(params.head_w),
        head_b=np.zeros_like(params.head_b),
    )


def _accumulate_domain(grads, traces, shapes, offsets, gf_flat, gl_flat, dim, num_classes):
    for i, trace in enumerate(traces):
        h, w = shapes[i]
        gf = gf_flat[0, offsets[i]:offsets[i + 1]].reshape(h, w, dim)
        gl = gl_flat[0, offsets[i]:offsets[i + 1]].reshape(h, w, num_classes)
        if not gf.any() and not gl.any():
            continue
        img_grads = backward(trace, np.ascontiguousarray(gf), np.ascontiguousarray(gl))
        for acc, g in zip(grads.arrays(), img_grads.arrays()):
            acc += g
    return grads


# ---------------------------------------------------------------------------
# metrics


def _make_step_record(
    state, ds, t, lr, breakdown, counts,
    tgt_pos, tgt_aug, tgt_shapes, y_d_maps, y_f_maps, y_t_maps,
    f_s, y_s, f_t,
) -> StepRecord:
    cfg = state.config
    num_classes = cfg.scene.num_classes

    gt_maps = [
        _labels_at(a.apply_labels(ds.eval_handle.train_ground_truth(p)), shape)
        for p, a, shape in zip(tgt_pos, tgt_aug, tgt_shapes)
    ]
    dens = {}
    for name, maps in (("static", y_f_maps), ("dynamic", y_d_maps), ("hybrid", y_t_maps)):
        labeled = correct = total = 0
        for lm, gt in zip(maps, gt_maps):
            rep = pseudo.label_metrics(lm, gt)
            labeled += rep.labeled_pixels
            correct += round(rep.accuracy * rep.labeled_pixels)
            total += rep.total_pixels
        dens[name] = (labeled / total, (correct / labeled) if labeled else 1.0)

    y_t_gt = _flatten_labels(gt_maps, num_classes)
    sim_same, sim_diff = _similarity_stats(
        f_s.pixels(), y_s.indices.ravel(), f_t.pixels(), y_t_gt.indices.ravel(),
        cfg.metrics_pixels, keyed_rng(cfg.seed, "metrics", t),
    )

    return StepRecord(
        iteration=t,
        lr=lr,
        loss_total=breakdown.total,
        loss_base=breakdown.base,
        loss_seg_source=breakdown.seg_source,
        loss_seg_target=breakdown.seg_target,
        loss_ent_source=breakdown.ent_source,
        loss_ent_target=breakdown.ent_target,
        loss_fcl=breakdown.fcl,
        loss_bcl=breakdown.bcl,
        seg_source_pixels=counts["seg_source"],
        seg_target_pixels=counts["seg_target"],
        fcl_pixels=counts["fcl"],
        fcl_skipped=counts["fcl_skipped"],
        bcl_pixels=counts["bcl"],
        bcl_skipped=counts["bcl_skipped"],
        density_static=dens["static"][0],
        acc_static=dens["static"][1],
        density_dynamic=dens["dynamic"][0],
        acc_dynamic=dens["dynamic"][1],
        density_hybrid=dens["hybrid"][0],
        acc_hybrid=dens["hybrid"][1],
        sim_same_class=sim_same,
        sim_diff_class=sim_diff,
    )


def _similarity_stats(src_pixels, src_classes, tgt_pixels, tgt_classes, k, rng):
    """Mean cross-domain cosine similarity over same- and different-class pairs."""
    si = rng.choice(len(src_pixels), size=min(k, len(src_pixels)), replace=False)
    ti = rng.choice(len(tgt_pixels), size=min(k, len(tgt_pixels)), replace=False)
    sims = cosine_similarity_matrix(src_pixels[si], tgt_pixels[ti])
    same = src_classes[si][:, None] == tgt_classes[ti][None, :]
    valid = (src_classes[si][:, None] != UNLABELED) & (tgt_classes[ti][None, :] != UNLABELED)
    same_vals = sims[same & valid]
    diff_vals = sims[~same & valid]
    sim_same = float(same_vals.mean()) if same_vals.size else float("nan")
    sim_diff = float(diff_vals.mean()) if diff_vals.size else float("nan")
    return sim_same, sim_diff


# ---------------------------------------------------------------------------
# evaluation


def evaluate(params: EncoderParams, eval_scenes) -> tuple:
    """Aggregate per-class IoU and mIoU over fully labeled scenes."""
    num_classes = eval_scenes[0].ground_truth.num_classes
    confusion = np.zeros((num_classes, num_classes), dtype=np.int64)
    for scene in eval_scenes:
        _, _, probs, _ = forward(params, scene.image)
        pred = probs.data.argmax(axis=2)
        gt = scene.ground_truth.indices
        if pred.shape != gt.shape:
            pred = resize_nearest(pred, *gt.shape)
        flat = num_classes * gt.astype(np.int64).ravel() + pred.ravel()
        confusion += np.bincount(flat, minlength=num_classes ** 2).reshape(
            num_classes, num_classes
        )
    tp = np.diag(confusion).astype(float)
    denom = confusion.sum(axis=0) + confusion.sum(axis=1) - np.diag(confusion)
    present = confusion.sum(axis=1) > 0  # classes present in ground truth
    iou = np.full(num_classes, np.nan)
    iou[present] = tp[present] / np.maximum(denom[present], 1)
    miou = float(iou[present].mean()) if present.any() else 0.0
    return iou, miou


def pseudo_label_report(state: TrainState, ds: SceneDataset, max_scenes: int | None = None):
    """Density/accuracy of the four label variants over the target training set.

    Deterministic protocol: target scene i is paired with source scene
    (i mod n_source); prototypes come from that single source scene and the
    current banks. Totals are aggregated over scenes.
    """
    cfg = state.config
    num_classes = cfg.scene.num_classes
    n = len(ds.target) if max_scenes is None else min(max_scenes, len(ds.target))
    xi = domain_bias(state.bank_source, state.bank_target)
    zero = BiasMap.zero(num_classes, state.params.dim)
    agg = {k: [0, 0, 0] for k in ("static", "dyn_nocal", "dyn_cal", "hybrid")}
    for i in range(n):
        src = ds.source[i % len(ds.source)]
        f_src, _, _, _ = forward(state.params, src.image)
        y_src = _labels_at(src.ground_truth, (f_src.height, f_src.width))
        rho = masked_average_pool(f_src, y_src)

        f_tgt, _, _, _ = forward(state.params, ds.target[i].image)
        shape = (f_tgt.height, f_tgt.width)
        gt = _labels_at(ds.eval_handle.train_ground_truth(i), shape)
        y_f = _labels_at(state.static_store[i], shape)
        y_d_nocal = pseudo.dynamic_labels(
            f_tgt, calibrate(rho, zero), cfg.similarity_threshold, num_classes
        )
        y_d_cal = pseudo.dynamic_labels(
            f_tgt, calibrate(rho, xi), cfg.similarity_threshold, num_classes
        )
        model_dyn = y_d_cal if cfg.ablation.use_calibration else y_d_nocal
        hybrid = pseudo.hybrid_fuse(model_dyn, y_f)
        for key, lm in (
            ("static", y_f),
            ("dyn_nocal", y_d_nocal),
            ("dyn_cal", y_d_cal),
            ("hybrid", hybrid),
        ):
            rep = pseudo.label_metrics(lm, gt)
            agg[key][0] += rep.labeled_pixels
            agg[key][1] += round(rep.accuracy * rep.labeled_pixels)
            agg[key][2] += rep.total_pixels
    out = {}
    for key, (labeled, correct, total) in agg.items():
        out[key] = (labeled / total if total else 0.0, correct / labeled if labeled else 1.0)
    return out


def eval_similarity_stats(state: TrainState, ds: SceneDataset, max_scenes: int = 8):
    """Cross-domain class-similarity separation on unaugmented training scenes."""
    cfg = state.config
    n = min(max_scenes, len(ds.target), len(ds.source))
    src_feats, src_cls, tgt_feats, tgt_cls = [], [], [], []
    for i in range(n):
        f_s, _, _, _ = forward(state.params, ds.source[i].image)
        y_s = _labels_at(ds.source[i].ground_truth, (f_s.height, f_s.width))
        src_feats.append(f_s.pixels())
        src_cls.append(y_s.indices.ravel())
        f_t, _, _, _ = forward(state.params, ds.target[i].image)
        gt = _labels_at(ds.eval_handle.train_ground_truth(i), (f_t.height, f_t.width))
        tgt_feats.append(f_t.pixels())
        tgt_cls.append(gt.indices.ravel())
    rng = keyed_rng(cfg.seed, "eval-sim", state.iteration)
    return _similarity_stats(
        np.concatenate(src_feats), np.concatenate(src_cls),
        np.concatenate(tgt_feats), np.concatenate(tgt_cls),
        4 * cfg.metrics_pixels, rng,
    )


def make_eval_record(state: TrainState, ds: SceneDataset) -> EvalRecord:
    iou, miou = evaluate(state.params, ds.eval_handle.eval_scenes)
    report = pseudo_label_report(state, ds)
    sim_same, sim_diff = eval_similarity_stats(state, ds)
    return EvalRecord(
        iteration=state.iteration,
        miou=miou,
        per_class_iou=[float(v) for v in iou],
        static_density=report["static"][0],
        static_accuracy=report["static"][1],
        dyn_nocal_density=report["dyn_nocal"][0],
        dyn_nocal_accuracy=report["dyn_nocal"][1],
        dyn_cal_density=report["dyn_cal"][0],
        dyn_cal_accuracy=report["dyn_cal"][1],
        hybrid_density=report["hybrid"][0],
        hybrid_accuracy=report["hybrid"][1],
        sim_same_class=sim_same,
        sim_diff_class=sim_diff,
    )


# ---------------------------------------------------------------------------
# full runs


def train(config: TrainConfig, ds: SceneDataset | None = None, step_callback=None):
    """Run the full schedule; returns (state, RunHistory)."""
    if ds is None:
        ds = build_dataset(config)
    state = init_state(config, ds)
    history = RunHistory()
    eval_points = _eval_points(config)
    warmup = warmup_iterations(config)
    for t in range(config.iterations):
        if t > 0 and (t % config.static_labels.refresh_interval == 0 or t == warmup):
            refresh_static_labels(state, ds)
        state, record = train_step(state, ds)
        history.steps.append(record)
        if state.iteration in eval_points:
            history.evals.append(make_eval_record(state, ds))
        if step_callback is not None:
            step_callback(state, record)
    return state, history


def _eval_points(config: TrainConfig):
    points = set(range(config.eval_interval, config.iterations + 1, config.eval_interval))
    points.add(config.iterations // 2)  # mid-training label report
    points.add(config.iterations)
    return points


def run_ablation(config: TrainConfig, arms=None, seeds=(0, 1, 2)):
    """Train every (arm, seed) pair; returns row dicts in benchmark arm order."""
    import dataclasses

    arms = list(ARM_ORDER) if arms is None else list(arms)
    rows = []
    for arm in arms:
        mious = []
        per_seed = {}
        for seed in seeds:
            run_cfg = dataclasses.replace(config, seed=seed, ablation=ABLATION_ARMS[arm])
            state, history = train(run_cfg)
            final = history.evals[-1]
            mious.append(final.miou)
            per_seed[seed] = history
        mean = float(np.mean(mious))
        sd = float(np.std(mious))
        rows.append(
            {
                "arm": arm,
                "seeds": list(seeds),
                "miou_per_seed": mious,
                "miou_mean": mean,
                "miou_sd": sd,
                "histories": per_seed,
            }
        )
    return rows
