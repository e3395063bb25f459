"""Benchmark tuning harness: run arm subsets for a candidate config and
print the numbers the acceptance criteria look at."""
import argparse
import dataclasses
import json
import time

import numpy as np

from protoshift.config import DataConfig, default_config
from protoshift.contrastive import LossWeights
from protoshift.synthdata import DomainShift
from protoshift.trainer import ABLATION_ARMS, ARM_ORDER, train


def shifted(s_cls, s_glob=1.0, sigma=0.02, jitter=0.02):
    return DomainShift(
        global_offset=(-0.05 * s_glob, 0.02 * s_glob, 0.07 * s_glob),
        class_offsets=(
            (0.07 * s_cls, 0.03 * s_cls, -0.06 * s_cls),
            (-0.05 * s_cls, -0.02 * s_cls, 0.05 * s_cls),
            (0.06 * s_cls, -0.06 * s_cls, -0.09 * s_cls),
            (0.05 * s_cls, 0.14 * s_cls, -0.01 * s_cls),
            (-0.07 * s_cls, -0.12 * s_cls, 0.05 * s_cls),
        ),
        noise_sigma=sigma,
        texture_jitter=jitter,
    )


def main():
    ap = argparse.ArgumentParser()
    ap.add_argument("--iters", type=int, default=600)
    ap.add_argument("--lr", type=float, default=0.01)
    ap.add_argument("--thr", type=float, default=0.95)
    ap.add_argument("--ema", type=float, default=0.9)
    ap.add_argument("--scls", type=float, default=0.5)
    ap.add_argument("--sglob", type=float, default=1.0)
    ap.add_argument("--sigma", type=float, default=0.02)
    ap.add_argument("--q", type=float, default=0.5)
    ap.add_argument("--warmup", type=float, default=0.3)
    ap.add_argument("--wseg_t", type=float, default=0.5)
    ap.add_argument("--went_s", type=float, default=0.05)
    ap.add_argument("--went_t", type=float, default=0.1)
    ap.add_argument("--wfcl", type=float, default=0.5)
    ap.add_argument("--wbcl", type=float, default=0.5)
    ap.add_argument("--tau", type=float, default=0.1)
    ap.add_argument("--scenes", type=int, default=24)
    ap.add_argument("--seeds", type=int, nargs="+", default=[0])
    ap.add_argument("--arms", nargs="+", default=list(ARM_ORDER))
    args = ap.parse_args()

    from protoshift.pseudo import StaticLabelConfig

    cfg = default_config(
        iterations=args.iters,
        lr0=args.lr,
        similarity_threshold=args.thr,
        ema_momentum=args.ema,
        eval_interval=max(50, args.iters // 4),
        target_warmup_fraction=args.warmup,
        static_labels=StaticLabelConfig(fraction=args.q, refresh_interval=max(1, args.iters // 10)),
        loss_weights=LossWeights(1.0, args.wseg_t, args.went_s, args.went_t,
                                 args.wfcl, args.wbcl, temperature=args.tau),
        shift=shifted(args.scls, args.sglob, args.sigma),
        data=DataConfig(args.scenes, args.scenes, 12),
    )
    t0 = time.perf_counter()
    summary = {}
    for arm in args.arms:
        mious, mids, finals = [], [], []
        for seed in args.seeds:
            run_cfg = dataclasses.replace(cfg, ablation=ABLATION_ARMS[arm], seed=seed)
            state, hist = train(run_cfg)
            ev = hist.evals[-1]
            mid = [e for e in hist.evals if e.iteration == cfg.iterations // 2][0]
            mious.append(ev.miou)
            mids.append(mid)
            finals.append(ev)
        m = float(np.mean(mious))
        summary[arm] = m
        mid = mids[0]
        print(
            f"{arm:14s} miou={m:.4f} ({', '.join(f'{x:.3f}' for x in mious)}) | mid: "
            f"stat {np.mean([x.static_density for x in mids]):.2f}/{np.mean([x.static_accuracy for x in mids]):.3f} "
            f"dnc {np.mean([x.dyn_nocal_density for x in mids]):.2f}/{np.mean([x.dyn_nocal_accuracy for x in mids]):.3f} "
            f"dc {np.mean([x.dyn_cal_density for x in mids]):.2f}/{np.mean([x.dyn_cal_accuracy for x in mids]):.3f} "
            f"hyb {np.mean([x.hybrid_density for x in mids]):.2f}/{np.mean([x.hybrid_accuracy for x in mids]):.3f} | "
            f"sims {np.mean([x.sim_same_class for x in finals]):.3f}/{np.mean([x.sim_diff_class for x in finals]):.3f}",
            flush=True,
        )
    order_ok = all(
        summary[a] < summary[b]
        for a, b in zip(args.arms, args.arms[1:])
        if a in summary and b in summary
    )
    print(f"order {'OK' if order_ok else 'BROKEN'} | gap full-base "
          f"{(summary.get('full', 0) - summary.get('base', 0)) * 100:.1f} pts | {time.perf_counter()-t0:.0f}s")


if __name__ == "__main__":
    main()
