import numpy as np
import pytest

from protoshift.core import ContractViolation, SealedLabelError
from protoshift.synthdata import (
    EVAL_INDEX_BASE,
    TARGET_INDEX_BASE,
    DomainShift,
    SceneSpec,
    benchmark_shift,
    dataset,
    generate,
)

SPEC = SceneSpec(seed=42)


class TestGenerate:
    def test_deterministic(self):
        a = generate(SPEC, benchmark_shift(), 5)
        b = generate(SPEC, benchmark_shift(), 5)
        assert (a.image == b.image).all()
        assert (a.ground_truth.indices == b.ground_truth.indices).all()

    def test_zero_shift_identical_to_source(self):
        for i in (0, 3, 11):
            src = generate(SPEC, DomainShift.zero(), i)
            tgt = generate(SPEC, DomainShift(), i)
            assert (src.image == tgt.image).all()
            assert (src.ground_truth.indices == tgt.ground_truth.indices).all()
        assert src.domain == "source" and tgt.domain == "source"

    def test_shift_preserves_layout(self):
        src = generate(SPEC, DomainShift.zero(), 2)
        tgt = generate(SPEC, benchmark_shift(), 2)
        assert (src.ground_truth.indices == tgt.ground_truth.indices).all()
        assert tgt.domain == "target"
        assert not (src.image == tgt.image).all()

    def test_mean_color_shift_matches_offsets(self):
        # no noise/jitter: per-class mean color moves by exactly
        # global_offset + class_offset (no pixel clamps at this magnitude)
        delta = 0.01
        shift = DomainShift(
            global_offset=(0.02, -0.01, 0.015),
            class_offsets=tuple(
                (delta * (c + 1), 0.0, -delta * (c + 1)) for c in range(5)
            ),
        )
        for i in range(4):
            src = generate(SPEC, DomainShift.zero(), i)
            tgt = generate(SPEC, shift, i)
            gt = src.ground_truth.indices
            for c in np.unique(gt):
                mask = gt == c
                got = tgt.image[mask].mean(axis=0) - src.image[mask].mean(axis=0)
                want = np.asarray(shift.global_offset) + np.asarray(shift.class_offsets[c])
                np.testing.assert_allclose(got, want, atol=1e-12)

    def test_image_in_unit_interval_and_fully_labeled(self):
        sc = generate(SPEC, benchmark_shift(2.0), 9)
        assert sc.image.min() >= 0.0 and sc.image.max() <= 1.0
        assert sc.ground_truth.labeled_mask().all()

    def test_rare_class_rate(self):
        hits = sum(
            1
            for i in range(300)
            if (generate(SPEC, DomainShift.zero(), i).ground_truth.indices == 4).any()
        )
        assert 0.2 < hits / 300 < 0.4

    def test_color_separation_enforced(self):
        with pytest.raises(ContractViolation):
            SceneSpec(base_colors=((0.5, 0.5, 0.5),) * 5)


class TestClassFrequencies:
    def test_source_vs_zero_shift_target_stationary(self):
        # disjoint index streams agree within 1% absolute per class
        n = 500
        counts_src = np.zeros(5)
        counts_tgt = np.zeros(5)
        for i in range(n):
            src = generate(SPEC, DomainShift.zero(), i)
            tgt = generate(SPEC, DomainShift.zero(), TARGET_INDEX_BASE + i)
            counts_src += np.bincount(src.ground_truth.indices.ravel(), minlength=5)
            counts_tgt += np.bincount(tgt.ground_truth.indices.ravel(), minlength=5)
        freq_src = counts_src / counts_src.sum()
        freq_tgt = counts_tgt / counts_tgt.sum()
        assert np.abs(freq_src - freq_tgt).max() < 0.01


class TestDataset:
    def test_counts_and_distinct_indices(self):
        ds = dataset(SPEC, benchmark_shift(), n_source=10, n_target=7, n_eval=3)
        assert len(ds.source) == 10 and len(ds.target) == 7
        assert len(ds.eval_handle.eval_scenes) == 3
        src_idx = {s.index for s in ds.source}
        tgt_idx = {t.index for t in ds.target}
        eval_idx = {s.index for s in ds.eval_handle.eval_scenes}
        assert len(src_idx) == 10 and len(tgt_idx) == 7
        assert not (src_idx & tgt_idx) and not (tgt_idx & eval_idx)
        assert min(tgt_idx) >= TARGET_INDEX_BASE and min(eval_idx) >= EVAL_INDEX_BASE

    def test_target_ground_truth_sealed(self):
        ds = dataset(SPEC, benchmark_shift(), 2, 2)
        with pytest.raises(SealedLabelError):
            _ = ds.target[0].ground_truth

    def test_eval_handle_exposes_ground_truth(self):
        ds = dataset(SPEC, benchmark_shift(), 2, 2, n_eval=1)
        gt = ds.eval_handle.train_ground_truth(0)
        assert gt.labeled_mask().all()
        scene = ds.eval_handle.eval_scenes[0]
        assert scene.ground_truth.labeled_mask().all()

    def test_train_gt_matches_regenerated_scene(self):
        ds = dataset(SPEC, benchmark_shift(), 2, 3)
        regenerated = generate(SPEC, benchmark_shift(), TARGET_INDEX_BASE + 1)
        np.testing.assert_array_equal(
            ds.eval_handle.train_ground_truth(1).indices,
            regenerated.ground_truth.indices,
        )
