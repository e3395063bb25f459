import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from protoshift.core import ConfigError, ContractViolation, FeatureMap, LabelMap, UNLABELED
from protoshift.prototypes import (
    BiasMap,
    PrototypeBank,
    PrototypeSet,
    ProtoEntry,
    calibrate,
    domain_bias,
    ema_update,
    masked_average_pool,
    masked_average_pool_backward,
    masked_average_pool_batch,
)

from helpers import oracle_map


def rand_instance(rng, h=4, w=4, d=3, num_classes=3, label_rate=0.8):
    feats = rng.standard_normal((h, w, d))
    labels = rng.integers(0, num_classes, size=(h, w)).astype(np.int16)
    labels[rng.random((h, w)) > label_rate] = UNLABELED
    return FeatureMap(feats), LabelMap(labels, num_classes)


class TestMaskedAveragePool:
    def test_mean_of_two(self):
        fm = FeatureMap(np.array([[[1.0, 0.0], [0.0, 1.0]]]))
        lm = LabelMap(np.array([[0, 0]], dtype=np.int16), 4)
        protos = masked_average_pool(fm, lm)
        np.testing.assert_allclose(protos.entries[0].vector, [0.5, 0.5])
        assert protos.entries[0].pixel_count == 2

    def test_absent_class_has_no_entry(self):
        fm = FeatureMap(np.zeros((2, 2, 3)))
        lm = LabelMap(np.zeros((2, 2), dtype=np.int16), 4)
        protos = masked_average_pool(fm, lm)
        assert 3 not in protos
        assert protos.classes() == [0]

    def test_matches_brute_force(self):
        rng = np.random.default_rng(0)
        for _ in range(30):
            fm, lm = rand_instance(rng)
            got = masked_average_pool(fm, lm)
            want = oracle_map(fm.data, lm.indices, lm.num_classes)
            assert sorted(want) == got.classes()
            for c, (vec, count) in want.items():
                np.testing.assert_allclose(got.entries[c].vector, vec, atol=1e-12)
                assert got.entries[c].pixel_count == count

    def test_shape_mismatch_rejected(self):
        with pytest.raises(ContractViolation):
            masked_average_pool(
                FeatureMap(np.zeros((2, 2, 3))), LabelMap(np.zeros((3, 2), dtype=np.int16), 2)
            )

    def test_permutation_invariance(self):
        rng = np.random.default_rng(1)
        fm, lm = rand_instance(rng)
        perm = rng.permutation(fm.height * fm.width)
        fm2 = FeatureMap(fm.pixels()[perm].reshape(fm.data.shape))
        lm2 = LabelMap(lm.indices.ravel()[perm].reshape(lm.indices.shape), lm.num_classes)
        p1, p2 = masked_average_pool(fm, lm), masked_average_pool(fm2, lm2)
        assert p1.classes() == p2.classes()
        for c in p1.classes():
            np.testing.assert_allclose(p1.entries[c].vector, p2.entries[c].vector, atol=1e-12)

    @given(st.floats(0.1, 10.0))
    @settings(max_examples=25, deadline=None)
    def test_homogeneity(self, alpha):
        rng = np.random.default_rng(2)
        fm, lm = rand_instance(rng)
        p1 = masked_average_pool(fm, lm)
        p2 = masked_average_pool(FeatureMap(alpha * fm.data), lm)
        for c in p1.classes():
            np.testing.assert_allclose(
                p2.entries[c].vector, alpha * p1.entries[c].vector, rtol=1e-9, atol=1e-12
            )

    def test_within_convex_hull_of_pixels(self):
        rng = np.random.default_rng(3)
        fm, lm = rand_instance(rng)
        protos = masked_average_pool(fm, lm)
        for c in protos.classes():
            members = fm.pixels()[lm.indices.ravel() == c]
            vec = protos.entries[c].vector
            assert (vec >= members.min(axis=0) - 1e-12).all()
            assert (vec <= members.max(axis=0) + 1e-12).all()

    def test_batch_pool_equals_concatenation(self):
        rng = np.random.default_rng(4)
        pairs = [rand_instance(rng) for _ in range(3)]
        pooled = masked_average_pool_batch(pairs)
        all_feats = np.concatenate([fm.pixels() for fm, _ in pairs])
        all_idx = np.concatenate([lm.indices.ravel() for _, lm in pairs])
        want = oracle_map(all_feats.reshape(1, -1, all_feats.shape[1]),
                          all_idx.reshape(1, -1), 3)
        assert sorted(want) == pooled.classes()
        for c, (vec, count) in want.items():
            np.testing.assert_allclose(pooled.entries[c].vector, vec, atol=1e-12)
            assert pooled.entries[c].pixel_count == count

    def test_backward_distributes_by_count(self):
        rng = np.random.default_rng(5)
        fm, lm = rand_instance(rng, label_rate=1.0)
        protos = masked_average_pool(fm, lm)
        grads = {c: rng.standard_normal(fm.dim) for c in protos.classes()}
        gf = masked_average_pool_backward(grads, lm, protos)
        for c in protos.classes():
            n = protos.entries[c].pixel_count
            for pos in zip(*np.nonzero(lm.indices == c)):
                np.testing.assert_allclose(gf[pos], grads[c] / n, atol=1e-12)


class TestEmaBank:
    def test_momentum_one_keeps_bank(self):
        bank = PrototypeBank(3, 2, momentum=1.0)
        bank.mu[0] = [1.0, 2.0]
        bank.initialized[0] = True
        fresh = PrototypeSet({0: ProtoEntry(np.array([9.0, 9.0]), 1)})
        ema_update(bank, fresh)
        np.testing.assert_array_equal(bank.mu[0], [1.0, 2.0])

    def test_convex_combination(self):
        bank = PrototypeBank(2, 2, momentum=0.9)
        bank.mu[0] = [1.0, 0.0]
        bank.initialized[0] = True
        ema_update(bank, PrototypeSet({0: ProtoEntry(np.array([0.0, 1.0]), 1)}))
        np.testing.assert_allclose(bank.mu[0], [0.9, 0.1])

    def test_first_observation_copies_exactly(self):
        bank = PrototypeBank(2, 2, momentum=0.9)
        vec = np.array([0.3, -0.7])
        ema_update(bank, PrototypeSet({1: ProtoEntry(vec, 5)}))
        np.testing.assert_array_equal(bank.mu[1], vec)
        assert bank.initialized[1]
        assert not bank.initialized[0]

    def test_absent_classes_untouched(self):
        bank = PrototypeBank(3, 2, momentum=0.5)
        bank.mu[2] = [4.0, 4.0]
        bank.initialized[2] = True
        ema_update(bank, PrototypeSet({0: ProtoEntry(np.zeros(2), 1)}))
        np.testing.assert_array_equal(bank.mu[2], [4.0, 4.0])

    def test_invalid_momentum_rejected(self):
        with pytest.raises(ConfigError):
            PrototypeBank(2, 2, momentum=1.5)

    def test_uninitialized_reads_are_absent(self):
        bank = PrototypeBank(2, 2, momentum=0.5)
        assert bank.get(0) is None
        ema_update(bank, PrototypeSet({0: ProtoEntry(np.ones(2), 1)}))
        assert bank.get(0) is not None and bank.get(1) is None

    @given(st.floats(0.0, 1.0))
    @settings(max_examples=40, deadline=None)
    def test_convex_hull_bound(self, lam):
        rng = np.random.default_rng(6)
        bank = PrototypeBank(1, 4, momentum=lam)
        old = rng.standard_normal(4)
        bank.mu[0] = old.copy()
        bank.initialized[0] = True
        rho = rng.standard_normal(4)
        ema_update(bank, PrototypeSet({0: ProtoEntry(rho, 1)}))
        lo, hi = np.minimum(old, rho), np.maximum(old, rho)
        assert (bank.mu[0] >= lo - 1e-12).all() and (bank.mu[0] <= hi + 1e-12).all()


class TestBiasAndCalibration:
    def _bank(self, mu, init, momentum=0.99):
        bank = PrototypeBank(len(init), mu.shape[1], momentum)
        bank.mu = mu.astype(float)
        bank.initialized = np.array(init)
        return bank

    def test_equal_banks_give_zero_bias(self):
        mu = np.arange(6).reshape(3, 2).astype(float)
        b1 = self._bank(mu.copy(), [True, True, True])
        b2 = self._bank(mu.copy(), [True, True, True])
        assert domain_bias(b1, b2).is_zero()

    def test_vector_subtraction(self):
        src = self._bank(np.array([[0.5, 1.0]]), [True])
        tgt = self._bank(np.array([[1.0, 2.0]]), [True])
        np.testing.assert_allclose(domain_bias(src, tgt).xi[0], [0.5, 1.0])

    def test_uninitialized_class_gives_zero(self):
        src = self._bank(np.array([[1.0, 1.0], [2.0, 2.0]]), [True, True])
        tgt = self._bank(np.array([[3.0, 3.0], [0.0, 0.0]]), [True, False])
        xi = domain_bias(src, tgt).xi
        np.testing.assert_allclose(xi[0], [2.0, 2.0])
        np.testing.assert_array_equal(xi[1], [0.0, 0.0])

    def test_zero_bias_calibration_is_identity(self):
        protos = PrototypeSet({0: ProtoEntry(np.array([1.0, 2.0]), 3)})
        out = calibrate(protos, BiasMap.zero(2, 2))
        np.testing.assert_array_equal(out.entries[0].vector, [1.0, 2.0])
        assert out.entries[0].pixel_count == 3

    def test_vector_addition(self):
        protos = PrototypeSet({0: ProtoEntry(np.array([1.0, 0.0]), 1)})
        bias = BiasMap(np.array([[-1.0, 1.0]]))
        np.testing.assert_allclose(calibrate(protos, bias).entries[0].vector, [0.0, 1.0])

    def test_round_trip(self):
        rng = np.random.default_rng(7)
        protos = PrototypeSet(
            {c: ProtoEntry(rng.standard_normal(4), c + 1) for c in range(3)}
        )
        xi = rng.standard_normal((3, 4))
        back = calibrate(calibrate(protos, BiasMap(xi)), BiasMap(-xi))
        for c in protos.classes():
            np.testing.assert_allclose(
                back.entries[c].vector, protos.entries[c].vector, atol=1e-12
            )
            assert back.entries[c].pixel_count == protos.entries[c].pixel_count
