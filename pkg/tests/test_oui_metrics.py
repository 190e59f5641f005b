from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from oui_lab import envs
from oui_lab.nn_core import POLICY, VALUE, ConfigurationError, Network, init_network
from oui_lab.oui_metrics import (
    ActivationMask,
    compute_mask,
    flip_fraction,
    oui_balance_form,
    oui_branch,
    oui_from_counts,
    oui_layer,
    oui_report,
    pooled_flip,
    unit_flip_fraction,
)


def _reference_oui(mask):
    """Direct per-column min(s, B - s) / floor(B / 2), averaged."""
    b, d = mask.shape
    total = 0.0
    for j in range(d):
        s = int(sum(bool(v) for v in mask[:, j]))
        total += min(s, b - s) / (b // 2)
    return total / d


masks = st.integers(2, 40).flatmap(
    lambda b: st.integers(1, 12).flatmap(lambda d: arrays(bool, (b, d)))
)


class TestOuiLayer:
    def test_hand_example(self):
        m = np.array([[1, 0], [1, 0], [0, 0], [0, 0]], dtype=bool)
        assert oui_layer(m) == 0.5

    def test_balanced(self):
        m = np.zeros((6, 3), dtype=bool)
        m[:3] = True
        assert oui_layer(m) == 1.0

    def test_saturated(self):
        m = np.zeros((7, 4), dtype=bool)
        m[:, 1] = True
        assert oui_layer(m) == 0.0

    def test_odd_batch(self):
        m = np.array([[1], [1], [0], [0], [0]], dtype=bool)
        assert oui_layer(m) == 1.0
        assert oui_balance_form(m) == pytest.approx(0.8, abs=1e-15)

    def test_needs_two_samples(self):
        with pytest.raises(ConfigurationError):
            oui_from_counts(np.array([0]), 1)

    @settings(max_examples=200, deadline=None)
    @given(masks)
    def test_matches_reference(self, m):
        assert oui_layer(m) == pytest.approx(_reference_oui(m), abs=1e-12)

    @settings(max_examples=200, deadline=None)
    @given(masks)
    def test_range_and_forms(self, m):
        b = m.shape[0]
        o = oui_layer(m)
        assert 0.0 <= o <= 1.0
        bal = oui_balance_form(m)
        factor = 1.0 if b % 2 == 0 else (b - 1) / b
        assert bal == pytest.approx(factor * o, abs=1e-12)

    @settings(max_examples=100, deadline=None)
    @given(masks, st.randoms(use_true_random=False))
    def test_permutation_invariance(self, m, rnd):
        rows = list(range(m.shape[0]))
        cols = list(range(m.shape[1]))
        rnd.shuffle(rows)
        rnd.shuffle(cols)
        assert oui_layer(m[rows][:, cols]) == pytest.approx(oui_layer(m), abs=1e-15)

    @settings(max_examples=100, deadline=None)
    @given(masks)
    def test_complement_invariance(self, m):
        assert oui_layer(~m) == pytest.approx(oui_layer(m), abs=1e-15)

    @pytest.mark.parametrize("b", [3, 5, 7, 9, 21])
    def test_odd_ratio_exhaustive(self, b):
        for s in range(b + 1):
            col = np.zeros((b, 1), dtype=bool)
            col[:s] = True
            assert oui_balance_form(col) == pytest.approx((b - 1) / b * oui_layer(col), abs=1e-12)


class TestMasks:
    def test_zero_net_all_off(self):
        net = Network([np.zeros((3, 2)), np.zeros((1, 3))], [np.zeros(3), np.zeros(1)], VALUE)
        m = compute_mask(net, np.random.default_rng(0).normal(size=(5, 2)))
        assert not m.layers[0].any()

    def test_single_neuron(self):
        net = Network([np.array([[1.0]]), np.array([[1.0]])], [np.zeros(1), np.zeros(1)], VALUE)
        m = compute_mask(net, np.array([[-1.0], [1.0]]))
        assert m.layers[0][:, 0].tolist() == [False, True]

    def test_negation_flips_bits(self):
        net = init_network([4, 16, 2], POLICY, seed=0)
        x = np.random.default_rng(1).normal(size=(50, 4))
        neg = Network([-net.weights[0], net.weights[1]], [-net.biases[0], net.biases[1]], POLICY)
        a, b = compute_mask(net, x).layers[0], compute_mask(neg, x).layers[0]
        assert np.array_equal(a, ~b)  # zero biases and Gaussian inputs: no exact zeros

    def test_branch_mean(self):
        # B=10: layer 0 has s = [2, 2] -> 0.4, layer 1 has s = [4] -> 0.8
        a = np.zeros((10, 2), dtype=bool)
        a[:2] = True
        b = np.zeros((10, 1), dtype=bool)
        b[:4] = True
        rep = oui_report(ActivationMask([a, b]))
        assert rep.per_layer == [pytest.approx(0.4), pytest.approx(0.8)]
        assert rep.branch_mean == pytest.approx(0.6)

    def test_fresh_actor_interior(self):
        probe = envs.make_probe_batch("cartpole", 1024, seed=0)
        net = init_network([4, 64, 64, 2], POLICY, seed=0)
        rep = oui_branch(net, probe)
        assert 0.0 < rep.branch_mean < 1.0
        assert len(rep.per_layer) == 2


class TestFlips:
    def _mask(self, rng, b=10, d=4):
        return ActivationMask([rng.random((b, d)) < 0.5, rng.random((b, 3)) < 0.5])

    def test_identical(self):
        m = self._mask(np.random.default_rng(0))
        assert flip_fraction(m, m) == 0.0 and unit_flip_fraction(m, m) == 0.0

    def test_complement(self):
        m = self._mask(np.random.default_rng(1))
        c = ActivationMask([~a for a in m.layers])
        assert flip_fraction(m, c) == 1.0 and unit_flip_fraction(m, c) == 1.0

    def test_three_of_ten(self):
        a = np.zeros((10, 1), dtype=bool)
        b = a.copy()
        b[[1, 4, 7]] = True
        assert flip_fraction(ActivationMask([a]), ActivationMask([b])) == pytest.approx(0.3)

    def test_pooled(self):
        rng = np.random.default_rng(2)
        p1, c1 = self._mask(rng), self._mask(rng)
        p2, c2 = self._mask(rng, 10, 6), self._mask(rng, 10, 6)
        ham, unit = pooled_flip([(p1, c1), (p2, c2)])
        bits = sum(int((a != b).sum()) for m0, m1 in ((p1, c1), (p2, c2)) for a, b in zip(m0.layers, m1.layers))
        size = sum(a.size for m0 in (p1, p2) for a in m0.layers)
        assert ham == bits / size
        assert 0 <= unit <= 1

    def test_shape_mismatch(self):
        rng = np.random.default_rng(3)
        with pytest.raises(ValueError):
            flip_fraction(self._mask(rng, 10, 4), self._mask(rng, 10, 5))
