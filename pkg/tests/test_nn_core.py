from __future__ import annotations

import numpy as np
import pytest

from oracles import fd_gradients, relu_mlp_loss
from oui_lab.nn_core import (
    POLICY,
    VALUE,
    AdamState,
    ConfigurationError,
    DivergenceError,
    Network,
    adam_step,
    backward,
    clip_global_norm,
    flatten,
    forward,
    global_norm,
    init_network,
    unflatten,
)


def _one_by_one(w, b):
    return Network([np.array([[float(w)]]), np.array([[1.0]])], [np.array([float(b)]), np.zeros(1)], VALUE)


class TestInit:
    def test_shapes(self):
        net = init_network([4, 64, 64, 2], POLICY, seed=0)
        assert [w.shape for w in net.weights] == [(64, 4), (64, 64), (2, 64)]
        assert net.layer_sizes == [4, 64, 64, 2]

    def test_zero_biases(self):
        net = init_network([4, 8, 3], POLICY, seed=1)
        assert all(np.all(b == 0.0) for b in net.biases)

    def test_deterministic(self):
        a = init_network([5, 7, 1], VALUE, seed=3)
        b = init_network([5, 7, 1], VALUE, seed=3)
        assert all(np.array_equal(x, y) for x, y in zip(a.params(), b.params()))

    def test_policy_head_is_small(self):
        net = init_network([4, 64, 2], POLICY, seed=0)
        assert np.abs(net.weights[-1]).max() < 0.01 * np.sqrt(6 / 66) + 1e-15

    @pytest.mark.parametrize("sizes", [[4], [4, 0, 2], []])
    def test_bad_sizes(self, sizes):
        with pytest.raises(ConfigurationError):
            init_network(sizes)

    def test_bad_head(self):
        with pytest.raises(ConfigurationError):
            init_network([2, 2], "softmax")

    def test_mismatched_layers_rejected(self):
        with pytest.raises(ConfigurationError):
            Network([np.ones((3, 2)), np.ones((1, 4))], [np.zeros(3), np.zeros(1)], VALUE)


class TestForward:
    def test_zero_net(self):
        net = Network([np.zeros((3, 2)), np.zeros((1, 3))], [np.zeros(3), np.zeros(1)], VALUE)
        tr = forward(net, np.random.default_rng(0).normal(size=(5, 2)))
        assert np.all(tr.preactivations[0] == 0) and np.all(tr.outputs == 0)

    def test_rectifier(self):
        tr = forward(_one_by_one(1, 0), [[-2.0]])
        assert tr.preactivations[0][0, 0] == -2.0
        assert tr.activations(1)[0, 0] == 0.0

    def test_affine(self):
        assert forward(_one_by_one(2, 1), [[3.0]]).preactivations[0][0, 0] == 7.0

    def test_bad_input_width(self):
        with pytest.raises(ValueError):
            forward(_one_by_one(1, 0), np.zeros((2, 3)))


class TestBackward:
    def test_zero_output_grads(self):
        net = init_network([3, 5, 2], POLICY, seed=0)
        x = np.random.default_rng(1).normal(size=(4, 3))
        grads = backward(net, forward(net, x), np.zeros((4, 2)))
        assert all(np.all(g == 0) for g in grads)

    def test_chain_rule_by_hand(self):
        net = _one_by_one(2, 0)
        grads = backward(net, forward(net, [[3.0]]), np.ones((1, 1)))
        assert grads[0][0, 0] == 3.0

    @pytest.mark.parametrize("seed", range(5))
    def test_finite_differences(self, seed):
        rng = np.random.default_rng(seed)
        net = init_network([3, 4, 3, 2], VALUE if seed % 2 else POLICY, seed=seed)
        net = net.with_params([p + rng.normal(scale=0.3, size=p.shape) for p in net.params()])
        x = rng.normal(size=(3, 3))
        gout = rng.normal(size=(3, 2))
        analytic = backward(net, forward(net, x), gout)

        def loss(params):
            return relu_mlp_loss(params[0::2], params[1::2], x, gout)

        numeric = fd_gradients(loss, [p.copy() for p in net.params()])
        for a, n in zip(analytic, numeric):
            np.testing.assert_allclose(a, n, rtol=1e-4, atol=1e-7)


class TestClipping:
    def test_halves(self):
        g = [np.array([0.6]), np.array([[0.8]])]
        out = clip_global_norm(g, 0.5)
        np.testing.assert_allclose(out[0], [0.3])
        np.testing.assert_allclose(out[1], [[0.4]])

    def test_unchanged(self):
        g = [np.array([0.3])]
        assert np.array_equal(clip_global_norm(g, 0.5)[0], g[0])

    def test_zero(self):
        out = clip_global_norm([np.zeros(3)], 0.5)
        assert global_norm(out) == 0.0


class TestAdam:
    def test_first_step_magnitude(self):
        net = Network([np.array([[0.0]])], [np.array([0.0])], VALUE)
        state = AdamState.zeros_like(net)
        for g in (1e-3, 0.7, -25.0):
            new, _ = adam_step(net, state, [np.array([[g]]), np.array([0.0])], lr=0.01)
            # t=1: m_hat = g, sqrt(v_hat) = |g| -> step = lr * g / (|g| + eps)
            assert new.weights[0][0, 0] == pytest.approx(-0.01 * g / (abs(g) + 1e-5), rel=1e-12)

    def test_zero_gradients(self):
        net = init_network([2, 3, 1], VALUE, seed=0)
        state = AdamState.zeros_like(net)
        cur = net
        for _ in range(5):
            cur, state = adam_step(cur, state, [np.zeros_like(p) for p in net.params()], 0.1)
        assert all(np.array_equal(a, b) for a, b in zip(cur.params(), net.params()))

    def test_mirror_symmetry(self):
        net = Network([np.array([[0.0]])], [np.array([0.0])], VALUE)
        rng = np.random.default_rng(0)
        seq = rng.normal(size=20)
        a, sa = net, AdamState.zeros_like(net)
        b, sb = net, AdamState.zeros_like(net)
        for g in seq:
            a, sa = adam_step(a, sa, [np.array([[g]]), np.zeros(1)], 0.01)
            b, sb = adam_step(b, sb, [np.array([[-g]]), np.zeros(1)], 0.01)
        assert a.weights[0][0, 0] == -b.weights[0][0, 0]

    def test_nan_gradient_raises(self):
        net = Network([np.array([[0.0]])], [np.array([0.0])], VALUE)
        with pytest.raises(DivergenceError):
            adam_step(net, AdamState.zeros_like(net), [np.array([[np.nan]]), np.zeros(1)], 0.01)

    def test_zero_lr_is_identity(self):
        net = init_network([2, 3, 1], VALUE, seed=0)
        new, state = adam_step(net, AdamState.zeros_like(net), [np.ones_like(p) for p in net.params()], 0.0)
        assert state.step_count == 1
        assert all(np.array_equal(a, b) for a, b in zip(new.params(), net.params()))


def test_flatten_roundtrip():
    net = init_network([3, 4, 2], POLICY, seed=2)
    back = unflatten(flatten(net.params()), net.params())
    assert all(np.array_equal(a, b) for a, b in zip(back, net.params()))
