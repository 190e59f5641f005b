from __future__ import annotations

import numpy as np
import pytest

from oracles import gae_bruteforce
from oui_lab import envs
from oui_lab.nn_core import ConfigurationError
from oui_lab.ppo_engine import (
    PpoConfig,
    Trainer,
    checkpoint_schedule,
    compute_gae,
    normalize_advantages,
    ratio_stats,
    surrogate_terms,
    train_run,
)


class TestGae:
    def test_hand_example(self):
        adv, ret = compute_gae([1, 1], [0.5, 0.5], 123.0, [False, True], [False, False], 1.0, 1.0)
        np.testing.assert_allclose(adv, [1.5, 0.5])
        np.testing.assert_allclose(ret, [2.0, 1.0])

    def test_zeros(self):
        adv, _ = compute_gae(np.zeros(5), np.zeros(5), 0.0, np.zeros(5, bool), np.zeros(5, bool), 0.99, 0.95)
        assert np.all(adv == 0)

    def test_lambda_zero_is_td(self):
        rng = np.random.default_rng(0)
        r, v = rng.normal(size=6), rng.normal(size=6)
        adv, _ = compute_gae(r, v, 0.7, np.zeros(6, bool), np.zeros(6, bool), 0.9, 0.0)
        nv = np.append(v[1:], 0.7)
        np.testing.assert_allclose(adv, r + 0.9 * nv - v, atol=1e-14)

    def test_multi_episode_rollout_matches_oracle(self):
        rng = np.random.default_rng(1)
        for _ in range(100):
            lengths = rng.integers(1, 10, size=rng.integers(1, 5))
            rewards, values, term, trunc, tvals, expected = [], [], [], [], [], []
            final_bootstrap = float(rng.normal())
            for e, L in enumerate(lengths):
                r, v = list(rng.normal(size=L)), list(rng.normal(size=L))
                last = e == len(lengths) - 1
                kind = rng.integers(3)  # 0 terminated, 1 truncated, 2 cut by rollout end (last only)
                if kind == 2 and not last:
                    kind = 1
                after = final_bootstrap if kind == 2 else float(rng.normal())
                expected += gae_bruteforce(r, v, after, kind == 0, 0.99, 0.95)
                rewards += r
                values += v
                term += [False] * (L - 1) + [kind == 0]
                trunc += [False] * (L - 1) + [kind == 1]
                tvals += [0.0] * (L - 1) + [after if kind == 1 else 0.0]
            adv, ret = compute_gae(rewards, values, final_bootstrap, term, trunc, 0.99, 0.95, tvals)
            np.testing.assert_allclose(adv, expected, atol=1e-10)
            np.testing.assert_allclose(ret, np.array(expected) + values, atol=1e-10)

    def test_length_mismatch(self):
        with pytest.raises(ValueError):
            compute_gae([1, 2], [1], 0.0, [False, False], [False, False], 0.9, 0.9)

    def test_mid_truncation_requires_values(self):
        with pytest.raises(ValueError):
            compute_gae([1, 2], [0, 0], 0.0, [False, False], [True, False], 0.9, 0.9)


class TestLosses:
    def test_clip_fraction(self):
        r = np.array([1.05, 1.2, 0.85])
        _, clip = ratio_stats(r, np.log(r), 0.1)
        assert clip == pytest.approx(2 / 3)

    def test_identity_ratio(self):
        r = np.ones(8)
        assert ratio_stats(r, np.zeros(8), 0.1) == (0.0, 0.0)

    def test_clipped_branch(self):
        surr, active = surrogate_terms(np.array([1.5]), np.array([2.0]), 0.1)
        assert surr[0] == pytest.approx(1.1 * 2.0) and not active[0]

    def test_kl_nonnegative(self):
        r = np.exp(np.random.default_rng(0).normal(scale=0.3, size=1000))
        assert ratio_stats(r, np.log(r), 0.1)[0] >= 0

    def test_normalization(self):
        a = normalize_advantages(np.random.default_rng(0).normal(3, 5, size=1024))
        assert abs(a.mean()) < 1e-10 and abs(a.std() - 1) < 1e-6
        assert np.all(normalize_advantages(np.full(4, 2.0)) == 0)


class TestConfig:
    def test_defaults(self):
        c = PpoConfig.for_env("cartpole", 1e-3)
        assert (c.gamma, c.gae_lambda, c.clip_range, c.epochs, c.minibatch) == (0.99, 0.95, 0.1, 4, 256)
        assert (c.value_coef, c.entropy_coef, c.max_grad_norm) == (0.5, 0.0, 0.5)
        assert (c.rollout_len, c.total_steps, c.num_updates) == (1024, 120_000, 117)
        g = PpoConfig.for_env("gridroom", 1e-3)
        assert (g.rollout_len, g.total_steps) == (512, 20_000)

    def test_rejects(self):
        with pytest.raises(ConfigurationError):
            PpoConfig(lr=-1.0)
        with pytest.raises(ConfigurationError):
            PpoConfig(lr=1e-3, entropy_coef=0.01)

    def test_schedule(self):
        s = checkpoint_schedule(117)
        assert len(s) == 100 and s[-1] == 117 and s[9] == 12
        assert all(b >= a for a, b in zip(s, s[1:]))


@pytest.fixture(scope="module")
def full_cartpole_run():
    events = []
    rec = train_run("cartpole", PpoConfig.for_env("cartpole", 1e-3, seed=0), on_checkpoint=events.append)
    return rec, events


class TestTraining:
    def test_horizon(self, full_cartpole_run):
        rec, events = full_cartpole_run
        assert events[-1].update == 117
        assert len(rec.checkpoints) == 100
        assert rec.checkpoint_at(0.10) is not None and rec.checkpoints[-1].fraction_done == 1.0

    def test_learns(self, full_cartpole_run):
        rec, _ = full_cartpole_run
        assert not rec.diverged and rec.final_return > 200

    def test_accounting_each_checkpoint(self, full_cartpole_run):
        _, events = full_cartpole_run
        for prev, cur in zip(events, events[1:]):
            for branch, (a, b) in enumerate([(prev.actor_mask, cur.actor_mask), (prev.critic_mask, cur.critic_mask)]):
                for layer, (m0, m1) in enumerate(zip(a.layers, b.layers)):
                    n_mp = (~m0 & m1).sum(axis=0)
                    n_pm = (m0 & ~m1).sum(axis=0)
                    assert np.array_equal(m1.sum(axis=0), m0.sum(axis=0) + n_mp - n_pm)
                    d = cur.drift[branch][layer]
                    assert np.array_equal(d.n_minus_plus, n_mp) and np.array_equal(d.n_plus_minus, n_pm)

    def test_metric_ranges(self, full_cartpole_run):
        rec, _ = full_cartpole_run
        for c in rec.checkpoints:
            assert 0 <= c.oui_actor <= 1 and 0 <= c.oui_critic <= 1
            assert 0 <= c.clip_fraction <= 1 and c.approx_kl >= -1e-12
            assert 0 <= c.flip_fraction <= 1

    def test_zero_lr_freezes_everything(self):
        cfg = PpoConfig.for_env("cartpole", 0.0, seed=1, total_steps=8 * 1024)
        events = []
        rec = train_run("cartpole", cfg, on_checkpoint=events.append)
        first = rec.checkpoints[0]
        for c in rec.checkpoints:
            assert (c.oui_actor, c.oui_critic) == (first.oui_actor, first.oui_critic)
            assert c.approx_kl == 0.0 and c.clip_fraction == 0.0 and c.flip_fraction == 0.0

    def test_zero_lr_parameters_unchanged(self):
        cfg = PpoConfig.for_env("cartpole", 0.0, seed=2, total_steps=2048)
        t = Trainer("cartpole", cfg)
        before = [p.copy() for p in t.agent.actor.params() + t.agent.critic.params()]
        for _ in range(2):
            diag = t.update(*t.collect())
            assert diag.approx_kl == 0.0 and diag.clip_fraction == 0.0
        after = t.agent.actor.params() + t.agent.critic.params()
        assert all(np.array_equal(a, b) for a, b in zip(before, after))

    def test_gridroom_runs(self):
        cfg = PpoConfig.for_env("gridroom", 1e-3, seed=0, total_steps=4 * 512)
        rec = train_run("gridroom", cfg)
        assert len(rec.checkpoints) == 100 and not rec.diverged

    def test_divergence_is_recorded(self):
        cfg = PpoConfig.for_env("cartpole", 1e300, seed=0, total_steps=4 * 1024)
        rec = train_run("cartpole", cfg)
        assert rec.diverged and rec.final_return is None

    def test_return_missing_before_first_episode(self):
        t = Trainer("cartpole", PpoConfig.for_env("cartpole", 1e-3))
        assert t.recent_return() is None
