"""Pure numpy/Python implementations of the hot kernels.

Signatures mirror the compiled ``_ckernels`` module one for one; the selector
in :mod:`oui_lab.kernels` picks whichever is importable.
"""
from __future__ import annotations

import math

import numpy as np

GRAVITY = 9.8
MASSCART = 1.0
MASSPOLE = 0.1
TOTAL_MASS = MASSCART + MASSPOLE
LENGTH = 0.5
POLEMASS_LENGTH = MASSPOLE * LENGTH
FORCE_MAG = 10.0
TAU = 0.02


def cartpole_step(x, x_dot, theta, theta_dot, action):
    force = FORCE_MAG if action == 1 else -FORCE_MAG
    costheta = math.cos(theta)
    sintheta = math.sin(theta)
    temp = (force + POLEMASS_LENGTH * theta_dot * theta_dot * sintheta) / TOTAL_MASS
    thetaacc = (GRAVITY * sintheta - costheta * temp) / (
        LENGTH * (4.0 / 3.0 - MASSPOLE * costheta * costheta / TOTAL_MASS)
    )
    xacc = temp - POLEMASS_LENGTH * thetaacc * costheta / TOTAL_MASS
    return (
        x + TAU * x_dot,
        x_dot + TAU * xacc,
        theta + TAU * theta_dot,
        theta_dot + TAU * thetaacc,
    )


class DenseStack:
    """Frozen copy of a ReLU MLP for single-observation inference."""

    def __init__(self, weights, biases):
        self.weights = [np.ascontiguousarray(w, dtype=np.float64) for w in weights]
        self.biases = [np.ascontiguousarray(b, dtype=np.float64) for b in biases]

    def forward_one(self, obs):
        h = np.asarray(obs, dtype=np.float64)
        last = len(self.weights) - 1
        for i, (w, b) in enumerate(zip(self.weights, self.biases)):
            h = w @ h + b
            if i < last:
                h = np.maximum(h, 0.0)
        return h

    def sample(self, obs, u):
        """Inverse-CDF draw from softmax(logits) using the uniform ``u``."""
        logits = self.forward_one(obs)
        z = np.exp(logits - logits.max())
        total = z.sum()
        acc = 0.0
        n = z.shape[0]
        for a in range(n - 1):
            acc += z[a] / total
            if u < acc:
                return a
        return n - 1


def gae(rewards, values, next_values, terminated, truncated, gamma, lam):
    n = rewards.shape[0]
    adv = np.zeros(n, dtype=np.float64)
    last = 0.0
    for t in range(n - 1, -1, -1):
        nonterm = 0.0 if terminated[t] else 1.0
        cont = 0.0 if (terminated[t] or truncated[t]) else 1.0
        delta = rewards[t] + gamma * next_values[t] * nonterm - values[t]
        last = delta + gamma * lam * cont * last
        adv[t] = last
    return adv


def column_counts(mask):
    return np.count_nonzero(mask, axis=0).astype(np.int64)


def transition_counts(prev, curr):
    prev = prev.astype(bool, copy=False)
    curr = curr.astype(bool, copy=False)
    n_mp = np.count_nonzero(~prev & curr, axis=0).astype(np.int64)
    n_pm = np.count_nonzero(prev & ~curr, axis=0).astype(np.int64)
    return n_mp, n_pm
