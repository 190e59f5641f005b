"""Independent reference implementations used by the tests.

Everything here is written the slow, obvious way (explicit loops, Python ints,
exhaustive enumeration) and shares no code with the package beyond data types.
"""
from __future__ import annotations

import itertools
import math
from collections import deque
from fractions import Fraction
from functools import lru_cache

import numpy as np


# ---------------------------------------------------------------- gradients


def fd_gradients(loss, params, h=1e-5):
    """Central finite differences of ``loss(params)`` for every coordinate."""
    grads = []
    for p in params:
        g = np.zeros_like(p)
        for idx in np.ndindex(p.shape):
            old = p[idx]
            p[idx] = old + h
            up = loss(params)
            p[idx] = old - h
            down = loss(params)
            p[idx] = old
            g[idx] = (up - down) / (2 * h)
        grads.append(g)
    return grads


def relu_mlp_loss(weights, biases, x, out_weights):
    """sum(out_weights * f(x)) for a ReLU MLP, evaluated sample by sample."""
    total = 0.0
    for b in range(x.shape[0]):
        h = list(x[b])
        for i, (w, bias) in enumerate(zip(weights, biases)):
            a = [sum(w[r, c] * h[c] for c in range(len(h))) + bias[r] for r in range(w.shape[0])]
            h = a if i == len(weights) - 1 else [max(v, 0.0) for v in a]
        total += sum(ow * v for ow, v in zip(out_weights[b], h))
    return total


# ---------------------------------------------------------------- advantages


def gae_bruteforce(rewards, values, terminal_value, terminated, gamma, lam):
    """Advantages of one episode by the explicit discounted sum of TD errors.

    ``terminal_value`` is the value after the last step; it is ignored when the
    episode terminated.
    """
    T = len(rewards)
    nxt = [values[t + 1] if t + 1 < T else (0.0 if terminated else terminal_value) for t in range(T)]
    deltas = [rewards[t] + gamma * nxt[t] - values[t] for t in range(T)]
    adv = []
    for t in range(T):
        acc = 0.0
        for k in range(t, T):
            acc += (gamma * lam) ** (k - t) * deltas[k]
        adv.append(acc)
    return adv


# ---------------------------------------------------------------- grid search


def bfs_shortest_actions(start_state, step_fn, is_goal, n_actions, max_depth=200):
    """Shortest action sequence from ``start_state`` (hashable) to a goal state."""
    queue = deque([(start_state, [])])
    seen = {start_state}
    while queue:
        state, path = queue.popleft()
        if len(path) > max_depth:
            break
        for a in range(n_actions):
            nxt = step_fn(state, a)
            if is_goal(nxt):
                return path + [a]
            if nxt not in seen:
                seen.add(nxt)
                queue.append((nxt, path + [a]))
    return None


# ---------------------------------------------------------------- screening


@lru_cache(maxsize=None)
def hypergeom_tail_enumerated(N, K, n, k):
    """P(X >= k) by enumerating every size-n subset of N items whose first K are successes."""
    total = hits = 0
    for subset in itertools.combinations(range(N), n):
        total += 1
        if sum(1 for i in subset if i < K) >= k:
            hits += 1
    return Fraction(hits, total)


def bh_reference(p):
    m = len(p)
    order = sorted(range(m), key=lambda i: p[i])
    q = [0.0] * m
    for rank_i, i in enumerate(order, start=1):
        q[i] = min(min(p[order[j - 1]] * m / j for j in range(rank_i, m + 1)), 1.0)
    return q


def oracle_successes(runs, top_fraction=0.2):
    out = set()
    for env in {r["env"] for r in runs}:
        group = [r for r in runs if r["env"] == env]
        quota = math.ceil(Fraction(top_fraction).limit_denominator(1000) * len(group))
        ok = [r for r in group if not r["diverged"] and r["final"] is not None]
        ok.sort(key=lambda r: r["run_id"])
        ok.sort(key=lambda r: r["final"], reverse=True)
        out.update(r["run_id"] for r in ok[:quota])
    return out


def oracle_lso(runs):
    out = {}
    for r in runs:
        others = [o["ret"] for o in runs if o["env"] == r["env"] and o["seed"] != r["seed"] and o["ret"] is not None]
        if r["ret"] is None or not others or len({o["seed"] for o in runs if o["env"] == r["env"]}) < 2:
            out[r["run_id"]] = None
            continue
        below = sum(1 for v in others if v < r["ret"])
        eq = sum(1 for v in others if v == r["ret"])
        out[r["run_id"]] = Fraction(2 * below + eq, 2 * len(others))
    return out


ORACLE_FAMILIES = {
    "return_only": ["ret"],
    "oui": ["actor", "band"],
    "kl": ["kl"],
    "clip": ["clip"],
    "divergence": ["kl", "clip"],
    "flip": ["flip"],
    "return+oui": ["ret", "actor", "band"],
    "return+kl": ["ret", "kl"],
    "return+clip": ["ret", "clip"],
    "return+divergence": ["ret", "kl", "clip"],
    "return+flip": ["ret", "flip"],
}


def _factor_selections(runs, lso, factor):
    """Every distinct selection set (as a frozenset) reachable by one factor's thresholds."""
    if factor == "ret":
        vals = {r["run_id"]: lso[r["run_id"]] for r in runs}
        cuts = sorted({v for v in vals.values() if v is not None})
        return [frozenset(i for i, v in vals.items() if v is not None and v >= c) for c in cuts]
    if factor == "band":
        vals = {r["run_id"]: r["critic"] for r in runs}
        cuts = sorted({v for v in vals.values() if v is not None})
        return [
            frozenset(i for i, v in vals.items() if v is not None and lo <= v <= hi)
            for a, lo in enumerate(cuts)
            for hi in cuts[a:]
        ]
    vals = {r["run_id"]: r[factor] for r in runs}
    cuts = sorted({v for v in vals.values() if v is not None})
    if factor == "actor":
        return [frozenset(i for i, v in vals.items() if v is not None and v >= c) for c in cuts]
    return [frozenset(i for i, v in vals.items() if v is not None and v <= c) for c in cuts]


def oracle_table(runs, min_support, n_bins, top_fraction=0.2):
    """{(bin, family): (n_q, hits, p)} by exhaustive enumeration of threshold placements."""
    succ = oracle_successes(runs, top_fraction)
    lso = oracle_lso(runs)
    N, K = len(runs), len(succ)
    table = {}
    for fam, factors in ORACLE_FAMILIES.items():
        options = [_factor_selections(runs, lso, f) for f in factors]
        for combo in itertools.product(*options):
            sel = frozenset.intersection(*combo)
            n_q = len(sel)
            if n_q == 0 or n_q < min_support:
                continue
            hits = len(sel & succ)
            if hits == 0:
                continue
            recall = Fraction(hits, K)
            b = None
            for i in range(n_bins):
                if Fraction(i, 20) < recall <= Fraction(i + 1, 20):
                    b = i
            if b is None:
                continue
            prec = Fraction(hits, n_q)
            cur = table.get((b, fam))
            if cur is None or (prec, hits) > (Fraction(cur[1], cur[0]), cur[1]):
                table[(b, fam)] = (n_q, hits)
    return {key: (n, k, hypergeom_tail_enumerated(N, K, n, k)) for key, (n, k) in table.items()}


# ---------------------------------------------------------------- random corpora


def random_corpus(rng, max_runs=12):
    """Small run corpus as (oracle dicts, RunRecords) with ties, gaps and divergence."""
    from oui_lab.records import CheckpointMetrics, RunRecord

    n = int(rng.integers(1, max_runs + 1))
    envs_ = ["cartpole"] if rng.random() < 0.7 else ["cartpole", "gridroom"]
    grid = lambda k: [round(0.1 * v, 1) for v in range(k)]  # noqa: E731
    runs, records = [], []
    for i in range(n):
        env = envs_[int(rng.integers(len(envs_)))]
        seed = int(rng.integers(0, 4))
        diverged = bool(rng.random() < 0.15)
        early_missing = diverged and rng.random() < 0.5
        final = None if diverged else float(rng.choice([10.0, 20.0, 30.0, 40.0, 50.0]))
        if early_missing:
            feats = dict(ret=None, actor=None, critic=None, kl=None, clip=None, flip=None)
        else:
            feats = dict(
                ret=None if rng.random() < 0.1 else float(rng.choice(grid(6))),
                actor=float(rng.choice(grid(6))),
                critic=float(rng.choice(grid(8))),
                kl=float(rng.choice(grid(5))),
                clip=float(rng.choice(grid(5))),
                flip=float(rng.choice(grid(5))),
            )
        run_id = f"r{i:02d}-{int(rng.integers(1000)):03d}"
        runs.append(dict(run_id=run_id, env=env, seed=seed, diverged=diverged, final=final, **feats))
        cps = []
        if not early_missing:
            cps.append(
                CheckpointMetrics(
                    0.1, feats["ret"], feats["actor"], feats["critic"], feats["kl"], feats["clip"], feats["flip"]
                )
            )
        records.append(RunRecord(run_id, env, 1e-3, seed, diverged, cps, final))
    return runs, records
