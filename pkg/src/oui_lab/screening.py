"""Early screening of training runs from their 10% checkpoint.

Rules select runs from early features; each threshold setting is scored by
precision and recall over the "success" runs (top 20% final return per
environment). Settings are compared within recall bins, subject to a minimum
selected-set size, and each gets a one-sided hypergeometric enrichment p-value
with Benjamini-Hochberg q-values over every candidate setting.
"""
from __future__ import annotations

import csv
import itertools
import json
import math
from dataclasses import dataclass, field
from fractions import Fraction
from functools import lru_cache

import numpy as np

from oui_lab.ppo_engine import EARLY_FRACTION

RULE_KINDS = (
    "return_only",
    "oui",
    "kl",
    "clip",
    "divergence",
    "flip",
    "return+oui",
    "return+kl",
    "return+clip",
    "return+divergence",
    "return+flip",
)
RULE_LABELS = {
    "return_only": "Ret.",
    "oui": "OUI",
    "kl": "KL",
    "clip": "Clip",
    "divergence": "Div.",
    "flip": "Flip",
    "return+oui": "Ret.+OUI",
    "return+kl": "Ret.+KL",
    "return+clip": "Ret.+Clip",
    "return+divergence": "Ret.+Div.",
    "return+flip": "Ret.+Flip",
}
FAMILY_FACTORS = {
    "return_only": ("return",),
    "oui": ("actor", "critic_band"),
    "kl": ("kl",),
    "clip": ("clip",),
    "divergence": ("kl", "clip"),
    "flip": ("flip",),
    "return+oui": ("return", "actor", "critic_band"),
    "return+kl": ("return", "kl"),
    "return+clip": ("return", "clip"),
    "return+divergence": ("return", "kl", "clip"),
    "return+flip": ("return", "flip"),
}
BIN_WIDTH_PCT = 5
TABLE_BINS = 6  # (0, 0.05] ... (0.25, 0.30]
FULL_BINS = 20  # (0, 0.05] ... (0.95, 1.00]
CRITIC_LATTICE = 20


@dataclass
class EarlyFeatures:
    run_id: str
    env_id: str
    seed: int
    diverged: bool
    final_return: float | None
    early_return: float | None
    early_return_lso_percentile: float | None
    oui_actor_10: float | None
    oui_critic_10: float | None
    kl_10: float | None
    clip_10: float | None
    flip_10: float | None


@dataclass
class ScreeningRule:
    kind: str
    thresholds: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in RULE_KINDS:
            raise ValueError(f"unknown rule kind {self.kind!r}")


@dataclass
class RuleEvaluation:
    kind: str
    thresholds: dict
    n_q: int
    n_hit: int
    n_success: int
    p_value: float = math.nan
    q_value: float = math.nan

    @property
    def precision(self) -> float:
        return self.n_hit / self.n_q

    @property
    def recall(self) -> float:
        return self.n_hit / self.n_success if self.n_success else 0.0


# ---------------------------------------------------------------- labels and features


def label_success(records, top_fraction: float = 0.2) -> set[str]:
    """Top ``ceil(top_fraction * N_env)`` runs by final return, per environment.

    Diverged runs and runs without a final return are never successes; ties are
    broken by ascending run_id.
    """
    by_env: dict[str, list] = {}
    for r in records:
        by_env.setdefault(r.env_id, []).append(r)
    out = set()
    for runs in by_env.values():
        quota = math.ceil(top_fraction * len(runs) - 1e-12)
        eligible = [r for r in runs if not r.diverged and r.final_return is not None]
        eligible.sort(key=lambda r: (-r.final_return, r.run_id))
        out.update(r.run_id for r in eligible[:quota])
    return out


def leave_seed_out_percentile(values_by_seed: dict, target_seed, value) -> float | None:
    """Mid-rank percentile of ``value`` among the values of every other seed."""
    if value is None or len(values_by_seed) < 2:
        return None
    others = [v for s, vals in values_by_seed.items() if s != target_seed for v in vals if v is not None]
    if not others:
        return None
    below = sum(1 for v in others if v < value)
    equal = sum(1 for v in others if v == value)
    return (below + 0.5 * equal) / len(others)


def extract_features(records, at_fraction: float = EARLY_FRACTION) -> list[EarlyFeatures]:
    early = {}
    for r in records:
        cp = r.checkpoint_at(at_fraction)
        early[r.run_id] = cp
    by_env_seed: dict[str, dict] = {}
    for r in records:
        cp = early[r.run_id]
        by_env_seed.setdefault(r.env_id, {}).setdefault(r.seed, []).append(
            None if cp is None else cp.return_ma50
        )
    feats = []
    for r in records:
        cp = early[r.run_id]
        ret = None if cp is None else cp.return_ma50
        feats.append(
            EarlyFeatures(
                r.run_id,
                r.env_id,
                r.seed,
                r.diverged,
                r.final_return,
                ret,
                leave_seed_out_percentile(by_env_seed[r.env_id], r.seed, ret),
                None if cp is None else cp.oui_actor,
                None if cp is None else cp.oui_critic,
                None if cp is None else cp.approx_kl,
                None if cp is None else cp.clip_fraction,
                None if cp is None else cp.flip_fraction,
            )
        )
    return feats


# ---------------------------------------------------------------- rule predicates


def _column(features, name) -> tuple[np.ndarray, np.ndarray]:
    attr = {
        "return": "early_return_lso_percentile",
        "actor": "oui_actor_10",
        "critic": "oui_critic_10",
        "kl": "kl_10",
        "clip": "clip_10",
        "flip": "flip_10",
    }[name]
    raw = [getattr(f, attr) for f in features]
    present = np.array([v is not None and math.isfinite(v) for v in raw])
    values = np.array([v if p else 0.0 for v, p in zip(raw, present)], dtype=np.float64)
    return values, present


def _predicate(features, factor: str, thr) -> np.ndarray:
    if factor == "critic_band":
        v, ok = _column(features, "critic")
        lo, hi = thr
        return ok & (v >= lo) & (v <= hi)
    v, ok = _column(features, factor)
    if factor in ("return", "actor"):
        return ok & (v >= thr)
    return ok & (v <= thr)


def _rule_settings(kind: str, thresholds: dict) -> list:
    out = []
    for factor in FAMILY_FACTORS[kind]:
        if factor == "critic_band":
            out.append((thresholds["critic_low"], thresholds["critic_high"]))
        else:
            out.append(thresholds[factor])
    return out


def apply_rule(rule: ScreeningRule, features) -> set[str]:
    mask = np.ones(len(features), dtype=bool)
    for factor, thr in zip(FAMILY_FACTORS[rule.kind], _rule_settings(rule.kind, rule.thresholds)):
        mask &= _predicate(features, factor, thr)
    return {f.run_id for f, m in zip(features, mask) if m}


def _thresholds_dict(kind: str, values) -> dict:
    out = {}
    for factor, v in zip(FAMILY_FACTORS[kind], values):
        if factor == "critic_band":
            out["critic_low"], out["critic_high"] = float(v[0]), float(v[1])
        else:
            out[factor] = float(v)
    return out


# ---------------------------------------------------------------- threshold grids


def critic_lattice(values: np.ndarray, n: int = CRITIC_LATTICE) -> np.ndarray:
    """Observed-value quantiles at k/n, k = 0..n (inverted-CDF, so every level is a real value)."""
    if values.size == 0:
        return values
    return np.unique(np.quantile(values, np.linspace(0.0, 1.0, n + 1), method="inverted_cdf"))


def factor_grid(features, factor: str) -> tuple[list, np.ndarray]:
    """(threshold values, selection matrix of shape settings x runs) for one factor."""
    if factor == "critic_band":
        v, ok = _column(features, "critic")
        levels = critic_lattice(v[ok])
        pairs = [(lo, hi) for i, lo in enumerate(levels) for hi in levels[i:]]
        if not pairs:
            return [], np.zeros((0, len(features)), dtype=bool)
        lo = np.array([p[0] for p in pairs])[:, None]
        hi = np.array([p[1] for p in pairs])[:, None]
        return pairs, ok[None, :] & (v[None, :] >= lo) & (v[None, :] <= hi)
    v, ok = _column(features, factor)
    levels = np.unique(v[ok])
    if factor in ("return", "actor"):
        sel = ok[None, :] & (v[None, :] >= levels[:, None])
    else:
        sel = ok[None, :] & (v[None, :] <= levels[:, None])
    return list(levels), sel


def _family_chunks(kind: str, features, success: np.ndarray):
    """Yield (index tuples, n_q, n_hit) arrays covering every threshold setting of ``kind``.

    Settings are enumerated in lexicographic order of the factor grids.
    """
    grids = [factor_grid(features, f) for f in FAMILY_FACTORS[kind]]
    mats = [g[1].astype(np.float64) for g in grids]
    sizes = [m.shape[0] for m in mats]
    if any(s == 0 for s in sizes):
        return grids
    w = success.astype(np.float64)
    if len(mats) == 1:
        idx = np.arange(sizes[0])
        yield (idx,), mats[0].sum(axis=1).astype(np.int64), (mats[0] @ w).astype(np.int64)
        return grids
    # fix leading factors one setting at a time, contract the last two by matmul
    lead = mats[:-2]
    a, b = mats[-2], mats[-1]
    ia, ib = np.meshgrid(np.arange(sizes[-2]), np.arange(sizes[-1]), indexing="ij")
    for combo in itertools.product(*[range(s) for s in sizes[:-2]]):
        row = np.ones(len(features))
        for m, i in zip(lead, combo):
            row = row * m[i]
        n_q = ((a * row) @ b.T).astype(np.int64)
        hit = ((a * (row * w)) @ b.T).astype(np.int64)
        prefix = tuple(np.full(ia.size, i) for i in combo)
        yield prefix + (ia.ravel(), ib.ravel()), n_q.ravel(), hit.ravel()
    return grids


def sweep_thresholds(kind: str, features, successes) -> list[RuleEvaluation]:
    """Every threshold setting of one rule family with a non-empty selection."""
    success = np.array([f.run_id in successes for f in features])
    n_success = int(success.sum())
    grids = [factor_grid(features, f)[0] for f in FAMILY_FACTORS[kind]]
    out = []
    for idx, n_q, hit in _family_chunks(kind, features, success):
        for j in np.flatnonzero(n_q > 0):
            values = [grids[d][idx[d][j]] for d in range(len(grids))]
            out.append(RuleEvaluation(kind, _thresholds_dict(kind, values), int(n_q[j]), int(hit[j]), n_success))
    return out


# ---------------------------------------------------------------- statistics


@lru_cache(maxsize=None)
def enrichment_pvalue_exact(N: int, K: int, n: int, k: int) -> Fraction:
    if not (0 <= k <= min(n, K) and max(n, K) <= N and min(N, K, n, k) >= 0):
        raise ValueError(f"inconsistent counts N={N} K={K} n={n} k={k}")
    total = math.comb(N, n)
    tail = sum(math.comb(K, x) * math.comb(N - K, n - x) for x in range(k, min(n, K) + 1))
    return Fraction(tail, total)


def enrichment_pvalue(N: int, K: int, n: int, k: int) -> float:
    """One-sided hypergeometric tail P(X >= k): n drawn from N containing K successes."""
    return float(enrichment_pvalue_exact(N, K, n, k))


def bh_fdr(p_values) -> np.ndarray:
    p = np.asarray(p_values, dtype=np.float64)
    if p.size == 0:
        return p.copy()
    if np.any((p < 0) | (p > 1)) or np.any(np.isnan(p)):
        raise ValueError("p-values must lie in [0, 1]")
    m = p.size
    order = np.argsort(p, kind="stable")
    scaled = p[order] * m / np.arange(1, m + 1)
    q_sorted = np.minimum.accumulate(scaled[::-1])[::-1]
    q = np.empty(m)
    q[order] = np.minimum(q_sorted, 1.0)
    return q


def bh_fdr_grouped(p_values, multiplicities) -> np.ndarray:
    """BH q-values for distinct p-values each occurring ``multiplicities[i]`` times.

    Equal to expanding every p-value by its multiplicity and calling
    :func:`bh_fdr`; tied p-values share one q-value.
    """
    p = np.asarray(p_values, dtype=np.float64)
    mult = np.asarray(multiplicities, dtype=np.int64)
    if p.size == 0:
        return p.copy()
    order = np.argsort(p, kind="stable")
    ps, ms = p[order], mult[order]
    # merge equal p-values so each group is ranked by its last member
    uniq, start = np.unique(ps, return_index=True)
    counts = np.add.reduceat(ms, start)
    m = int(counts.sum())
    last_rank = np.cumsum(counts)
    scaled = uniq * m / last_rank
    q_u = np.minimum(np.minimum.accumulate(scaled[::-1])[::-1], 1.0)
    q_sorted = q_u[np.searchsorted(uniq, ps)]
    q = np.empty(p.size)
    q[order] = q_sorted
    return q


# ---------------------------------------------------------------- recall matching


def recall_bin(n_hit: int, n_success: int) -> int | None:
    """Index i of the recall bin (0.05 i, 0.05 (i + 1)], computed in exact integers."""
    if n_hit <= 0 or n_success <= 0:
        return None
    return -(-100 * n_hit // (BIN_WIDTH_PCT * n_success)) - 1


def bin_label(i: int) -> str:
    return f"({i * BIN_WIDTH_PCT / 100:.2f},{(i + 1) * BIN_WIDTH_PCT / 100:.2f}]"


@dataclass
class FamilySummary:
    """Distinct (n_q, n_hit) outcomes of a family with multiplicity and first setting."""

    kind: str
    outcomes: dict = field(default_factory=dict)  # (n_q, n_hit) -> [multiplicity, thresholds]


@dataclass
class RecallBinTable:
    n_bins: int
    min_support: int
    n_runs: int
    n_success: int
    n_candidates: int
    cells: dict = field(default_factory=dict)  # (bin, kind) -> RuleEvaluation

    def best_per_bin(self) -> dict:
        best = {}
        for (b, kind), ev in self.cells.items():
            best[b] = max(best.get(b, 0.0), ev.precision)
        return {b: {k for (bb, k), ev in self.cells.items() if bb == b and ev.precision == v} for b, v in best.items()}

    def cell(self, b: int, kind: str) -> RuleEvaluation | None:
        return self.cells.get((b, kind))


def evaluate_families(features, successes, kinds=RULE_KINDS) -> list[FamilySummary]:
    success = np.array([f.run_id in successes for f in features])
    n_runs = len(features)
    summaries = []
    for kind in kinds:
        grids = [factor_grid(features, f)[0] for f in FAMILY_FACTORS[kind]]
        summary = FamilySummary(kind)
        for idx, n_q, hit in _family_chunks(kind, features, success):
            keep = n_q > 0
            if not keep.any():
                continue
            codes = n_q[keep] * (n_runs + 1) + hit[keep]
            uniq, first, counts = np.unique(codes, return_index=True, return_counts=True)
            kept = np.flatnonzero(keep)
            for code, f0, c in zip(uniq, first, counts):
                key = (int(code // (n_runs + 1)), int(code % (n_runs + 1)))
                entry = summary.outcomes.get(key)
                if entry is None:
                    j = kept[f0]
                    values = [grids[d][idx[d][j]] for d in range(len(grids))]
                    summary.outcomes[key] = [int(c), _thresholds_dict(kind, values)]
                else:
                    entry[0] += int(c)
        summaries.append(summary)
    return summaries


def recall_match(summaries, n_runs: int, n_success: int, min_support: int = 10, n_bins: int = TABLE_BINS) -> RecallBinTable:
    """Best-precision setting per (recall bin, family) among settings with n_q >= min_support.

    p-values and BH q-values are computed over every candidate setting of every
    family (all non-empty selections), before the support filter.
    """
    keys, mults = [], []
    for s in summaries:
        for (n_q, hit), (mult, _) in s.outcomes.items():
            keys.append((n_q, hit))
            mults.append(mult)
    p_by_key = {key: enrichment_pvalue(n_runs, n_success, *key) for key in set(keys)}
    p_list = [p_by_key[k] for k in keys]
    q_list = bh_fdr_grouped(p_list, mults) if keys else []
    q_by_key = dict(zip(keys, (float(q) for q in q_list)))
    table = RecallBinTable(n_bins, min_support, n_runs, n_success, int(sum(mults)))
    for s in summaries:
        for (n_q, hit), (_, thresholds) in s.outcomes.items():
            if n_q < min_support:
                continue
            b = recall_bin(hit, n_success)
            if b is None or b >= n_bins:
                continue
            ev = RuleEvaluation(s.kind, thresholds, n_q, hit, n_success, p_by_key[(n_q, hit)], q_by_key[(n_q, hit)])
            cur = table.cells.get((b, s.kind))
            # exact comparison of hit/n_q, then more hits
            if cur is None or (hit * cur.n_q, hit) > (cur.n_hit * n_q, cur.n_hit):
                table.cells[(b, s.kind)] = ev
    return table


def screen(features, min_support: int = 10, n_bins: int = TABLE_BINS, top_fraction: float = 0.2,
           kinds=RULE_KINDS) -> RecallBinTable:
    """Full pipeline: labels, threshold sweeps, recall binning and the support filter."""
    successes = label_success(features, top_fraction)
    summaries = evaluate_families(features, successes, kinds)
    return recall_match(summaries, len(features), len(successes), min_support, n_bins)


# ---------------------------------------------------------------- output

REPORT_NOTES = (
    "Success: top 20% of final return within each environment; recall pooled over the corpus.",
    "p: one-sided hypergeometric enrichment of successes in the selected set; "
    "q: Benjamini-Hochberg over every candidate threshold setting of every rule family.",
    "GridRoom runs (if present) use a symbolic egocentric observation in place of RGB MiniGrid.",
)


def write_table_csv(table: RecallBinTable, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["bin", "rule", "precision", "recall", "n_q", "p", "q", "thresholds"])
        for b in range(table.n_bins):
            for kind in RULE_KINDS:
                ev = table.cell(b, kind)
                if ev is None:
                    continue
                w.writerow(
                    [
                        bin_label(b),
                        kind,
                        repr(ev.precision),
                        repr(ev.recall),
                        ev.n_q,
                        repr(ev.p_value),
                        repr(ev.q_value),
                        json.dumps(ev.thresholds, sort_keys=True),
                    ]
                )


def render_markdown(table: RecallBinTable, title: str = "Recall-matched early screening") -> str:
    best = table.best_per_bin()
    lines = [
        f"# {title}",
        "",
        f"Runs: {table.n_runs}, successes: {table.n_success}, candidate settings: {table.n_candidates}, "
        f"min n_q: {table.min_support}. Cells: precision / recall / n_q; best precision per bin in bold.",
        "",
        "| Recall bin | " + " | ".join(RULE_LABELS[k] for k in RULE_KINDS) + " |",
        "|---|" + "---|" * len(RULE_KINDS),
    ]
    for b in range(table.n_bins):
        cells = []
        for kind in RULE_KINDS:
            ev = table.cell(b, kind)
            if ev is None:
                cells.append("-")
                continue
            prec = f"{ev.precision:.2f}"
            if kind in best.get(b, ()):
                prec = f"**{prec}**"
            cells.append(f"{prec} / {ev.recall:.2f} / {ev.n_q}")
        lines.append(f"| {bin_label(b)} | " + " | ".join(cells) + " |")
    lines.append("")
    lines.extend(f"- {n}" for n in REPORT_NOTES)
    return "\n".join(lines) + "\n"
