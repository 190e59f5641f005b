"""Numerical bench for the learning-rate / flip / OUI relations.

Three checks live here:

* flip probability of a hidden unit under ``theta - eta * g`` grows linearly
  in ``eta`` (Monte Carlo over sampled directions, OLS fit);
* the positivity count of a unit obeys ``s+ = s + N(-+) - N(+-)`` exactly;
* the first-order OUI change ``-(2/d) * sum sgn(p - 1/2) * dp`` tracks the
  exact change, with a remainder that shrinks faster than ``eta``.
"""
from __future__ import annotations

import csv
import json
import math
import warnings
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from oui_lab import kernels
from oui_lab.nn_core import Network, backprop_deltas, forward, unflatten
from oui_lab.oui_metrics import ActivationMask, oui_from_counts

FLIP_GUARD = 0.2
KINK_TOL = 1e-9


class AccountingError(AssertionError):
    """The positivity-count identity failed; indicates corrupted masks or counts."""


# ---------------------------------------------------------------- drift accounting


@dataclass
class DriftDecomposition:
    n_minus_plus: np.ndarray
    n_plus_minus: np.ndarray
    delta_p: np.ndarray
    delta_oui_exact: float
    delta_oui_first_order: float

    @property
    def residual(self) -> float:
        return self.delta_oui_exact - self.delta_oui_first_order


def drift_decomposition(mask_prev, mask_curr, p_prev=None) -> DriftDecomposition:
    prev = np.asarray(mask_prev, dtype=bool)
    curr = np.asarray(mask_curr, dtype=bool)
    if prev.shape != curr.shape or prev.ndim != 2:
        raise ValueError("mask layers must be B x d matrices of equal shape")
    b, d = prev.shape
    s_prev = kernels.column_counts(prev)
    if p_prev is not None and not np.allclose(np.asarray(p_prev, dtype=np.float64) * b, s_prev, rtol=0, atol=1e-9):
        raise ValueError("p_prev is inconsistent with mask_prev")
    s_curr = kernels.column_counts(curr)
    n_mp, n_pm = kernels.transition_counts(prev, curr)
    if not np.array_equal(s_curr, s_prev + n_mp - n_pm):
        bad = np.flatnonzero(s_curr != s_prev + n_mp - n_pm)
        raise AccountingError(f"s+ != s + N(-+) - N(+-) for units {bad[:10].tolist()}")
    delta_p = (n_mp - n_pm) / b
    p = s_prev / b
    exact = oui_from_counts(s_curr, b) - oui_from_counts(s_prev, b)
    # count-form OUI is the balance form scaled by B / (2 floor(B/2)); 1 for even B
    scale = b / (2 * (b // 2))
    first = float(-2.0 / d * np.sum(np.sign(p - 0.5) * delta_p)) * scale
    return DriftDecomposition(n_mp, n_pm, delta_p, exact, first)


def branch_drift(prev: ActivationMask, curr: ActivationMask) -> list[DriftDecomposition]:
    if len(prev.layers) != len(curr.layers):
        raise ValueError("masks have different layer counts")
    return [drift_decomposition(a, b) for a, b in zip(prev.layers, curr.layers)]


# ---------------------------------------------------------------- directional derivative


def _as_param_list(net: Network, g) -> list[np.ndarray]:
    params = net.params()
    if isinstance(g, np.ndarray) and g.ndim == 1:
        return unflatten(g, params)
    g = list(g)
    if len(g) != len(params) or any(a.shape != p.shape for a, p in zip(g, params)):
        raise ValueError("direction does not have the network's parameter shapes")
    return g


def directional_derivative(net: Network, probe, g, layer: int, neuron: int) -> np.ndarray:
    """U_b = -<grad_theta X_b, g> for hidden unit ``neuron`` of hidden ``layer``.

    Per-sample reverse mode: the preactivation of one unit depends only on its
    own input row, so a batched backprop seeded with the unit vector yields
    per-sample deltas, which are contracted with ``g`` layer by layer.
    """
    x = probe.observations if hasattr(probe, "observations") else np.asarray(probe, dtype=np.float64)
    g = _as_param_list(net, g)
    trace = forward(net, x)
    seed = np.zeros_like(trace.preactivations[layer])
    seed[:, neuron] = 1.0
    deltas = backprop_deltas(net, trace, seed, layer)
    u = np.zeros(x.shape[0])
    for i in range(layer + 1):
        g_w, g_b = g[2 * i], g[2 * i + 1]
        u += np.sum((deltas[i] @ g_w) * trace.activations(i), axis=1) + deltas[i] @ g_b
    return -u


# ---------------------------------------------------------------- flip-rate bench


def gaussian_directions(scale: float = 1.0) -> Callable:
    """Isotropic directions with i.i.d. N(0, scale^2) coordinates."""

    def sample(rng, net):
        return [scale * rng.standard_normal(p.shape) for p in net.params()]

    return sample


def fixed_direction(g) -> Callable:
    def sample(rng, net):
        return g

    return sample


def signed_bias_direction(u: float, layer: int = 0, neuron: int = 0) -> Callable:
    """Direction acting only on one hidden bias, with magnitude ``u`` and random sign."""

    def sample(rng, net):
        out = [np.zeros_like(p) for p in net.params()]
        out[2 * layer + 1][neuron] = u if rng.random() < 0.5 else -u
        return out

    return sample


@dataclass
class FlipExperiment:
    net: Network
    probe: object  # array / ProbeBatch, or callable(rng) -> array resampled per trial
    direction_sampler: Callable
    eta_grid: list
    trials: int = 1000
    seed: int = 0
    layers: list | None = None

    def __post_init__(self):
        eta = np.asarray(self.eta_grid, dtype=np.float64)
        if eta.ndim != 1 or eta.size < 1 or np.any(eta <= 0) or np.any(np.diff(eta) <= 0):
            raise ValueError("eta_grid must be strictly increasing positive values")
        if self.trials < 1:
            raise ValueError("trials must be >= 1")
        self.eta_grid = eta


@dataclass
class FlipRateCurve:
    eta: np.ndarray
    mean_flip_prob: np.ndarray
    std_err: np.ndarray
    fit_slope: float
    fit_intercept: float
    r_squared: float
    intercept_stderr: float = math.nan
    slope_stderr: float = math.nan
    guard_violated: bool = False

    @property
    def relative_intercept(self) -> float:
        return abs(self.fit_intercept) / (self.fit_slope * float(self.eta[-1]))

    def fit_summary(self) -> dict:
        return {
            "slope": self.fit_slope,
            "intercept": self.fit_intercept,
            "r_squared": self.r_squared,
            "intercept_stderr": self.intercept_stderr,
            "slope_stderr": self.slope_stderr,
            "relative_intercept": self.relative_intercept,
            "guard_violated": self.guard_violated,
        }


def ols_fit(x, y) -> tuple[float, float, float, float, float]:
    """(slope, intercept, r_squared, slope_stderr, intercept_stderr)."""
    x = np.asarray(x, dtype=np.float64)
    y = np.asarray(y, dtype=np.float64)
    n = x.size
    xm, ym = x.mean(), y.mean()
    sxx = float(np.sum((x - xm) ** 2))
    slope = float(np.sum((x - xm) * (y - ym)) / sxx)
    intercept = float(ym - slope * xm)
    resid = y - (slope * x + intercept)
    ss_res = float(np.sum(resid**2))
    ss_tot = float(np.sum((y - ym) ** 2))
    r2 = 1.0 - ss_res / ss_tot if ss_tot > 0 else 1.0
    if n > 2:
        sigma2 = ss_res / (n - 2)
        se_slope = math.sqrt(sigma2 / sxx)
        se_int = math.sqrt(sigma2 * (1.0 / n + xm * xm / sxx))
    else:
        se_slope = se_int = math.nan
    return slope, intercept, r2, se_slope, se_int


def _hidden_preacts(net: Network, x: np.ndarray, layers) -> list[np.ndarray]:
    pre = forward(net, x).preactivations
    return [pre[i] for i in layers]


def estimate_flip_rate(exp: FlipExperiment) -> FlipRateCurve:
    """Monte Carlo flip probability per (sample, unit) for every eta.

    The same direction draw is reused across the eta grid (common random
    numbers). Entries with |X_b| below ``KINK_TOL`` are excluded.
    """
    rng = np.random.default_rng(exp.seed)
    net = exp.net
    layers = list(range(net.num_hidden)) if exp.layers is None else list(exp.layers)
    params = net.params()
    fixed_probe = None if callable(exp.probe) else (
        exp.probe.observations if hasattr(exp.probe, "observations") else np.asarray(exp.probe, dtype=np.float64)
    )
    base = None
    if fixed_probe is not None:
        base = _hidden_preacts(net, fixed_probe, layers)
    rates = np.zeros((exp.trials, exp.eta_grid.size))
    for t in range(exp.trials):
        if fixed_probe is None:
            x = np.asarray(exp.probe(rng), dtype=np.float64)
            pre0 = _hidden_preacts(net, x, layers)
        else:
            x, pre0 = fixed_probe, base
        g = exp.direction_sampler(rng, net)
        valid = [np.abs(a) >= KINK_TOL for a in pre0]
        n_valid = sum(int(v.sum()) for v in valid)
        if n_valid == 0:
            continue
        for e, eta in enumerate(exp.eta_grid):
            moved = net.with_params([p - eta * d for p, d in zip(params, g)])
            pre1 = _hidden_preacts(moved, x, layers)
            flips = sum(int(np.count_nonzero(((a > 0) != (b > 0)) & v)) for a, b, v in zip(pre0, pre1, valid))
            rates[t, e] = flips / n_valid
    mean = rates.mean(axis=0)
    se = rates.std(axis=0, ddof=1) / math.sqrt(exp.trials) if exp.trials > 1 else np.zeros_like(mean)
    if exp.eta_grid.size >= 2:
        slope, intercept, r2, se_s, se_i = ols_fit(exp.eta_grid, mean)
    else:
        slope, intercept, r2, se_s, se_i = float(mean[0] / exp.eta_grid[0]), 0.0, math.nan, math.nan, math.nan
    violated = bool(mean[-1] >= FLIP_GUARD)
    if violated:
        warnings.warn(
            f"mean flip probability {mean[-1]:.3f} at the largest eta exceeds {FLIP_GUARD}; "
            "the small-step regime does not hold",
            RuntimeWarning,
            stacklevel=2,
        )
    return FlipRateCurve(exp.eta_grid, mean, se, slope, intercept, r2, se_i, se_s, violated)


def linear_uniform_experiment(u: float, eta_grid, trials: int = 2000, batch: int = 1024, seed: int = 0) -> FlipExperiment:
    """One ReLU unit X = x with x ~ Uniform(-1, 1); the direction shifts its bias by +-u.

    A flip happens iff x lies within eta * u of zero on the side the shift
    crosses, so the exact flip probability is eta * u / 2 while eta * u <= 1.
    """
    net = Network([np.ones((1, 1)), np.ones((1, 1))], [np.zeros(1), np.zeros(1)], "scalar-value")

    def probe(rng):
        return rng.uniform(-1.0, 1.0, size=(batch, 1))

    return FlipExperiment(net, probe, signed_bias_direction(u), list(eta_grid), trials, seed)


def calibrate_eta(net: Network, probe, direction_sampler, target_rate: float, trials: int = 50, seed: int = 0,
                  lo: float = 1e-8, hi: float = 10.0, iters: int = 40) -> float:
    """Bisect (in log space) for the eta whose mean flip rate is ``target_rate``."""
    for _ in range(iters):
        mid = math.sqrt(lo * hi)
        rate = estimate_flip_rate(FlipExperiment(net, probe, direction_sampler, [mid], trials, seed)).mean_flip_prob[0]
        if rate < target_rate:
            lo = mid
        else:
            hi = mid
        if hi / lo < 1.01:
            break
    return math.sqrt(lo * hi)


def write_flip_rate_csv(curve: FlipRateCurve, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["eta", "mean_flip_prob", "std_err"])
        for eta, m, s in zip(curve.eta, curve.mean_flip_prob, curve.std_err):
            w.writerow([repr(float(eta)), repr(float(m)), repr(float(s))])


def fit_summary_line(curve: FlipRateCurve) -> str:
    return json.dumps(curve.fit_summary(), sort_keys=True)


# ---------------------------------------------------------------- first-order OUI check


@dataclass
class Snapshot:
    """Networks at some point of training plus the Adam directions of their next step."""

    update: int
    actor: Network
    critic: Network
    actor_direction: list
    critic_direction: list


def collect_snapshots(env_id: str, config, n_snapshots: int) -> list[Snapshot]:
    """Train one run and capture ``n_snapshots`` evenly spaced (net, direction) pairs."""
    from oui_lab.ppo_engine import Trainer

    trainer = Trainer(env_id, config)
    total = config.num_updates
    picks = sorted({int(round(v)) for v in np.linspace(0, total - 1, n_snapshots)})
    snaps = []
    for u in range(total):
        traj, adv, ret = trainer.collect()
        if u in picks:
            a_dir, c_dir = trainer.update_directions(traj, adv, ret)
            agent = trainer.agent
            snaps.append(Snapshot(u, agent.actor.copy(), agent.critic.copy(), a_dir, c_dir))
        if u == picks[-1]:
            break
        trainer.update(traj, adv, ret)
    return snaps


def trained_agent(env_id: str, config):
    """Train ``config.num_updates`` updates and return the final agent (no checkpointing)."""
    from oui_lab.ppo_engine import Trainer

    trainer = Trainer(env_id, config)
    for _ in range(config.num_updates):
        trainer.update(*trainer.collect())
    return trainer.agent


def first_order_residual(net: Network, direction, probe, eta: float) -> float:
    """Mean over hidden layers of |dOUI_exact - dOUI_first_order| for theta - eta * g."""
    x = probe.observations if hasattr(probe, "observations") else np.asarray(probe, dtype=np.float64)
    moved = net.with_params([p - eta * d for p, d in zip(net.params(), direction)])
    before = [a > 0 for a in forward(net, x).preactivations]
    after = [a > 0 for a in forward(moved, x).preactivations]
    return float(np.mean([abs(drift_decomposition(a, b).residual) for a, b in zip(before, after)]))


def first_order_errors(snapshots, probe, etas) -> dict[float, float]:
    """Mean first-order residual over snapshots (actor and critic layers pooled) per eta."""
    out = {}
    for eta in etas:
        errs = []
        for s in snapshots:
            errs.append(first_order_residual(s.actor, s.actor_direction, probe, eta))
            errs.append(first_order_residual(s.critic, s.critic_direction, probe, eta))
        out[float(eta)] = float(np.mean(errs))
    return out


# ---------------------------------------------------------------- run-level summary


@dataclass
class SensitivitySummary:
    rows: list = field(default_factory=list)  # (f, flip, d_oui_actor, d_oui_critic)
    pairs: int = 0
    pairs_with_flips: int = 0
    flips_with_small_drift: int = 0

    def to_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            w = csv.writer(fh)
            w.writerow(["f", "flip", "d_oui_actor", "d_oui_critic"])
            for row in self.rows:
                w.writerow([repr(float(v)) for v in row])


def oui_sensitivity_report(run, small_drift: float | None = None) -> SensitivitySummary:
    """Per-checkpoint flip fraction next to the OUI change since the previous checkpoint.

    ``flips_with_small_drift`` counts checkpoint pairs where structural motion
    (flip fraction) exceeds the magnitude of both OUI changes.
    """
    cps = run.checkpoints
    if len(cps) < 2:
        raise ValueError("need at least two checkpoints")
    summary = SensitivitySummary()
    for prev, cur in zip(cps, cps[1:]):
        d_a = cur.oui_actor - prev.oui_actor
        d_c = cur.oui_critic - prev.oui_critic
        summary.rows.append((cur.fraction_done, cur.flip_fraction, d_a, d_c))
        summary.pairs += 1
        if cur.flip_fraction > 0:
            summary.pairs_with_flips += 1
            bound = cur.flip_fraction if small_drift is None else small_drift
            if max(abs(d_a), abs(d_c)) < bound:
                summary.flips_with_small_drift += 1
    return summary
