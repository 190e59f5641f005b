"""PPO for fully separate actor and critic MLPs, with structural checkpoints.

The training loop alternates fixed-length rollouts with clipped-surrogate
updates and, at every 1% of the update budget, measures actor/critic OUI on
the environment's probe batch together with KL, clip fraction and flip
statistics.
"""
from __future__ import annotations

import logging
from dataclasses import asdict, dataclass, field, replace

import numpy as np

from oui_lab import envs, kernels
from oui_lab.nn_core import (
    POLICY,
    VALUE,
    AdamState,
    ConfigurationError,
    DivergenceError,
    Network,
    adam_direction,
    adam_step,
    backward,
    clip_global_norm,
    forward,
    init_network,
)
from oui_lab.oui_metrics import compute_mask, oui_report, pooled_flip
from oui_lab.records import CheckpointMetrics, RunRecord, run_id_for
from oui_lab.theory_lab import branch_drift

log = logging.getLogger(__name__)

N_CHECKPOINTS = 100
EARLY_FRACTION = 0.10
RETURN_WINDOW = 50
ADV_STD_FLOOR = 1e-8

ENV_DEFAULTS = {
    envs.CARTPOLE: {"rollout_len": 1024, "total_steps": 120_000},
    envs.GRIDROOM: {"rollout_len": 512, "total_steps": 20_000},
}


@dataclass(frozen=True)
class PpoConfig:
    lr: float
    seed: int = 0
    rollout_len: int = 1024
    total_steps: int = 120_000
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_range: float = 0.1
    epochs: int = 4
    minibatch: int = 256
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if not (self.lr >= 0 and np.isfinite(self.lr)):
            raise ConfigurationError("lr must be a finite non-negative number")
        if self.entropy_coef != 0.0:
            raise ConfigurationError("entropy bonus is not supported (coefficient must be 0)")
        if self.rollout_len <= 0 or self.minibatch <= 0 or self.epochs <= 0:
            raise ConfigurationError("rollout_len, minibatch and epochs must be positive")
        if self.total_steps < self.rollout_len:
            raise ConfigurationError("total_steps must cover at least one rollout")
        object.__setattr__(self, "hidden", tuple(int(h) for h in self.hidden))

    @classmethod
    def for_env(cls, env_id: str, lr: float, seed: int = 0, **overrides) -> "PpoConfig":
        envs.check_env_id(env_id)
        params = dict(ENV_DEFAULTS[env_id])
        params.update(overrides)
        return cls(lr=lr, seed=seed, **params)

    @property
    def num_updates(self) -> int:
        return self.total_steps // self.rollout_len

    def to_json(self) -> dict:
        d = asdict(self)
        d["hidden"] = list(self.hidden)
        return d


@dataclass
class Trajectory:
    observations: np.ndarray
    actions: np.ndarray
    log_probs_old: np.ndarray
    rewards: np.ndarray
    value_estimates: np.ndarray
    terminated: np.ndarray
    truncated: np.ndarray
    bootstrap_value: float = 0.0
    truncation_values: np.ndarray | None = None

    def __len__(self) -> int:
        return self.actions.shape[0]


@dataclass
class UpdateDiagnostics:
    approx_kl: float = 0.0
    clip_fraction: float = 0.0
    policy_loss: float = 0.0
    value_loss: float = 0.0
    entropy: float = 0.0


@dataclass
class Agent:
    actor: Network
    critic: Network
    actor_opt: AdamState
    critic_opt: AdamState


# ---------------------------------------------------------------- GAE


def compute_gae(rewards, values, bootstrap_value, terminated, truncated, gamma, lam, truncation_values=None):
    """Backward GAE recursion.

    Termination zeroes both the bootstrap and the advantage tail. Truncation
    cuts the tail but bootstraps with the value of the final (pre-reset)
    observation, taken from ``truncation_values`` (or ``bootstrap_value`` on
    the last step).
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    terminated = np.asarray(terminated, dtype=bool)
    truncated = np.asarray(truncated, dtype=bool)
    n = rewards.shape[0]
    if not (values.shape == terminated.shape == truncated.shape == (n,)):
        raise ValueError("GAE inputs must be parallel 1-D arrays")
    next_values = np.empty(n)
    next_values[:-1] = values[1:]
    next_values[-1] = bootstrap_value
    if truncation_values is not None:
        tv = np.asarray(truncation_values, dtype=np.float64)
        next_values = np.where(truncated, tv, next_values)
    elif truncated[:-1].any():
        raise ValueError("mid-rollout truncation needs truncation_values")
    adv = kernels.gae(
        np.ascontiguousarray(rewards), np.ascontiguousarray(values), next_values, terminated, truncated, gamma, lam
    )
    return adv, adv + values


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / max(float(adv.std()), ADV_STD_FLOOR)


# ---------------------------------------------------------------- losses


def _log_softmax(logits: np.ndarray) -> np.ndarray:
    z = logits - logits.max(axis=1, keepdims=True)
    return z - np.log(np.exp(z).sum(axis=1, keepdims=True))


def ratio_stats(ratio: np.ndarray, log_ratio: np.ndarray, clip_range: float) -> tuple[float, float]:
    """(approx_kl, clip_fraction) with approx_kl = mean((r - 1) - ln r)."""
    approx_kl = float(np.mean((ratio - 1.0) - log_ratio))
    clip_fraction = float(np.mean(np.abs(ratio - 1.0) > clip_range))
    return approx_kl, clip_fraction


def surrogate_terms(ratio, adv, clip_range):
    """Per-sample clipped surrogate and the mask where the unclipped branch is active."""
    unclipped = ratio * adv
    clipped = np.clip(ratio, 1.0 - clip_range, 1.0 + clip_range) * adv
    return np.minimum(unclipped, clipped), unclipped <= clipped


def actor_loss_and_grads(actor: Network, old_actor: Network, obs, actions, adv, clip_range):
    n = obs.shape[0]
    rows = np.arange(n)
    logp_old = _log_softmax(forward(old_actor, obs).outputs)[rows, actions]
    trace = forward(actor, obs)
    logp_all = _log_softmax(trace.outputs)
    probs = np.exp(logp_all)
    log_ratio = logp_all[rows, actions] - logp_old
    ratio = np.exp(log_ratio)
    surr, active = surrogate_terms(ratio, adv, clip_range)
    loss = -float(surr.mean())
    d_logp = -(active * ratio * adv) / n
    d_logits = -probs * d_logp[:, None]
    d_logits[rows, actions] += d_logp
    grads = backward(actor, trace, d_logits)
    entropy = float(-(probs * logp_all).sum(axis=1).mean())
    return loss, grads, ratio, log_ratio, entropy


def critic_loss_and_grads(critic: Network, obs, returns, value_coef):
    n = obs.shape[0]
    trace = forward(critic, obs)
    err = trace.outputs[:, 0] - returns
    loss = 0.5 * float(np.mean(err * err))
    grads = backward(critic, trace, (value_coef * err / n)[:, None])
    return loss, grads


def ppo_update(agent: Agent, traj: Trajectory, advantages, returns, config: PpoConfig, rng) -> UpdateDiagnostics:
    """Run ``epochs`` passes of shuffled minibatch updates, mutating ``agent``.

    Old log-probabilities are re-evaluated per minibatch from the frozen
    behaviour actor, so with lr = 0 the ratio is exactly 1.
    """
    adv_all = normalize_advantages(np.asarray(advantages, dtype=np.float64))
    returns = np.asarray(returns, dtype=np.float64)
    old_actor = agent.actor
    n = len(traj)
    sums = np.zeros(5)
    count = 0
    for _ in range(config.epochs):
        perm = rng.permutation(n)
        for start in range(0, n, config.minibatch):
            idx = perm[start : start + config.minibatch]
            obs = traj.observations[idx]
            p_loss, a_grads, ratio, log_ratio, entropy = actor_loss_and_grads(
                agent.actor, old_actor, obs, traj.actions[idx], adv_all[idx], config.clip_range
            )
            v_loss, c_grads = critic_loss_and_grads(agent.critic, obs, returns[idx], config.value_coef)
            if not (np.isfinite(p_loss) and np.isfinite(v_loss)):
                raise DivergenceError("non-finite PPO loss")
            kl, clip = ratio_stats(ratio, log_ratio, config.clip_range)
            a_grads = clip_global_norm(a_grads, config.max_grad_norm)
            c_grads = clip_global_norm(c_grads, config.max_grad_norm)
            agent.actor, agent.actor_opt = adam_step(agent.actor, agent.actor_opt, a_grads, config.lr)
            agent.critic, agent.critic_opt = adam_step(agent.critic, agent.critic_opt, c_grads, config.lr)
            sums += (kl, clip, p_loss, v_loss, entropy)
            count += 1
    return UpdateDiagnostics(*(float(v) for v in sums / count))


# ---------------------------------------------------------------- training


@dataclass
class CheckpointEvent:
    """Passed to ``on_checkpoint`` hooks; carries the raw structural state."""

    index: int
    update: int
    metrics: CheckpointMetrics
    actor_mask: object
    critic_mask: object
    drift: list
    agent: Agent


def checkpoint_schedule(num_updates: int, n_checkpoints: int = N_CHECKPOINTS) -> list[int]:
    """Update count (1-based) after which checkpoint k = 1..n is taken."""
    return [-(-k * num_updates // n_checkpoints) for k in range(1, n_checkpoints + 1)]


class Trainer:
    """One PPO run: owns its env, networks, optimiser states and RNG streams."""

    def __init__(self, env_id: str, config: PpoConfig):
        self.env_id = envs.check_env_id(env_id)
        self.config = config
        seqs = np.random.SeedSequence(config.seed).spawn(4)
        self.env = envs.make_env(env_id, seed=int(seqs[2].generate_state(1)[0]))
        obs_dim, n_actions = self.env.obs_dim, self.env.n_actions
        actor = init_network([obs_dim, *config.hidden, n_actions], POLICY, seed=seqs[0])
        critic = init_network([obs_dim, *config.hidden, 1], VALUE, seed=seqs[1])
        self.agent = Agent(actor, critic, AdamState.zeros_like(actor), AdamState.zeros_like(critic))
        self.rng = np.random.default_rng(seqs[3])
        self.obs = self.env.reset()
        self.episode_returns: list[float] = []
        self._ep_return = 0.0
        self.updates_done = 0

    def recent_return(self) -> float | None:
        if not self.episode_returns:
            return None
        return float(np.mean(self.episode_returns[-RETURN_WINDOW:]))

    def collect(self) -> tuple[Trajectory, np.ndarray, np.ndarray]:
        """Roll out ``rollout_len`` steps; return the trajectory, advantages and returns."""
        cfg = self.config
        n = cfg.rollout_len
        obs_buf = np.empty((n, self.env.obs_dim))
        actions = np.empty(n, dtype=np.int64)
        rewards = np.empty(n)
        terminated = np.zeros(n, dtype=bool)
        truncated = np.zeros(n, dtype=bool)
        final_obs = {}
        uniforms = self.rng.random(n)
        sampler = kernels.DenseStack(self.agent.actor.weights, self.agent.actor.biases)
        env = self.env
        obs = self.obs
        for t in range(n):
            obs_buf[t] = obs
            a = sampler.sample(obs, uniforms[t])
            res = env.step(a)
            actions[t] = a
            rewards[t] = res.reward
            self._ep_return += res.reward
            if res.terminated or res.truncated:
                terminated[t] = res.terminated
                truncated[t] = res.truncated
                if res.truncated:
                    final_obs[t] = res.observation
                self.episode_returns.append(self._ep_return)
                self._ep_return = 0.0
                obs = env.reset()
            else:
                obs = res.observation
        self.obs = obs

        actor, critic = self.agent.actor, self.agent.critic
        logp = _log_softmax(forward(actor, obs_buf).outputs)[np.arange(n), actions]
        values = forward(critic, obs_buf).outputs[:, 0]
        bootstrap = float(forward(critic, obs[None, :]).outputs[0, 0])
        trunc_vals = np.zeros(n)
        if final_obs:
            steps = sorted(final_obs)
            trunc_vals[steps] = forward(critic, np.array([final_obs[t] for t in steps])).outputs[:, 0]
        if not (np.isfinite(values).all() and np.isfinite(bootstrap) and np.isfinite(logp).all()):
            raise DivergenceError("non-finite values or log-probabilities during rollout")
        traj = Trajectory(obs_buf, actions, logp, rewards, values, terminated, truncated, bootstrap, trunc_vals)
        adv, ret = compute_gae(
            rewards, values, bootstrap, terminated, truncated, cfg.gamma, cfg.gae_lambda, trunc_vals
        )
        return traj, adv, ret

    def update(self, traj, adv, ret) -> UpdateDiagnostics:
        diag = ppo_update(self.agent, traj, adv, ret, self.config, self.rng)
        self.updates_done += 1
        return diag

    def update_directions(self, traj, adv, ret, size: int | None = None):
        """Adam step directions (actor, critic) the next minibatch would apply.

        Uses the first ``size`` samples of the rollout and a copy of the
        optimiser state; the agent is not modified.
        """
        cfg = self.config
        size = cfg.minibatch if size is None else size
        adv_n = normalize_advantages(np.asarray(adv))[:size]
        obs = traj.observations[:size]
        _, a_grads, *_ = actor_loss_and_grads(
            self.agent.actor, self.agent.actor, obs, traj.actions[:size], adv_n, cfg.clip_range
        )
        _, c_grads = critic_loss_and_grads(self.agent.critic, obs, np.asarray(ret)[:size], cfg.value_coef)
        a_dir, _ = adam_direction(self.agent.actor_opt.copy(), clip_global_norm(a_grads, cfg.max_grad_norm))
        c_dir, _ = adam_direction(self.agent.critic_opt.copy(), clip_global_norm(c_grads, cfg.max_grad_norm))
        return a_dir, c_dir


def train_run(env_id: str, config: PpoConfig, probe=None, on_checkpoint=None) -> RunRecord:
    """Train one run and return its checkpoint series.

    ``on_checkpoint`` (optional) receives a :class:`CheckpointEvent` at every
    checkpoint. Divergence ends the run early with ``diverged=True``.
    """
    if probe is None:
        probe = envs.load_probe_batch(env_id)
    cfg_json = config.to_json()
    record = RunRecord(run_id_for(env_id, cfg_json), env_id, config.lr, config.seed, False, config=cfg_json)
    trainer = Trainer(env_id, config)
    schedule = checkpoint_schedule(config.num_updates)
    prev_masks = (compute_mask(trainer.agent.actor, probe), compute_mask(trainer.agent.critic, probe))
    diag = UpdateDiagnostics()
    k = 0
    # overflow on the way to divergence is detected explicitly, not via warnings
    with np.errstate(over="ignore", invalid="ignore"):
        try:
            for u in range(1, config.num_updates + 1):
                traj, adv, ret = trainer.collect()
                diag = trainer.update(traj, adv, ret)
                while k < len(schedule) and schedule[k] == u:
                    k += 1
                    masks = (compute_mask(trainer.agent.actor, probe), compute_mask(trainer.agent.critic, probe))
                    drift = [branch_drift(p, c) for p, c in zip(prev_masks, masks)]
                    flip, flip_u = pooled_flip(zip(prev_masks, masks))
                    metrics = CheckpointMetrics(
                        round(k / N_CHECKPOINTS, 2),
                        trainer.recent_return(),
                        oui_report(masks[0]).branch_mean,
                        oui_report(masks[1]).branch_mean,
                        diag.approx_kl,
                        diag.clip_fraction,
                        flip,
                        flip_u,
                    )
                    record.checkpoints.append(metrics)
                    if on_checkpoint is not None:
                        on_checkpoint(CheckpointEvent(k, u, metrics, masks[0], masks[1], drift, trainer.agent))
                    prev_masks = masks
        except DivergenceError as exc:
            log.warning("run %s diverged after %d updates: %s", record.run_id, trainer.updates_done, exc)
            record.diverged = True
    if not record.diverged and record.checkpoints:
        record.final_return = record.checkpoints[-1].return_ma50
    return record
