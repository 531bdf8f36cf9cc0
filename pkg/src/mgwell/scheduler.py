"""Convergence-gated adaptive multi-grid training loop.

A schedule pairs a strictly increasing fidelity ladder (ending at beta=1)
with strictly increasing cumulative episode limits.  At each rung the
policy trains until either its monitored return flattens (relative change
below ``delta`` over the last ``n`` iterations) or the rung's episode limit
is hit, then carries over unchanged to the next fidelity.  At the final
rung the convergence check is off: there is nothing to promote to, so the
policy trains out the remaining episode budget.  Setting
``n = inf`` disables the convergence check, which recovers the fixed
multi-grid and classical single-grid schedules as special cases.

Cost accounting converts episodes at each fidelity into "equivalent fine
episodes" by weighting with host-measured runtime ratios against beta=1.
"""

from __future__ import annotations

import csv
import math
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .environment import EnvironmentConfig, WellControlEnv, base_policy_for
from .errors import ContractError
from .grid import ScalarField
from .rl_ppo import (
    PpoAgent,
    PpoConfig,
    RolloutBatch,
    evaluate_policy_return,
    gae,
    save_checkpoint,
)

DIVIDE_GUARD = 1e-8


@dataclass(frozen=True)
class FidelitySchedule:
    """Fidelity ladder, episode limits and convergence parameters."""

    betas: tuple[float, ...]
    episode_limits: tuple[int, ...]
    window: float = math.inf  # n consecutive iterations; inf disables the check
    tolerance: float = 0.0  # delta
    divide_guard: float = DIVIDE_GUARD

    def __post_init__(self):
        if len(self.betas) != len(self.episode_limits):
            raise ContractError("betas and episode limits must pair up")
        if not self.betas:
            raise ContractError("schedule needs at least one fidelity")
        if self.betas[-1] != 1.0:
            raise ContractError("the final training fidelity must be beta=1")
        if any(b2 <= b1 for b1, b2 in zip(self.betas, self.betas[1:])):
            raise ContractError("fidelity factors must be strictly increasing")
        if any(e2 <= e1 for e1, e2 in zip(self.episode_limits, self.episode_limits[1:])):
            raise ContractError("episode limits must be strictly increasing")
        if self.tolerance < 0 or self.divide_guard <= 0:
            raise ContractError("tolerance must be >= 0 and divide guard > 0")


def is_converged(returns, window, tolerance, divide_guard=DIVIDE_GUARD) -> bool:
    """True when the last ``window`` relative return changes all fall below
    ``tolerance``; always False while fewer than ``window`` values exist."""
    if divide_guard <= 0:
        raise ContractError("divide guard must be positive")
    if math.isinf(window):
        return False
    window = int(window)
    r = list(returns)
    if len(r) < window:
        return False
    deltas = [
        abs((r[i] - r[i - 1]) / max(r[i - 1], divide_guard))
        for i in range(len(r) - window, len(r))
    ]
    return max(deltas) < tolerance


@dataclass
class ReturnHistory:
    """Append-only record of monitored policy returns."""

    returns: list[float] = field(default_factory=list)
    betas: list[float] = field(default_factory=list)
    episodes: list[int] = field(default_factory=list)
    equivalent_episodes: list[float] = field(default_factory=list)

    def append(self, value: float, beta: float, episodes: int, equivalent: float):
        self.returns.append(value)
        self.betas.append(beta)
        self.episodes.append(episodes)
        self.equivalent_episodes.append(equivalent)

    def at_fidelity(self, beta: float) -> list[float]:
        return [r for r, b in zip(self.returns, self.betas) if b == beta]


@dataclass
class TrainingReport:
    agent: PpoAgent
    history: ReturnHistory
    episode_counts: dict[float, int]
    runtime_ratios: dict[float, float]
    switch_episodes: list[int]
    total_episodes: int

    @property
    def equivalent_fine_total(self) -> float:
        return equivalent_fine_episodes(self.episode_counts, self.runtime_ratios)

    @property
    def final_return(self) -> float:
        return self.history.returns[-1] if self.history.returns else float("nan")

    def save_returns_csv(self, path) -> None:
        with open(path, "w", newline="") as fh:
            writer = csv.writer(fh)
            writer.writerow(["iteration", "fidelity", "episodes", "equivalent_episodes", "return"])
            for i, (r, b, e, q) in enumerate(
                zip(
                    self.history.returns,
                    self.history.betas,
                    self.history.episodes,
                    self.history.equivalent_episodes,
                )
            ):
                writer.writerow([i, b, e, f"{q:.6f}", f"{r:.12f}"])


def equivalent_fine_episodes(
    episode_counts: dict[float, int], runtime_ratios: dict[float, float]
) -> float:
    """Episode counts weighted by measured runtime ratios against beta=1."""
    if not episode_counts:
        return 0.0
    total = 0.0
    for beta, count in episode_counts.items():
        if beta not in runtime_ratios:
            raise ContractError(f"no runtime ratio measured for beta={beta}")
        total += count * runtime_ratios[beta]
    return total


def measure_runtime_ratios(
    config: EnvironmentConfig,
    betas,
    sample: ScalarField,
    episodes_per_fidelity: int = 100,
) -> dict[float, float]:
    """Time base-policy episodes at each fidelity and normalize by beta=1.

    The beta=1 timing is always taken, even when 1.0 is not in ``betas``.
    """
    timings: dict[float, float] = {}
    for beta in sorted(set(list(betas) + [1.0])):
        env = WellControlEnv(config.at_fidelity(beta))
        policy = base_policy_for(config)
        start = time.perf_counter()
        for _ in range(episodes_per_fidelity):
            env.reset(sample)
            while not env.done:
                env.step(policy(None))
        timings[beta] = (time.perf_counter() - start) / episodes_per_fidelity
    fine = timings[1.0]
    if fine <= 0:
        raise ContractError("beta=1 episode timing came out nonpositive")
    return {beta: t / fine for beta, t in timings.items()}


# ---------------------------------------------------------------------------
# Rollout collection
# ---------------------------------------------------------------------------

class _Actor:
    """One environment plus its private RNG stream; cycles training samples."""

    def __init__(self, config: EnvironmentConfig, fields, seed: int, actor_id: int):
        self.env = WellControlEnv(config)
        self.fields = fields
        self.rng = np.random.default_rng((seed, actor_id))
        self.obs = None
        self.episodes_finished = 0

    def ensure_started(self):
        if self.obs is None or self.env.done:
            sample = self.fields[self.rng.integers(len(self.fields))]
            self.obs = self.env.reset(sample)


def collect_rollouts(agent: PpoAgent, actors: list["_Actor"]) -> tuple[RolloutBatch, int]:
    """Run every actor for T steps; returns the batch and episodes completed."""
    cfg = agent.config
    obs_buf, act_buf, logp_buf, adv_buf, ret_buf = [], [], [], [], []
    episodes = 0
    for actor in actors:
        rewards = np.zeros(cfg.n_steps)
        values = np.zeros(cfg.n_steps)
        dones = np.zeros(cfg.n_steps, dtype=bool)
        observations = np.zeros((cfg.n_steps, agent.params.obs_dim))
        raw_actions = np.zeros((cfg.n_steps, agent.params.act_dim))
        log_probs = np.zeros(cfg.n_steps)
        for t in range(cfg.n_steps):
            actor.ensure_started()
            observations[t] = actor.obs
            raw, logp, clipped, value = agent.act(actor.obs, actor.rng)
            result = actor.env.step(clipped)
            raw_actions[t] = raw
            log_probs[t] = logp
            values[t] = value
            rewards[t] = result.reward
            dones[t] = result.done
            actor.obs = result.observation
            if result.done:
                episodes += 1
        bootstrap = 0.0 if dones[-1] else agent.value(actor.obs)
        adv, ret = gae(rewards, values, dones, cfg.gamma, cfg.gae_lambda, bootstrap)
        obs_buf.append(observations)
        act_buf.append(raw_actions)
        logp_buf.append(log_probs)
        adv_buf.append(adv)
        ret_buf.append(ret)

    raw_obs = np.concatenate(obs_buf)
    agent.normalizer.update(raw_obs)
    batch = RolloutBatch(
        observations=agent.normalizer.normalize(raw_obs),
        raw_actions=np.concatenate(act_buf),
        log_probs_old=np.concatenate(logp_buf),
        advantages=np.concatenate(adv_buf),
        returns=np.concatenate(ret_buf),
    )
    return batch, episodes


# ---------------------------------------------------------------------------
# The training loop (adaptive / fixed / single-grid, by schedule choice)
# ---------------------------------------------------------------------------

def run_training(
    schedule: FidelitySchedule,
    ppo_config: PpoConfig,
    config: EnvironmentConfig,
    training_fields,
    seed: int,
    runtime_ratios: dict[float, float] | None = None,
    checkpoint_dir=None,
    progress=None,
) -> TrainingReport:
    """Train a policy through the fidelity ladder of ``schedule``.

    The convergence window considers only returns recorded at the current
    fidelity: returns jump discontinuously across fidelity switches, so a
    mixed window would spuriously block convergence.  Policy returns are
    monitored at the current training fidelity with deterministic actions,
    once per policy iteration.
    """
    if not training_fields:
        raise ContractError("need a nonempty training vector")
    if runtime_ratios is None:
        runtime_ratios = measure_runtime_ratios(
            config, schedule.betas, training_fields[0], episodes_per_fidelity=5
        )

    first_env = WellControlEnv(config.at_fidelity(schedule.betas[0]))
    agent = PpoAgent(
        first_env.config.n_obs, first_env.config.n_actions, ppo_config, seed
    )
    history = ReturnHistory()
    episode_counts: dict[float, int] = {}
    switch_episodes: list[int] = []
    total_episodes = 0
    equivalent_total = 0.0
    checkpoint_dir = Path(checkpoint_dir) if checkpoint_dir is not None else None

    last_level = len(schedule.betas) - 1
    for level, (beta, limit) in enumerate(zip(schedule.betas, schedule.episode_limits)):
        level_config = config.at_fidelity(beta)
        actors = [
            _Actor(level_config, training_fields, seed, actor_id)
            for actor_id in range(ppo_config.n_actors)
        ]
        episode_counts.setdefault(beta, 0)
        while True:
            batch, episodes = collect_rollouts(agent, actors)
            agent.learn(batch)
            total_episodes += episodes
            episode_counts[beta] += episodes
            equivalent_total += episodes * runtime_ratios[beta]
            agent.episodes_seen = total_episodes

            monitored = evaluate_policy_return(
                agent.act_deterministic, training_fields, level_config
            )
            history.append(monitored, beta, total_episodes, equivalent_total)
            if progress is not None:
                progress(level, beta, total_episodes, monitored)
            # convergence promotes the policy to the next rung; at the top
            # rung only the episode budget stops training
            if level < last_level and is_converged(
                history.at_fidelity(beta),
                schedule.window,
                schedule.tolerance,
                schedule.divide_guard,
            ):
                break
            if total_episodes >= limit:
                break
        switch_episodes.append(total_episodes)
        if checkpoint_dir is not None:
            save_checkpoint(agent, checkpoint_dir / f"checkpoint_beta_{beta}.npz")
        # freeze observation statistics when the policy moves up a fidelity
        agent.normalizer.frozen = True

    return TrainingReport(
        agent=agent,
        history=history,
        episode_counts=episode_counts,
        runtime_ratios=runtime_ratios,
        switch_episodes=switch_episodes,
        total_episodes=total_episodes,
    )
