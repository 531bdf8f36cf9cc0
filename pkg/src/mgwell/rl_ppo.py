"""Actor-critic PPO with a shared tanh MLP trunk and a diagonal-Gaussian
continuous policy.

The network and all gradients are implemented directly on numpy arrays: the
policies here are small (a few hundred hidden units) and an explicit
backward pass keeps updates bit-deterministic under a fixed seed and lets
the analytic gradients be checked against central finite differences.

Loss = negative clipped surrogate + value_coef * squared value error
       - entropy_coef * policy entropy,
with advantages normalized per minibatch and a global gradient-norm clip.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .errors import ContractError, NumericalError

LOG_STD_MIN = -20.0
LOG_STD_MAX = 2.0
_LOG_2PI = np.log(2.0 * np.pi)


@dataclass
class PpoConfig:
    """Hyper-parameters of the clipped-surrogate update."""

    n_actors: int = 8
    n_steps: int = 40  # environment steps per actor per iteration
    minibatch_size: int = 16
    epochs: int = 20
    gamma: float = 0.99
    clip_eps: float = 0.1
    learning_rate: float = 3e-4
    gae_lambda: float = 0.95
    value_coef: float = 0.5
    entropy_coef: float = 0.0
    max_grad_norm: float = 0.5
    hidden_sizes: tuple[int, ...] = (64, 64)
    init_log_std: float = -1.0

    def __post_init__(self):
        if self.minibatch_size > self.n_actors * self.n_steps:
            raise ContractError("minibatch size must not exceed actors * steps")
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ContractError("gamma and lambda must lie in [0, 1]")


# ---------------------------------------------------------------------------
# Parameters and forward pass
# ---------------------------------------------------------------------------

class PolicyParameters:
    """Weights of the shared trunk, mean head, value head and log-std vector."""

    def __init__(self, trunk_w, trunk_b, w_mean, b_mean, w_value, b_value, log_std):
        self.trunk_w = [np.asarray(w, dtype=np.float64) for w in trunk_w]
        self.trunk_b = [np.asarray(b, dtype=np.float64) for b in trunk_b]
        self.w_mean = np.asarray(w_mean, dtype=np.float64)
        self.b_mean = np.asarray(b_mean, dtype=np.float64)
        self.w_value = np.asarray(w_value, dtype=np.float64)
        self.b_value = float(b_value)
        self.log_std = np.asarray(log_std, dtype=np.float64)

    @classmethod
    def initialize(
        cls,
        obs_dim: int,
        act_dim: int,
        hidden_sizes: tuple[int, ...],
        rng: np.random.Generator,
        init_log_std: float = -1.0,
    ) -> "PolicyParameters":
        sizes = [obs_dim, *hidden_sizes]
        trunk_w, trunk_b = [], []
        for fan_in, fan_out in zip(sizes[:-1], sizes[1:]):
            scale = np.sqrt(2.0 / fan_in)
            trunk_w.append(rng.normal(0.0, scale, size=(fan_in, fan_out)))
            trunk_b.append(np.zeros(fan_out))
        last = sizes[-1]
        w_mean = rng.normal(0.0, 0.01, size=(last, act_dim))
        w_value = rng.normal(0.0, 0.1, size=last)
        return cls(
            trunk_w, trunk_b, w_mean, np.zeros(act_dim), w_value, 0.0,
            np.full(act_dim, init_log_std),
        )

    @property
    def obs_dim(self) -> int:
        return self.trunk_w[0].shape[0]

    @property
    def act_dim(self) -> int:
        return self.w_mean.shape[1]

    def arrays(self) -> list[np.ndarray]:
        """Flat parameter list; gradient containers mirror this order."""
        return [
            *self.trunk_w, *self.trunk_b,
            self.w_mean, self.b_mean, self.w_value,
            np.array([self.b_value]), self.log_std,
        ]

    def to_vector(self) -> np.ndarray:
        return np.concatenate([a.ravel() for a in self.arrays()])

    def from_vector(self, vec: np.ndarray) -> "PolicyParameters":
        out = self.copy()
        arrays = out.arrays()
        offset = 0
        pieces = []
        for a in arrays:
            pieces.append(vec[offset : offset + a.size].reshape(a.shape))
            offset += a.size
        n_layers = len(self.trunk_w)
        out.trunk_w = pieces[:n_layers]
        out.trunk_b = pieces[n_layers : 2 * n_layers]
        out.w_mean = pieces[2 * n_layers]
        out.b_mean = pieces[2 * n_layers + 1]
        out.w_value = pieces[2 * n_layers + 2]
        out.b_value = float(pieces[2 * n_layers + 3][0])
        out.log_std = pieces[2 * n_layers + 4]
        return out

    def copy(self) -> "PolicyParameters":
        return PolicyParameters(
            [w.copy() for w in self.trunk_w],
            [b.copy() for b in self.trunk_b],
            self.w_mean.copy(), self.b_mean.copy(),
            self.w_value.copy(), self.b_value, self.log_std.copy(),
        )

    def clamp_log_std(self):
        np.clip(self.log_std, LOG_STD_MIN, LOG_STD_MAX, out=self.log_std)


def policy_forward(params: PolicyParameters, obs: np.ndarray):
    """(action mean, log-std, value) for one observation or a batch."""
    obs = np.asarray(obs, dtype=np.float64)
    single = obs.ndim == 1
    h = np.atleast_2d(obs)
    if h.shape[1] != params.obs_dim:
        raise ContractError(f"observation length {h.shape[1]}, expected {params.obs_dim}")
    for w, b in zip(params.trunk_w, params.trunk_b):
        h = np.tanh(h @ w + b)
    mean = h @ params.w_mean + params.b_mean
    value = h @ params.w_value + params.b_value
    if not (np.isfinite(mean).all() and np.isfinite(value).all()):
        raise NumericalError("non-finite policy output")
    if single:
        return mean[0], params.log_std.copy(), float(value[0])
    return mean, params.log_std.copy(), value


def gaussian_log_prob(action, mean, log_std) -> np.ndarray:
    z = (action - mean) / np.exp(log_std)
    return -0.5 * (z * z).sum(axis=-1) - log_std.sum() - 0.5 * log_std.shape[-1] * _LOG_2PI


def gaussian_entropy(log_std: np.ndarray) -> float:
    return float(log_std.sum() + 0.5 * log_std.size * (1.0 + _LOG_2PI))


def sample_action(mean, log_std, rng: np.random.Generator, low=0.001, high=1.0):
    """Diagonal-Gaussian draw; returns (raw action, log-prob, clipped action)."""
    raw = mean + np.exp(log_std) * rng.standard_normal(mean.shape)
    logp = float(gaussian_log_prob(raw, mean, log_std))
    return raw, logp, np.clip(raw, low, high)


# ---------------------------------------------------------------------------
# Advantage estimation
# ---------------------------------------------------------------------------

def gae(rewards, values, dones, gamma, lam, bootstrap_value=0.0):
    """Generalized advantage estimates and value targets.

    ``dones[t]`` marks a terminal transition at step t; the value after a
    terminal step is zero.  Returns (advantages, targets) with
    targets = advantages + values.
    """
    rewards = np.asarray(rewards, dtype=np.float64)
    values = np.asarray(values, dtype=np.float64)
    dones = np.asarray(dones, dtype=bool)
    if not (rewards.shape == values.shape == dones.shape):
        raise ContractError("rewards, values and dones must share one length")
    t_len = len(rewards)
    adv = np.zeros(t_len)
    next_value = bootstrap_value
    running = 0.0
    for t in reversed(range(t_len)):
        not_done = 0.0 if dones[t] else 1.0
        delta = rewards[t] + gamma * next_value * not_done - values[t]
        running = delta + gamma * lam * not_done * running
        adv[t] = running
        next_value = values[t]
    return adv, adv + values


# ---------------------------------------------------------------------------
# PPO loss and its analytic gradient
# ---------------------------------------------------------------------------

@dataclass
class RolloutBatch:
    """Per-timestep data feeding the clipped-surrogate update."""

    observations: np.ndarray  # (B, n_obs), already normalized
    raw_actions: np.ndarray  # (B, n_act), before clipping
    log_probs_old: np.ndarray  # (B,)
    advantages: np.ndarray  # (B,)
    returns: np.ndarray  # (B,) value targets

    def __post_init__(self):
        b = self.observations.shape[0]
        for name in ("raw_actions", "log_probs_old", "advantages", "returns"):
            if getattr(self, name).shape[0] != b:
                raise ContractError(f"batch field {name} has inconsistent length")
        if not np.isfinite(self.advantages).all():
            raise ContractError("non-finite advantages")

    def select(self, idx) -> "RolloutBatch":
        return RolloutBatch(
            self.observations[idx], self.raw_actions[idx],
            self.log_probs_old[idx], self.advantages[idx], self.returns[idx],
        )


def clipped_surrogate(ratio, advantage, clip_eps):
    """Elementwise pessimistic surrogate min(r*A, clip(r)*A)."""
    ratio = np.asarray(ratio, dtype=np.float64)
    advantage = np.asarray(advantage, dtype=np.float64)
    return np.minimum(
        ratio * advantage,
        np.clip(ratio, 1.0 - clip_eps, 1.0 + clip_eps) * advantage,
    )


def ppo_objective(params: PolicyParameters, batch: RolloutBatch, config: PpoConfig):
    """Scalar training loss (lower is better); gradient via ppo_gradient."""
    loss, _ = ppo_gradient(params, batch, config, with_grad=False)
    return loss


def ppo_gradient(
    params: PolicyParameters, batch: RolloutBatch, config: PpoConfig, with_grad=True
):
    """Loss and its gradient in the layout of ``params.arrays()``."""
    obs = batch.observations
    b = obs.shape[0]

    # forward, keeping activations for the backward pass
    hs = [obs]
    h = obs
    for w, bias in zip(params.trunk_w, params.trunk_b):
        h = np.tanh(h @ w + bias)
        hs.append(h)
    mean = h @ params.w_mean + params.b_mean
    value = h @ params.w_value + params.b_value
    log_std = params.log_std
    std = np.exp(log_std)
    z = (batch.raw_actions - mean) / std
    logp = -0.5 * (z * z).sum(axis=1) - log_std.sum() - 0.5 * log_std.size * _LOG_2PI

    ratio = np.exp(logp - batch.log_probs_old)
    adv = batch.advantages
    t1 = ratio * adv
    clipped = np.clip(ratio, 1.0 - config.clip_eps, 1.0 + config.clip_eps)
    t2 = clipped * adv
    surrogate = np.minimum(t1, t2)
    value_err = value - batch.returns
    entropy = gaussian_entropy(log_std)
    loss = (
        -surrogate.mean()
        + config.value_coef * (value_err**2).mean()
        - config.entropy_coef * entropy
    )
    if not np.isfinite(loss):
        raise NumericalError("non-finite PPO loss; aborting the update")
    if not with_grad:
        return float(loss), None

    # backward
    use_t1 = t1 <= t2
    inside_clip = (ratio > 1.0 - config.clip_eps) & (ratio < 1.0 + config.clip_eps)
    dsurr_dratio = np.where(use_t1, adv, adv * inside_clip)
    g_logp = -(1.0 / b) * dsurr_dratio * ratio  # d loss / d logp
    g_mean = g_logp[:, None] * (z / std)
    g_log_std = (g_logp[:, None] * (z * z - 1.0)).sum(axis=0) - config.entropy_coef
    g_value = config.value_coef * 2.0 * value_err / b

    g_w_mean = hs[-1].T @ g_mean
    g_b_mean = g_mean.sum(axis=0)
    g_w_value = hs[-1].T @ g_value
    g_b_value = g_value.sum()
    g_h = g_mean @ params.w_mean.T + np.outer(g_value, params.w_value)

    g_trunk_w, g_trunk_b = [], []
    for layer in reversed(range(len(params.trunk_w))):
        g_pre = g_h * (1.0 - hs[layer + 1] ** 2)
        g_trunk_w.append(hs[layer].T @ g_pre)
        g_trunk_b.append(g_pre.sum(axis=0))
        g_h = g_pre @ params.trunk_w[layer].T
    g_trunk_w.reverse()
    g_trunk_b.reverse()

    grads = [
        *g_trunk_w, *g_trunk_b,
        g_w_mean, g_b_mean, g_w_value,
        np.array([g_b_value]), g_log_std,
    ]
    return float(loss), grads


# ---------------------------------------------------------------------------
# Adam optimizer and the update loop
# ---------------------------------------------------------------------------

class AdamState:
    def __init__(self, params: PolicyParameters, beta1=0.9, beta2=0.999, eps=1e-8):
        self.m = [np.zeros_like(a) for a in params.arrays()]
        self.v = [np.zeros_like(a) for a in params.arrays()]
        self.t = 0
        self.beta1, self.beta2, self.eps = beta1, beta2, eps

    def step(self, params: PolicyParameters, grads, lr: float):
        self.t += 1
        arrays = params.arrays()
        updated = []
        for i, (a, g) in enumerate(zip(arrays, grads)):
            self.m[i] = self.beta1 * self.m[i] + (1 - self.beta1) * g
            self.v[i] = self.beta2 * self.v[i] + (1 - self.beta2) * g * g
            m_hat = self.m[i] / (1 - self.beta1**self.t)
            v_hat = self.v[i] / (1 - self.beta2**self.t)
            updated.append(a - lr * m_hat / (np.sqrt(v_hat) + self.eps))
        n_layers = len(params.trunk_w)
        params.trunk_w = updated[:n_layers]
        params.trunk_b = updated[n_layers : 2 * n_layers]
        params.w_mean = updated[2 * n_layers]
        params.b_mean = updated[2 * n_layers + 1]
        params.w_value = updated[2 * n_layers + 2]
        params.b_value = float(updated[2 * n_layers + 3][0])
        params.log_std = updated[2 * n_layers + 4]
        params.clamp_log_std()


def clip_gradients(grads, max_norm: float):
    total = np.sqrt(sum(float((g * g).sum()) for g in grads))
    if total > max_norm > 0:
        scale = max_norm / total
        grads = [g * scale for g in grads]
    return grads


def normalize_advantages(adv: np.ndarray) -> np.ndarray:
    return (adv - adv.mean()) / (adv.std() + 1e-8)


def update(
    params: PolicyParameters,
    adam: AdamState,
    batch: RolloutBatch,
    config: PpoConfig,
    rng: np.random.Generator,
) -> PolicyParameters:
    """K epochs of shuffled minibatch Adam steps; returns the new theta.

    The incoming ``params`` object is mutated in place and also returned;
    theta_old is implicit in ``batch.log_probs_old``.
    """
    n = batch.observations.shape[0]
    for _ in range(config.epochs):
        order = rng.permutation(n)
        for start in range(0, n, config.minibatch_size):
            idx = order[start : start + config.minibatch_size]
            mini = batch.select(idx)
            mini.advantages = normalize_advantages(mini.advantages)
            _, grads = ppo_gradient(params, mini, config)
            grads = clip_gradients(grads, config.max_grad_norm)
            adam.step(params, grads, config.learning_rate)
    return params


# ---------------------------------------------------------------------------
# Observation normalization and the agent facade
# ---------------------------------------------------------------------------

class RunningNormalizer:
    """Running mean/variance standardization; can be frozen at a fidelity
    switch so the transferred policy keeps seeing consistent inputs."""

    def __init__(self, dim: int, eps: float = 1e-8):
        self.mean = np.zeros(dim)
        self.var = np.ones(dim)
        self.count = 0.0
        self.eps = eps
        self.frozen = False

    def update(self, batch: np.ndarray):
        if self.frozen:
            return
        batch = np.atleast_2d(batch)
        b_mean = batch.mean(axis=0)
        b_var = batch.var(axis=0)
        b_count = batch.shape[0]
        if self.count == 0:
            self.mean, self.var, self.count = b_mean, np.maximum(b_var, self.eps), float(b_count)
            return
        total = self.count + b_count
        delta = b_mean - self.mean
        new_mean = self.mean + delta * b_count / total
        m_a = self.var * self.count
        m_b = b_var * b_count
        new_var = (m_a + m_b + delta**2 * self.count * b_count / total) / total
        self.mean, self.var, self.count = new_mean, np.maximum(new_var, self.eps), total

    def normalize(self, obs: np.ndarray) -> np.ndarray:
        return (obs - self.mean) / np.sqrt(self.var + self.eps)


class PpoAgent:
    """Policy parameters + optimizer + normalizer behind a small interface."""

    def __init__(self, obs_dim: int, act_dim: int, config: PpoConfig, seed: int):
        self.config = config
        rng = np.random.default_rng(seed)
        self.params = PolicyParameters.initialize(
            obs_dim, act_dim, config.hidden_sizes, rng, config.init_log_std
        )
        self.adam = AdamState(self.params)
        self.normalizer = RunningNormalizer(obs_dim)
        self.update_rng = np.random.default_rng((seed, 0x5EED))
        self.episodes_seen = 0

    def act(self, obs: np.ndarray, rng: np.random.Generator):
        """(raw action, log-prob, clipped action, value) for one stochastic step."""
        norm = self.normalizer.normalize(obs)
        mean, log_std, value = policy_forward(self.params, norm)
        raw, logp, clipped = sample_action(mean, log_std, rng)
        return raw, logp, clipped, value

    def act_deterministic(self, obs: np.ndarray) -> np.ndarray:
        norm = self.normalizer.normalize(obs)
        mean, _, _ = policy_forward(self.params, norm)
        return np.clip(mean, 0.001, 1.0)

    def value(self, obs: np.ndarray) -> float:
        norm = self.normalizer.normalize(obs)
        return policy_forward(self.params, norm)[2]

    def learn(self, batch: RolloutBatch):
        update(self.params, self.adam, batch, self.config, self.update_rng)


def evaluate_policy_return(agent_policy, fields, config) -> float:
    """Mean deterministic episode return over a vector of permeability samples."""
    from .environment import episode_return

    if not fields:
        raise ContractError("need at least one permeability sample")
    return float(np.mean([episode_return(agent_policy, f, config) for f in fields]))


# ---------------------------------------------------------------------------
# Checkpoints
# ---------------------------------------------------------------------------

CHECKPOINT_VERSION = 1


def save_checkpoint(agent: PpoAgent, path) -> None:
    """Versioned binary of parameters, optimizer moments, normalization
    statistics and the episode counter."""
    p = agent.params
    n_layers = len(p.trunk_w)
    payload = {
        "version": CHECKPOINT_VERSION,
        "n_layers": n_layers,
        "b_value": p.b_value,
        "adam_t": agent.adam.t,
        "norm_mean": agent.normalizer.mean,
        "norm_var": agent.normalizer.var,
        "norm_count": agent.normalizer.count,
        "norm_frozen": int(agent.normalizer.frozen),
        "episodes_seen": agent.episodes_seen,
        "w_mean": p.w_mean, "b_mean": p.b_mean,
        "w_value": p.w_value, "log_std": p.log_std,
    }
    for i in range(n_layers):
        payload[f"trunk_w_{i}"] = p.trunk_w[i]
        payload[f"trunk_b_{i}"] = p.trunk_b[i]
    for i, (m, v) in enumerate(zip(agent.adam.m, agent.adam.v)):
        payload[f"adam_m_{i}"] = m
        payload[f"adam_v_{i}"] = v
    np.savez(path, **payload)


def load_checkpoint(path, config: PpoConfig) -> PpoAgent:
    data = np.load(path, allow_pickle=False)
    if int(data["version"]) != CHECKPOINT_VERSION:
        raise ContractError(f"unsupported checkpoint version {int(data['version'])}")
    n_layers = int(data["n_layers"])
    trunk_w = [data[f"trunk_w_{i}"] for i in range(n_layers)]
    trunk_b = [data[f"trunk_b_{i}"] for i in range(n_layers)]
    params = PolicyParameters(
        trunk_w, trunk_b, data["w_mean"], data["b_mean"],
        data["w_value"], float(data["b_value"]), data["log_std"],
    )
    agent = PpoAgent(params.obs_dim, params.act_dim, config, seed=0)
    agent.params = params
    agent.adam = AdamState(params)
    agent.adam.t = int(data["adam_t"])
    agent.adam.m = [data[f"adam_m_{i}"] for i in range(len(params.arrays()))]
    agent.adam.v = [data[f"adam_v_{i}"] for i in range(len(params.arrays()))]
    agent.normalizer.mean = data["norm_mean"]
    agent.normalizer.var = data["norm_var"]
    agent.normalizer.count = float(data["norm_count"])
    agent.normalizer.frozen = bool(int(data["norm_frozen"]))
    agent.episodes_seen = int(data["episodes_seen"])
    return agent
