"""PPO-clip with a squashed diagonal Gaussian policy over bounded actions.

The policy draws a pre-action ``u ~ N(loc(obs), std^2)`` per dimension and maps
it onto ``[0, bound]`` with ``a = bound * sigmoid(u)``. The standard deviation is
not learned; it follows the exploration schedule and is recorded with every
sample so that probability ratios are computed under the same std that produced
the data. Because ratios compare two densities at the same stored ``u``, the
squash Jacobian cancels in the ratio.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from epictrl.nn import (AdamState, Network, TrainingError, adam_step, forward, gradients,
                        init_network)

LOG_2PI = math.log(2.0 * math.pi)


class IncompleteBufferError(ValueError):
    """Buffer does not hold the number of complete episodes an update needs."""


@dataclass(frozen=True)
class PPOConfig:
    gamma: float = 0.99
    gae_lambda: float = 0.95
    clip_epsilon: float = 0.2
    k_epochs: int = 20
    actor_lr: float = 3e-4
    critic_lr: float = 3e-4
    initial_std: float = 0.4
    final_std: float = 0.05
    decay_rate: float = 0.0046
    decay_frequency: int = 1000
    normalize_advantages: bool = True
    hidden: tuple = (64, 64)

    def __post_init__(self):
        if not (0.0 <= self.gamma <= 1.0 and 0.0 <= self.gae_lambda <= 1.0):
            raise ValueError("gamma and gae_lambda must lie in [0, 1]")
        if self.clip_epsilon <= 0:
            raise ValueError("clip_epsilon must be positive")
        if self.k_epochs < 0:
            raise ValueError("k_epochs must be non-negative")
        if not 0 < self.final_std <= self.initial_std:
            raise ValueError("need 0 < final_std <= initial_std")
        if self.decay_frequency < 1 or self.decay_rate < 0:
            raise ValueError("decay_frequency must be >= 1 and decay_rate >= 0")

    def to_dict(self) -> dict:
        d = dict(self.__dict__)
        d["hidden"] = list(self.hidden)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "PPOConfig":
        d = dict(d)
        if "hidden" in d:
            d["hidden"] = tuple(d["hidden"])
        return cls(**d)


def exploration_std(timesteps: int, cfg: PPOConfig = PPOConfig()) -> float:
    """Linear decay by ``decay_rate`` every ``decay_frequency`` steps, floored."""
    steps = timesteps // cfg.decay_frequency
    return max(cfg.final_std, cfg.initial_std - cfg.decay_rate * steps)


# -- policy -----------------------------------------------------------------------

def _sigmoid(u):
    return 0.5 * (1.0 + np.tanh(0.5 * u))


def _log_sigmoid(u):
    return -np.logaddexp(0.0, -u)


def squash(u, bounds) -> np.ndarray:
    return np.asarray(bounds, dtype=float) * _sigmoid(np.asarray(u, dtype=float))


def unsquash(a, bounds) -> np.ndarray:
    p = np.asarray(a, dtype=float) / np.asarray(bounds, dtype=float)
    return np.log(p) - np.log1p(-p)


def gaussian_log_prob(u, loc, std) -> np.ndarray:
    """Log-density of the pre-action, summed over the last axis."""
    z = (np.asarray(u) - loc) / std
    return np.sum(-0.5 * z * z - np.log(std) - 0.5 * LOG_2PI, axis=-1)


def log_jacobian(u, bounds) -> np.ndarray:
    """``log |da/du|`` summed over dimensions, for ``a = bound * sigmoid(u)``."""
    u = np.asarray(u, dtype=float)
    return np.sum(np.log(bounds) + _log_sigmoid(u) + _log_sigmoid(-u), axis=-1)


def log_prob(actor: Network, obs, action, std: float, bounds) -> np.ndarray:
    """Exact log-density of a bounded action under the squashed policy."""
    u = unsquash(action, bounds)
    return gaussian_log_prob(u, forward(actor, obs), std) - log_jacobian(u, bounds)


def sample_action(actor: Network, obs, std: float, bounds, rng: np.random.Generator):
    """Return ``(action, log_prob, u)``.

    ``std == 0`` gives the deterministic squashed mean with log-probability 0.
    """
    if std < 0:
        raise ValueError("std must be non-negative")
    bounds = np.asarray(bounds, dtype=float)
    loc = forward(actor, obs)
    if std == 0:
        return squash(loc, bounds), 0.0, loc
    u = loc + std * rng.standard_normal(loc.shape)
    lp = gaussian_log_prob(u, loc, std) - log_jacobian(u, bounds)
    return squash(u, bounds), float(lp), u


def init_actor(obs_dim: int, act_dim: int, rng: np.random.Generator,
               hidden=(64, 64)) -> Network:
    net = init_network([obs_dim, *hidden, act_dim], rng)
    net.weights[-1] *= 0.01
    return net


def init_critic(in_dim: int, rng: np.random.Generator, hidden=(64, 64)) -> Network:
    return init_network([in_dim, *hidden, 1], rng)


# -- advantages and the clipped objective ------------------------------------------

@dataclass
class AdvantageBatch:
    advantages: np.ndarray
    returns: np.ndarray
    normalized: bool = False


def gae(rewards, values, dones, gamma: float, lam: float,
        last_value: float = 0.0) -> AdvantageBatch:
    """Generalized advantage estimates; the bootstrap after a done step is 0.

    ``last_value`` bootstraps a trailing unfinished step. Returns are
    ``advantages + values``.
    """
    r = np.asarray(rewards, dtype=float)
    v = np.asarray(values, dtype=float)
    d = np.asarray(dones, dtype=bool)
    if not (len(r) == len(v) == len(d)):
        raise ValueError("rewards, values and dones must have equal length")
    adv = np.zeros(len(r))
    running = 0.0
    next_v = last_value
    for t in range(len(r) - 1, -1, -1):
        if d[t]:
            next_v = 0.0
            running = 0.0
        delta = r[t] + gamma * next_v - v[t]
        running = delta + gamma * lam * running
        adv[t] = running
        next_v = v[t]
    return AdvantageBatch(adv, adv + v)


def normalize(batch: AdvantageBatch) -> AdvantageBatch:
    a = batch.advantages
    sd = a.std()
    if len(a) < 2 or sd == 0:
        return AdvantageBatch(a - a.mean(), batch.returns, True)
    return AdvantageBatch((a - a.mean()) / (sd + 1e-8), batch.returns, True)


def clip_g(eps: float, A):
    """``(1+eps)A`` for non-negative advantages, ``(1-eps)A`` otherwise."""
    A = np.asarray(A, dtype=float)
    out = np.where(A >= 0, (1.0 + eps) * A, (1.0 - eps) * A)
    return float(out) if out.ndim == 0 else out


def clipped_objective(ratios, advantages, eps: float) -> np.ndarray:
    """Per-step ``min(r * A, g(eps, A))``."""
    r = np.asarray(ratios, dtype=float)
    if not np.all(np.isfinite(r)):
        raise TrainingError("non-finite probability ratio")
    A = np.asarray(advantages, dtype=float)
    return np.minimum(r * A, clip_g(eps, A))


def surrogate_loss(ratios, advantages, eps: float) -> float:
    """Negated batch mean of the clipped objective."""
    return -float(np.mean(clipped_objective(ratios, advantages, eps)))


# -- rollout storage ----------------------------------------------------------------

@dataclass
class Buffer:
    """One agent's trajectories since its last update."""

    obs: list = field(default_factory=list)
    critic_obs: list = field(default_factory=list)
    pre_actions: list = field(default_factory=list)
    log_probs: list = field(default_factory=list)
    rewards: list = field(default_factory=list)
    values: list = field(default_factory=list)
    dones: list = field(default_factory=list)
    stds: list = field(default_factory=list)

    def add(self, obs, critic_obs, u, logp, reward, value, done, std):
        if not np.isfinite(logp):
            raise TrainingError("non-finite log-probability at sampling time")
        self.obs.append(np.asarray(obs, dtype=float))
        self.critic_obs.append(np.asarray(critic_obs, dtype=float))
        self.pre_actions.append(np.asarray(u, dtype=float))
        self.log_probs.append(float(logp))
        self.rewards.append(float(reward))
        self.values.append(float(value))
        self.dones.append(bool(done))
        self.stds.append(float(std))

    def __len__(self):
        return len(self.rewards)

    def episodes(self) -> int:
        return int(sum(self.dones))

    def complete(self) -> bool:
        return len(self) > 0 and self.dones[-1]

    def truncate_to_last_done(self):
        """Drop any trailing steps of an unfinished episode."""
        keep = len(self)
        while keep and not self.dones[keep - 1]:
            keep -= 1
        for name in self.__dataclass_fields__:
            del getattr(self, name)[keep:]

    def clear(self):
        for name in self.__dataclass_fields__:
            getattr(self, name).clear()


@dataclass
class UpdateDiagnostics:
    mean_ratio: float
    clip_fraction: float
    policy_loss: float
    value_loss: float
    entropy: float
    mean_episode_reward: float
    advantages_normalized: bool
    epochs: int


def _policy_terms(actor, obs, u, old_logp, std, adv, eps):
    loc = forward(actor, obs)
    new_logp = gaussian_log_prob(u, loc, std[:, None])
    # the squash Jacobian is identical in both densities and cancels
    ratio = np.exp(new_logp - old_logp)
    obj = clipped_objective(ratio, adv, eps)
    return loc, ratio, obj


def update(actor: Network, critic: Network, actor_opt: AdamState, critic_opt: AdamState,
           buffer: Buffer, cfg: PPOConfig, bounds, episodes: int | None = None):
    """Run ``k_epochs`` full-batch actor and critic steps on ``buffer``.

    ``episodes`` optionally asserts how many complete episodes the buffer must
    hold. Returns ``(actor, critic, actor_opt, critic_opt, diagnostics)``; the
    buffer is left untouched.
    """
    if not buffer.complete():
        raise IncompleteBufferError("buffer must end with a completed episode")
    if episodes is not None and buffer.episodes() != episodes:
        raise IncompleteBufferError(f"buffer holds {buffer.episodes()} episodes, update needs {episodes}")
    obs = np.stack(buffer.obs)
    cobs = np.stack(buffer.critic_obs)
    u = np.stack(buffer.pre_actions)
    std = np.asarray(buffer.stds)
    bounds = np.asarray(bounds, dtype=float)
    # stored log-probs include the Jacobian; remove it to compare pre-action densities
    old_logp = np.asarray(buffer.log_probs) + log_jacobian(u, bounds)
    values = np.asarray(buffer.values)
    batch = gae(buffer.rewards, values, buffer.dones, cfg.gamma, cfg.gae_lambda)
    if cfg.normalize_advantages:
        batch = normalize(batch)
    adv, ret = batch.advantages, batch.returns
    n = len(adv)
    eps = cfg.clip_epsilon

    ratios = np.ones(n)
    pol_loss = val_loss = float("nan")
    for _ in range(cfg.k_epochs):
        loc, ratios, obj = _policy_terms(actor, obs, u, old_logp, std, adv, eps)
        pol_loss = -float(obj.mean())
        # gradient flows only where the unclipped branch is selected
        active = ratios * adv < clip_g(eps, adv)
        coef = np.where(active, adv * ratios, 0.0) / n
        dloc = -coef[:, None] * (u - loc) / (std[:, None] ** 2)
        actor_opt, actor = adam_step(actor_opt, actor, gradients(actor, obs, dloc))

        v = forward(critic, cobs)[:, 0]
        err = v - ret
        val_loss = float(np.mean(err * err))
        critic_opt, critic = adam_step(critic_opt, critic,
                                       gradients(critic, cobs, (2.0 * err / n)[:, None]))

    if cfg.k_epochs:
        _, ratios, _ = _policy_terms(actor, obs, u, old_logp, std, adv, eps)
    ep_rewards = _episode_returns(buffer.rewards, buffer.dones)
    act_dim = u.shape[1]
    entropy = float(np.mean(act_dim * (0.5 * (1.0 + LOG_2PI) + np.log(std))))
    diag = UpdateDiagnostics(
        mean_ratio=float(ratios.mean()),
        clip_fraction=float(np.mean(np.abs(ratios - 1.0) > eps)),
        policy_loss=pol_loss, value_loss=val_loss, entropy=entropy,
        mean_episode_reward=float(np.mean(ep_rewards)) if ep_rewards else float("nan"),
        advantages_normalized=batch.normalized, epochs=cfg.k_epochs)
    return actor, critic, actor_opt, critic_opt, diag


def _episode_returns(rewards, dones) -> list:
    out, acc = [], 0.0
    for r, d in zip(rewards, dones):
        acc += r
        if d:
            out.append(acc)
            acc = 0.0
    return out
