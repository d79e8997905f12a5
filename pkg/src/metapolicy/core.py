"""Environment/policy contracts, the rollout engine and return statistics."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Any

import numpy as np

from .errors import ConfigError, DomainError


class Env:
    """Finite-horizon MDP with a ``reset``/``step`` contract.

    Subclasses set ``obs_dim``, ``horizon``, ``obs_low``/``obs_high`` and either
    ``action_count`` (discrete) or ``action_dim`` (continuous, with
    ``action_count = None``), then implement ``_reset`` and ``_step``.
    """

    obs_dim: int
    horizon: int
    action_count: int | None = None
    action_dim: int = 1
    obs_low: np.ndarray
    obs_high: np.ndarray

    def __init__(self) -> None:
        self.t = 0
        self.done = True

    def reset(self, rng: np.random.Generator) -> np.ndarray:
        self.t = 0
        self.done = False
        return self._reset(rng)

    def step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        if self.done:
            raise DomainError("step() called on a finished episode; call reset()")
        obs, reward, terminal, info = self._step(action)
        self.t += 1
        info = dict(info)
        info["terminal"] = bool(terminal)
        self.done = bool(terminal) or self.t >= self.horizon
        return obs, float(reward), self.done, info

    def _reset(self, rng: np.random.Generator) -> np.ndarray:
        raise NotImplementedError

    def _step(self, action) -> tuple[np.ndarray, float, bool, dict]:
        raise NotImplementedError


class Policy:
    """Uniform ``act(observation, memory) -> action`` contract.

    ``reset`` returns the per-episode memory (``None`` for memory-less
    policies); ``act`` returns ``(action, new_memory)``.
    """

    kind: str = "policy"
    obs_dim: int
    action_count: int | None = None
    recurrent: bool = False

    def reset(self, rng: np.random.Generator) -> Any:
        return None

    def act(self, obs: np.ndarray, memory: Any, rng: np.random.Generator) -> tuple[Any, Any]:
        raise NotImplementedError


@dataclass
class Trajectory:
    observations: np.ndarray  # (T + 1, obs_dim): initial plus post-step observations
    actions: np.ndarray  # (T,) int or (T, m) float
    rewards: np.ndarray  # (T,)
    terminal: bool  # ended by the environment, not by the horizon
    env_steps: int
    infos: list[dict] = field(default_factory=list)
    seed: int = 0

    @property
    def episode_return(self) -> float:
        return float(np.sum(self.rewards))

    @property
    def success(self) -> bool:
        return bool(self.infos and self.infos[-1].get("success", False))


@dataclass
class RolloutBatch:
    trajectories: list[Trajectory]
    total_steps: int
    seed_base: int

    def __len__(self) -> int:
        return len(self.trajectories)

    def returns(self) -> np.ndarray:
        return np.array([tr.episode_return for tr in self.trajectories])

    def success_rate(self) -> float:
        return float(np.mean([tr.success for tr in self.trajectories]))


def child_seed(seed_base: int, index: int) -> int:
    """Seed of trajectory ``index`` in a batch.

    The 64-bit child seed is the first word of ``numpy.random.SeedSequence``
    entropy-mixed from ``(seed_base, index)``; it depends on nothing else, so
    trajectories can be generated in any order or in parallel.
    """
    ss = np.random.SeedSequence([int(seed_base) & 0xFFFFFFFFFFFFFFFF, int(index)])
    return int(ss.generate_state(1, dtype=np.uint64)[0])


def check_compatible(env: Env, policy: Policy) -> None:
    if policy.obs_dim != env.obs_dim:
        raise ConfigError(
            f"policy expects {policy.obs_dim}-dim observations, env emits {env.obs_dim}"
        )
    if env.action_count is not None and policy.action_count is not None:
        if policy.action_count != env.action_count:
            raise ConfigError(
                f"policy has {policy.action_count} actions, env expects {env.action_count}"
            )
    if (env.action_count is None) != (policy.action_count is None):
        raise ConfigError("discrete/continuous action space mismatch")


def rollout(env: Env, policy: Policy, seed: int) -> Trajectory:
    """Run one episode; all randomness derives from ``seed``."""
    if env.horizon < 1:
        raise ConfigError("horizon must be >= 1")
    check_compatible(env, policy)
    env_rng, pol_rng = np.random.default_rng(seed).spawn(2)
    obs = env.reset(env_rng)
    memory = policy.reset(pol_rng)
    observations = [obs]
    actions = []
    rewards = []
    infos = []
    done = False
    info: dict = {}
    while not done:
        action, memory = policy.act(obs, memory, pol_rng)
        obs, reward, done, info = env.step(action)
        observations.append(obs)
        actions.append(action)
        rewards.append(reward)
        infos.append(info)
    if env.action_count is None:
        acts = np.asarray(actions, dtype=float).reshape(len(actions), -1)
    else:
        acts = np.asarray(actions, dtype=np.int64)
    return Trajectory(
        observations=np.asarray(observations, dtype=float),
        actions=acts,
        rewards=np.asarray(rewards, dtype=float),
        terminal=bool(info.get("terminal", False)),
        env_steps=len(rewards),
        infos=infos,
        seed=seed,
    )


def batch_rollouts(env: Env, policy: Policy, min_total_steps: int, seed_base: int) -> RolloutBatch:
    """Collect independent episodes until at least ``min_total_steps`` steps."""
    if min_total_steps < 1:
        raise ConfigError("min_total_steps must be >= 1")
    trajectories = []
    total = 0
    i = 0
    while total < min_total_steps:
        tr = rollout(env, policy, child_seed(seed_base, i))
        trajectories.append(tr)
        total += tr.env_steps
        i += 1
    return RolloutBatch(trajectories=trajectories, total_steps=total, seed_base=seed_base)


def discounted_returns(rewards, gamma: float) -> np.ndarray:
    """``out[t] = sum_{k >= t} gamma**(k - t) * rewards[k]`` by backward recursion."""
    if not 0.0 <= gamma <= 1.0:
        raise ConfigError(f"gamma must lie in [0, 1], got {gamma}")
    rewards = np.asarray(rewards, dtype=float)
    if rewards.size == 0:
        raise DomainError("rewards must be non-empty")
    out = np.empty_like(rewards)
    acc = 0.0
    for t in range(rewards.size - 1, -1, -1):
        acc = rewards[t] + gamma * acc
        out[t] = acc
    return out


def mean_return(batch: RolloutBatch) -> float:
    if not batch.trajectories:
        raise DomainError("empty batch")
    return float(np.mean(batch.returns()))
