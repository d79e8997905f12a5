"""Passive and bandit composition baselines: voting, transition-density confidence, UCB1."""

from __future__ import annotations

import math
from collections import deque
from dataclasses import dataclass, field

import numpy as np
from scipy.special import logsumexp

from .core import Env, Policy, child_seed, rollout
from .errors import ConfigError, DomainError

CONFIDENCE_EPS = 1e-12


class VotingEnsemble(Policy):
    """Sample an action with probability (number of members choosing it) / k."""

    kind = "voting"

    def __init__(self, policies: list[Policy]) -> None:
        if not policies:
            raise ConfigError("voting needs at least one policy")
        self.policies = list(policies)
        self.obs_dim = policies[0].obs_dim
        self.action_count = policies[0].action_count
        self.recurrent = any(p.recurrent for p in policies)

    def reset(self, rng):
        return [p.reset(rng) for p in self.policies]

    def act(self, obs, memory, rng):
        if memory is None:
            memory = [None] * len(self.policies)
        votes = []
        new_memory = []
        for p, m in zip(self.policies, memory):
            a, m = p.act(obs, m, rng)
            votes.append(a)
            new_memory.append(m)
        return votes[int(rng.integers(len(votes)))], new_memory


def vote(ensemble: VotingEnsemble, observation, rng: np.random.Generator) -> int:
    """One voting decision for memory-less members."""
    action, _ = ensemble.act(observation, None, rng)
    return action


def embed_transition(s, a: int, s_next, n_actions: int, obs_low, obs_high) -> np.ndarray:
    """``[normalized s, one-hot a, normalized s']``."""
    center = 0.5 * (np.asarray(obs_high) + np.asarray(obs_low))
    half = 0.5 * (np.asarray(obs_high) - np.asarray(obs_low))
    onehot = np.zeros(n_actions)
    onehot[int(a)] = 1.0
    return np.concatenate([(np.asarray(s) - center) / half, onehot, (np.asarray(s_next) - center) / half])


class TransitionKDE:
    """Product-Gaussian kernel density over embedded transitions."""

    def __init__(self, samples, bandwidths) -> None:
        self.samples = np.atleast_2d(np.asarray(samples, dtype=float))
        self.bandwidths = np.asarray(bandwidths, dtype=float)
        self.n, self.dim = self.samples.shape
        self._log_norm = -np.sum(np.log(self.bandwidths)) - 0.5 * self.dim * math.log(2.0 * math.pi)
        self._scaled = self.samples / self.bandwidths

    @classmethod
    def fit(cls, samples, ranges, floor_fraction: float = 1e-3) -> "TransitionKDE":
        """Scott's rule ``sigma_d n^(-1/(d+4))`` per dimension, floored at a fraction of the range."""
        samples = np.atleast_2d(np.asarray(samples, dtype=float))
        n, d = samples.shape
        if n < 1:
            raise DomainError("need at least one sample")
        sigma = samples.std(axis=0) if n > 1 else np.zeros(d)
        h = sigma * n ** (-1.0 / (d + 4))
        floor = floor_fraction * np.asarray(ranges, dtype=float)
        return cls(samples, np.maximum(h, floor))

    def log_density(self, x) -> np.ndarray:
        x = np.atleast_2d(np.asarray(x, dtype=float)) / self.bandwidths
        out = np.empty(x.shape[0])
        # direct differences (no |q|^2 + |s|^2 - 2 q.s expansion) keep far tails accurate
        chunk = max(1, 4_000_000 // max(self.n * self.dim, 1))
        for i in range(0, x.shape[0], chunk):
            diff = x[i : i + chunk, None, :] - self._scaled[None, :, :]
            d2 = np.einsum("qnd,qnd->qn", diff, diff)
            out[i : i + chunk] = logsumexp(-0.5 * d2, axis=1) - math.log(self.n) + self._log_norm
        return out

    def density(self, x) -> np.ndarray:
        return np.exp(self.log_density(x))


def fit_transition_kde(trajectories, n_actions: int, obs_low, obs_high) -> TransitionKDE:
    """KDE over every ``(s_t, a_t, s_{t+1})`` in the given rollouts."""
    rows = []
    for tr in trajectories:
        for t in range(tr.env_steps):
            rows.append(embed_transition(tr.observations[t], tr.actions[t], tr.observations[t + 1],
                                         n_actions, obs_low, obs_high))
    if len(rows) < 2:
        raise DomainError("need at least two transitions")
    obs_dim = len(obs_low)
    ranges = np.concatenate([np.full(obs_dim, 2.0), np.ones(n_actions), np.full(obs_dim, 2.0)])
    return TransitionKDE.fit(np.array(rows), ranges)


def confidence_weights(kdes: list[TransitionKDE], transitions) -> np.ndarray:
    """Selection probabilities proportional to ``density + eps`` (product over the window)."""
    if not transitions:
        return np.full(len(kdes), 1.0 / len(kdes))
    x = np.atleast_2d(np.asarray(transitions, dtype=float))
    log_conf = np.array([
        np.logaddexp(kde.log_density(x), math.log(CONFIDENCE_EPS)).sum() for kde in kdes
    ])
    w = np.exp(log_conf - log_conf.max())
    return w / w.sum()


def confidence_select(kdes: list[TransitionKDE], prev_transition, rng: np.random.Generator) -> int:
    weights = confidence_weights(kdes, [] if prev_transition is None else [prev_transition])
    return int(rng.choice(len(kdes), p=weights))


class ConfidencePolicy(Policy):
    """Act with the basis policy whose transition density best explains recent history."""

    kind = "confidence"

    def __init__(self, policies: list[Policy], kdes: list[TransitionKDE], obs_low, obs_high,
                 window: int = 1) -> None:
        if len(policies) != len(kdes):
            raise ConfigError("one KDE per basis policy")
        self.policies = list(policies)
        self.kdes = list(kdes)
        self.obs_dim = policies[0].obs_dim
        self.action_count = policies[0].action_count
        self.recurrent = True
        self.obs_low = np.asarray(obs_low, dtype=float)
        self.obs_high = np.asarray(obs_high, dtype=float)
        self.window = int(window)

    def reset(self, rng):
        return {"prev": None, "history": deque(maxlen=self.window),
                "mem": [p.reset(rng) for p in self.policies]}

    def act(self, obs, memory, rng):
        if memory is None:
            memory = self.reset(rng)
        if memory["prev"] is not None:
            s_prev, a_prev = memory["prev"]
            memory["history"].append(embed_transition(
                s_prev, a_prev, obs, self.action_count, self.obs_low, self.obs_high))
        weights = confidence_weights(self.kdes, list(memory["history"]))
        k = int(rng.choice(len(self.policies), p=weights))
        action = None
        for i, p in enumerate(self.policies):
            if i == k or p.recurrent:
                a, memory["mem"][i] = p.act(obs, memory["mem"][i], rng)
                if i == k:
                    action = a
        memory["prev"] = (np.array(obs, dtype=float), action)
        return action, memory


@dataclass
class UCBState:
    n_arms: int
    low: float
    high: float
    counts: np.ndarray = field(init=False)
    means: np.ndarray = field(init=False)
    t: int = 0

    def __post_init__(self):
        if self.n_arms < 1:
            raise ConfigError("need at least one arm")
        if not self.high > self.low:
            raise ConfigError("normalization bounds must satisfy high > low")
        self.counts = np.zeros(self.n_arms, dtype=np.int64)
        self.means = np.zeros(self.n_arms)

    def normalize(self, value: float) -> float:
        return min(max((value - self.low) / (self.high - self.low), 0.0), 1.0)

    def update(self, arm: int, episode_return: float) -> None:
        if not 0 <= arm < self.n_arms:
            raise DomainError(f"arm {arm} out of range")
        x = self.normalize(episode_return)
        self.t += 1
        self.counts[arm] += 1
        self.means[arm] += (x - self.means[arm]) / self.counts[arm]

    def select(self) -> int:
        unpulled = np.flatnonzero(self.counts == 0)
        if unpulled.size:
            return int(unpulled[0])
        index = self.means + np.sqrt(2.0 * math.log(self.t) / self.counts)
        return int(np.argmax(index))


def ucb_round(state: UCBState, last_result: tuple[int, float] | None) -> int:
    if last_result is not None:
        state.update(*last_result)
    return state.select()


@dataclass
class UCBRun:
    pulls: list[int]
    returns: list[float]
    steps: list[int]
    counts: np.ndarray

    @property
    def most_pulled(self) -> int:
        return int(np.argmax(self.counts))


def run_ucb(env: Env, arms: list[Policy], budget_steps: int, seed: int, low: float, high: float) -> UCBRun:
    """Pull arms (one episode each) until ``budget_steps`` env steps have been used."""
    state = UCBState(len(arms), low, high)
    pulls, rets, steps = [], [], []
    used = 0
    last = None
    i = 0
    while used < budget_steps:
        arm = ucb_round(state, last)
        tr = rollout(env, arms[arm], child_seed(seed, i))
        last = (arm, tr.episode_return)
        pulls.append(arm)
        rets.append(tr.episode_return)
        used += tr.env_steps
        steps.append(used)
        i += 1
    state.update(*last)
    return UCBRun(pulls, rets, steps, state.counts.copy())
