"""Basis policy construction: RBF Q(lambda), greedy/distractor handles."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .core import Env, Policy, child_seed, rollout
from .errors import ConfigError, NumericError

RAW_FLOOR = 1e-300


class RBFFeatureMap:
    """Gaussian kernels on the normalized state box, normalized to sum to one."""

    def __init__(self, centers, bandwidths, obs_low, obs_high) -> None:
        self.centers = np.atleast_2d(np.asarray(centers, dtype=float))
        self.bandwidths = np.asarray(bandwidths, dtype=float)
        self.obs_low = np.asarray(obs_low, dtype=float)
        self.obs_high = np.asarray(obs_high, dtype=float)
        self._inv_h = 1.0 / self.bandwidths
        self._scaled_centers = self.centers * self._inv_h
        self._center = 0.5 * (self.obs_high + self.obs_low)
        self._halfspan = 0.5 * (self.obs_high - self.obs_low)

    @classmethod
    def random(cls, n_centers: int, obs_low, obs_high, rng: np.random.Generator, width: float = 0.15):
        dim = len(obs_low)
        centers = rng.uniform(-1.0, 1.0, size=(n_centers, dim))
        return cls(centers, np.full(dim, width * 2.0), obs_low, obs_high)

    @property
    def n_features(self) -> int:
        return self.centers.shape[0]

    def normalize(self, obs) -> np.ndarray:
        s = (np.asarray(obs, dtype=float) - self._center) / self._halfspan
        return np.clip(s, -1.0, 1.0)

    def features_normalized(self, s) -> np.ndarray:
        d = self._scaled_centers - np.asarray(s, dtype=float) * self._inv_h
        raw = np.exp(-np.einsum("ij,ij->i", d, d))
        total = raw.sum()
        if total < RAW_FLOOR:
            raw = np.maximum(raw, RAW_FLOOR)
            total = raw.sum()
        return raw / total

    def __call__(self, obs) -> np.ndarray:
        return self.features_normalized(self.normalize(obs))


def rbf_features(fmap: RBFFeatureMap, state_normalized) -> np.ndarray:
    return fmap.features_normalized(np.clip(np.asarray(state_normalized, dtype=float), -1.0, 1.0))


@dataclass
class QFunction:
    weights: np.ndarray  # (n_actions, n_features)
    features: RBFFeatureMap
    curve: list[float] = field(default_factory=list)
    selected_episode: int | None = None  # snapshot kept by greedy evaluation, if any
    selected_score: float | None = None

    def values(self, obs) -> np.ndarray:
        return self.weights @ self.features(obs)


@dataclass(frozen=True)
class QLearningConfig:
    alpha: float = 0.95
    lam: float = 0.4
    gamma: float = 0.995
    eps_start: float = 1.0
    eps_end: float = 0.05
    episodes: int = 1000
    n_centers: int = 2000
    width: float = 0.15
    max_weight: float = 1e6
    eval_every: int = 0  # >0: score the greedy policy every so many episodes, keep the best
    eval_rollouts: int = 5

    def __post_init__(self):
        if self.eval_every < 0 or self.eval_rollouts < 1:
            raise ConfigError("eval_every must be >= 0 and eval_rollouts >= 1")
        for name in ("alpha", "lam", "gamma", "eps_start", "eps_end"):
            if not 0.0 <= getattr(self, name) <= 1.0:
                raise ConfigError(f"{name} must lie in [0, 1]")
        if self.episodes < 0:
            raise ConfigError("episodes must be >= 0")


def _greedy(q: np.ndarray) -> int:
    return int(np.argmax(q))  # first maximum: ties -> lowest index


def q_lambda_update(weights, traces, phi, action, td_error, alpha, gamma, lam) -> None:
    """One Watkins Q(lambda) credit step, in place: decay, accumulate, apply."""
    traces *= gamma * lam
    traces[action] += phi
    weights += alpha * td_error * traces


def q_learning_train(env: Env, cfg: QLearningConfig, seed: int, fmap: RBFFeatureMap | None = None,
                     eval_env: Env | None = None) -> QFunction:
    """Watkins Q(lambda) with epsilon-greedy exploration annealed linearly per episode.

    With ``cfg.eval_every > 0`` the greedy policy is scored on
    ``cfg.eval_rollouts`` fixed-seed rollouts at that interval and after the
    last episode; the best-scoring weights are returned (ties keep the later).
    Scoring uses ``eval_env`` when given (e.g. the real start distribution
    when ``env`` uses exploring starts).
    """
    if env.action_count is None:
        raise ConfigError("Q-learning needs a discrete action space")
    rng = np.random.default_rng(seed)
    feat_rng, env_rng, act_rng = rng.spawn(3)
    if fmap is None:
        fmap = RBFFeatureMap.random(cfg.n_centers, env.obs_low, env.obs_high, feat_rng, cfg.width)
    n_act = env.action_count
    w = np.zeros((n_act, fmap.n_features))
    e = np.zeros_like(w)
    curve = []
    best = (-np.inf, None, None)
    eval_seed = int(rng.integers(2**63))
    for ep in range(cfg.episodes):
        frac = ep / max(cfg.episodes - 1, 1)
        eps = cfg.eps_start + (cfg.eps_end - cfg.eps_start) * frac
        e[:] = 0.0
        phi = fmap(env.reset(env_rng))
        q = w @ phi
        a = int(act_rng.integers(n_act)) if act_rng.random() < eps else _greedy(q)
        total = 0.0
        done = False
        while not done:
            obs, r, done, info = env.step(a)
            total += r
            phi_next = fmap(obs)
            q_next = w @ phi_next
            greedy_next = _greedy(q_next)
            bootstrap = 0.0 if info["terminal"] else q_next[greedy_next]
            delta = r + cfg.gamma * bootstrap - q[a]
            q_lambda_update(w, e, phi, a, delta, cfg.alpha, cfg.gamma, cfg.lam)
            if not np.isfinite(delta) or np.max(np.abs(w)) > cfg.max_weight:
                raise NumericError(f"Q-learning diverged in episode {ep}")
            a_next = int(act_rng.integers(n_act)) if act_rng.random() < eps else greedy_next
            if a_next != greedy_next:
                e[:] = 0.0
            phi = phi_next
            q = w @ phi
            a = a_next
        curve.append(total)
        if cfg.eval_every and ((ep + 1) % cfg.eval_every == 0 or ep + 1 == cfg.episodes):
            score = _greedy_score(eval_env or env, QFunction(w, fmap), cfg.eval_rollouts, eval_seed)
            if score >= best[0]:
                best = (score, w.copy(), ep + 1)
    if best[1] is not None:
        return QFunction(weights=best[1], features=fmap, curve=curve, selected_episode=best[2], selected_score=best[0])
    return QFunction(weights=w, features=fmap, curve=curve)


def q_learning_best_of(env: Env, cfg: QLearningConfig, seed: int, attempts: int,
                       accept_score: float = np.inf, eval_env: Env | None = None) -> QFunction:
    """Rerun Q-learning on fresh child seeds until a greedy snapshot scores ``accept_score``.

    Returns the best-scoring run among those tried. Needs ``cfg.eval_every > 0``.
    """
    if attempts < 1:
        raise ConfigError("attempts must be >= 1")
    if cfg.eval_every <= 0:
        raise ConfigError("restarts need greedy snapshot evaluation (eval_every > 0)")
    best = None
    for i in range(attempts):
        q = q_learning_train(env, cfg, child_seed(seed, i), eval_env=eval_env)
        if best is None or q.selected_score > best.selected_score:
            best = q
        if q.selected_score >= accept_score:
            break
    return best


def _greedy_score(env: Env, q: QFunction, n: int, seed: int) -> float:
    policy = GreedyQPolicy(q)
    return float(np.mean([rollout(env, policy, child_seed(seed, i)).episode_return for i in range(n)]))


class GreedyQPolicy(Policy):
    kind = "greedyq"

    def __init__(self, q: QFunction, metadata: dict | None = None) -> None:
        self.q = q
        self.obs_dim = q.features.centers.shape[1]
        self.action_count = q.weights.shape[0]
        self.metadata = dict(metadata or {})

    def act(self, obs, memory, rng):
        return _greedy(self.q.values(obs)), memory


def greedy_policy(q: QFunction, metadata: dict | None = None) -> GreedyQPolicy:
    return GreedyQPolicy(q, metadata)


class DistractorPolicy(Policy):
    """Uniformly random actions.

    ``sample()`` draws from the handle's own generator. Inside rollouts the
    per-episode memory is a generator seeded from the handle seed and the
    rollout's generator, so episodes stay reproducible.
    """

    kind = "distractor"

    def __init__(self, action_count: int, seed: int, obs_dim: int = 4, metadata: dict | None = None) -> None:
        if action_count < 1:
            raise ConfigError("action_count must be >= 1")
        self.action_count = int(action_count)
        self.seed = int(seed)
        self.obs_dim = int(obs_dim)
        self.metadata = dict(metadata or {})
        self._rng = np.random.default_rng(self.seed)

    def sample(self) -> int:
        return int(self._rng.integers(self.action_count))

    def reset(self, rng):
        return np.random.default_rng([self.seed, int(rng.integers(2**63))])

    def act(self, obs, memory, rng):
        if memory is None:
            memory = self.reset(rng)
        return int(memory.integers(self.action_count)), memory


def make_distractor(action_count: int, seed: int, obs_dim: int = 4) -> DistractorPolicy:
    return DistractorPolicy(action_count, seed, obs_dim)


class ConstantPolicy(Policy):
    """Always the same action; handy for tests and one-step-option checks."""

    kind = "constant"

    def __init__(self, action: int, action_count: int, obs_dim: int) -> None:
        self.action = int(action)
        self.action_count = int(action_count)
        self.obs_dim = int(obs_dim)

    def act(self, obs, memory, rng):
        return self.action, memory
