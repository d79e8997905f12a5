"""Meta-MDP over a basis set (one-step options) and the trust-region optimizer."""

from __future__ import annotations

import time
from dataclasses import dataclass
from typing import Callable

import numpy as np

from .core import Env, Policy, RolloutBatch, batch_rollouts, child_seed, discounted_returns
from .errors import ConfigError, DomainError, NumericError
from .nn import NNPolicy, log_softmax, policy_observations


class MetaEnv(Env):
    """Each meta-action picks the basis policy that acts for exactly one step.

    Recurrent basis policies see every observation, selected or not, so their
    memory is coherent whenever they are picked.
    """

    def __init__(self, inner: Env, basis: list[Policy]) -> None:
        super().__init__()
        if not basis:
            raise ConfigError("basis set must be non-empty")
        for b in basis:
            if b.obs_dim != inner.obs_dim:
                raise ConfigError("basis policy observation dim does not match the env")
        self.inner = inner
        self.basis = list(basis)
        self.obs_dim = inner.obs_dim
        self.action_count = len(self.basis)
        self.horizon = inner.horizon
        self.obs_low = inner.obs_low
        self.obs_high = inner.obs_high
        self.name = f"meta[{getattr(inner, 'name', 'env')}]"
        self._memories: list = []
        self._obs = None
        self._rng: np.random.Generator | None = None

    def _reset(self, rng):
        # spawning leaves rng's own stream untouched, so the inner env sees
        # exactly the draws it would get outside the wrapper
        self._rng = rng.spawn(1)[0]
        self._obs = self.inner.reset(rng)
        self._memories = [b.reset(self._rng) for b in self.basis]
        return self._obs

    def _step(self, meta_action):
        k = int(meta_action)
        if not 0 <= k < len(self.basis):
            raise DomainError(f"meta action {meta_action} outside [0, {len(self.basis)})")
        action = None
        for i, b in enumerate(self.basis):
            if i == k or b.recurrent:
                a, self._memories[i] = b.act(self._obs, self._memories[i], self._rng)
                if i == k:
                    action = a
        self._obs, reward, _, info = self.inner.step(action)
        info["basis"] = k
        info["primitive"] = action
        return self._obs, reward, info["terminal"], info


def meta_step(menv: MetaEnv, meta_action: int):
    """Advance the meta-MDP one step; returns ``(obs, reward, done)``."""
    obs, reward, done, _ = menv.step(meta_action)
    return obs, reward, done


# --- optimizer pieces ------------------------------------------------------


@dataclass(frozen=True)
class TRPOConfig:
    batch_size: int = 1000
    gamma: float = 0.995
    max_kl: float = 0.001
    cg_iters: int = 10
    cg_damping: float = 1e-5
    backtrack_ratio: float = 0.8
    max_backtracks: int = 15
    iterations: int = 100

    def __post_init__(self):
        if self.max_kl <= 0:
            raise ConfigError("max_kl must be > 0")
        if self.batch_size < 1:
            raise ConfigError("batch_size must be >= 1")
        if not 0.0 <= self.gamma <= 1.0:
            raise ConfigError("gamma must lie in [0, 1]")


@dataclass
class IterationStats:
    iteration: int
    mean_return: float
    std_return: float
    min_return: float
    max_return: float
    mean_kl: float
    surrogate_improvement: float
    env_steps: int
    accepted: bool
    success_rate: float = 0.0
    n_trajectories: int = 0
    wall_seconds: float = 0.0


class LinearBaseline:
    """Ridge regression of discounted returns on ``[o, o^2, t/T, (t/T)^2, (t/T)^3, 1]``."""

    def __init__(self, horizon: int, ridge: float = 1e-5) -> None:
        self.horizon = horizon
        self.ridge = ridge
        self.coef: np.ndarray | None = None

    def features(self, observations: np.ndarray) -> np.ndarray:
        o = np.asarray(observations, dtype=float)
        n = o.shape[0]
        al = np.arange(n, dtype=float)[:, None] / self.horizon
        return np.concatenate([o, o * o, al, al**2, al**3, np.ones((n, 1))], axis=1)

    def fit(self, trajectories, gamma: float) -> "LinearBaseline":
        X = np.concatenate([self.features(tr.observations[:-1]) for tr in trajectories])
        y = np.concatenate([discounted_returns(tr.rewards, gamma) for tr in trajectories])
        A = X.T @ X + self.ridge * np.eye(X.shape[1])
        self.coef = np.linalg.solve(A, X.T @ y)
        return self

    def predict(self, trajectory) -> np.ndarray:
        if self.coef is None:
            return np.zeros(trajectory.env_steps)
        return self.features(trajectory.observations[:-1]) @ self.coef


def fit_baseline(batch: RolloutBatch, gamma: float, horizon: int | None = None) -> LinearBaseline:
    if not batch.trajectories:
        raise DomainError("empty batch")
    if horizon is None:
        horizon = max(tr.env_steps for tr in batch.trajectories)
    return LinearBaseline(horizon).fit(batch.trajectories, gamma)


def compute_advantages(batch: RolloutBatch, baseline: LinearBaseline | None, gamma: float,
                       normalize: bool = True) -> np.ndarray:
    """Concatenated per-step ``G_t - b(s_t, t)``, centered and scaled to unit std."""
    parts = []
    for tr in batch.trajectories:
        G = discounted_returns(tr.rewards, gamma)
        b = baseline.predict(tr) if baseline is not None else 0.0
        parts.append(G - b)
    adv = np.concatenate(parts)
    if not normalize:
        return adv
    adv = adv - adv.mean()
    std = adv.std()
    if std > 1e-8:
        adv = adv / (std + 1e-8)
    return adv


class _FrozenBatch:
    """Network outputs at the pre-update parameters, reused by every later query."""

    def __init__(self, policy: NNPolicy, trajectories, advantages=None) -> None:
        self.policy = policy
        self.adv = None if advantages is None else np.asarray(advantages, dtype=float)
        self.seqs = policy_observations(trajectories)
        self.actions = np.concatenate([np.asarray(tr.actions, dtype=np.int64) for tr in trajectories])
        self.n = len(self.actions)
        logits, self.cache = policy.net.forward(self.seqs)
        self.logp_old = log_softmax(logits)
        self.p_old = np.exp(self.logp_old)
        self.idx = np.arange(self.n)

    def evaluate(self, flat) -> tuple[float, float]:
        """Surrogate loss and mean KL(old || new) at flat parameters ``flat``."""
        net = self.policy.net
        saved = net.get_flat()
        net.set_flat(flat)
        try:
            logits, _ = net.forward(self.seqs)
        finally:
            net.set_flat(saved)
        logp = log_softmax(logits)
        ratio = np.exp(logp[self.idx, self.actions] - self.logp_old[self.idx, self.actions])
        loss = -float(np.mean(ratio * self.adv))
        kl = float(np.mean(np.sum(self.p_old * (self.logp_old - logp), axis=1)))
        return loss, kl


def surrogate_and_grad(policy: NNPolicy, batch: RolloutBatch, advantages, frozen=None):
    """Importance-weighted surrogate at the sampling parameters and its gradient."""
    adv = np.asarray(advantages, dtype=float)
    fb = frozen if frozen is not None else _FrozenBatch(policy, batch.trajectories, adv)
    fb.adv = adv
    loss = -float(np.mean(adv))  # ratio is exactly 1 at the sampling parameters
    dlogits = fb.p_old * (adv / fb.n)[:, None]
    dlogits[fb.idx, fb.actions] -= adv / fb.n
    grad = policy.net.backward(fb.cache, dlogits)
    if not np.all(np.isfinite(grad)):
        raise NumericError("non-finite policy gradient")
    return loss, grad


def fisher_vector_product(policy: NNPolicy, frozen: _FrozenBatch, v, damping: float) -> np.ndarray:
    """``(H + damping I) v`` with H the Hessian of mean KL, in Gauss-Newton form ``J' F_cat J / N``."""
    v = np.asarray(v, dtype=float)
    jv = policy.net.jvp(frozen.cache, v)
    p = frozen.p_old
    m = p * jv - p * np.sum(p * jv, axis=1, keepdims=True)
    out = policy.net.backward(frozen.cache, m) / frozen.n + damping * v
    if not np.all(np.isfinite(out)):
        raise NumericError("non-finite Fisher-vector product")
    return out


def conjugate_gradient(apply_A: Callable[[np.ndarray], np.ndarray], b, iters: int = 10,
                       tol: float = 1e-10) -> np.ndarray:
    b = np.asarray(b, dtype=float)
    x = np.zeros_like(b)
    r = b.copy()
    p = r.copy()
    rr = float(r @ r)
    for _ in range(iters):
        if rr < tol:
            break
        Ap = apply_A(p)
        alpha = rr / float(p @ Ap)
        x += alpha * p
        r -= alpha * Ap
        rr_new = float(r @ r)
        p = r + (rr_new / rr) * p
        rr = rr_new
    return x


def _return_stats(batch: RolloutBatch) -> dict:
    rets = batch.returns()
    return dict(
        mean_return=float(rets.mean()),
        std_return=float(rets.std()),
        min_return=float(rets.min()),
        max_return=float(rets.max()),
        success_rate=batch.success_rate(),
        n_trajectories=len(rets),
        env_steps=batch.total_steps,
    )


def trust_region_step(policy: NNPolicy, batch: RolloutBatch, cfg: TRPOConfig, advantages,
                      iteration: int = 0) -> tuple[np.ndarray, IterationStats]:
    """Natural-gradient step scaled to the KL radius, then backtracking line search.

    The policy's parameters are updated in place when a candidate is accepted
    and left untouched otherwise.
    """
    fb = _FrozenBatch(policy, batch.trajectories, advantages)
    loss_before, g = surrogate_and_grad(policy, batch, advantages, fb)
    old = policy.net.get_flat()
    stats = _return_stats(batch)

    def done(flat, kl, improvement, accepted):
        return flat, IterationStats(iteration=iteration, mean_kl=kl, surrogate_improvement=improvement,
                                    accepted=accepted, **stats)

    if not np.any(g):
        return done(old, 0.0, 0.0, True)
    direction = conjugate_gradient(lambda v: fisher_vector_product(policy, fb, v, cfg.cg_damping),
                                   g, cfg.cg_iters)
    shs = float(direction @ fisher_vector_product(policy, fb, direction, cfg.cg_damping))
    if not np.isfinite(shs) or shs <= 0.0:
        return done(old, 0.0, 0.0, False)
    full_step = np.sqrt(2.0 * cfg.max_kl / shs) * direction
    if not np.all(np.isfinite(full_step)):
        return done(old, 0.0, 0.0, False)
    for n in range(cfg.max_backtracks):
        candidate = old - cfg.backtrack_ratio**n * full_step
        loss, kl = fb.evaluate(candidate)
        if np.isfinite(loss) and np.isfinite(kl) and loss < loss_before and kl <= cfg.max_kl:
            policy.net.set_flat(candidate)
            return done(candidate, kl, loss_before - loss, True)
    return done(old, 0.0, 0.0, False)


def train(env: Env, policy: NNPolicy, cfg: TRPOConfig, seed: int,
          on_iteration: Callable[[IterationStats, NNPolicy], None] | None = None,
          should_stop: Callable[[list[IterationStats]], bool] | None = None) -> list[IterationStats]:
    """Collect, fit baseline, compute advantages, step; one ``IterationStats`` per iteration.

    Reported returns are those of the batch collected before each update.
    ``should_stop`` sees the history after every iteration and can end training early.
    """
    history = []
    for it in range(cfg.iterations):
        t0 = time.perf_counter()
        batch = batch_rollouts(env, policy, cfg.batch_size, child_seed(seed, it))
        baseline = fit_baseline(batch, cfg.gamma, env.horizon)
        adv = compute_advantages(batch, baseline, cfg.gamma)
        _, stats = trust_region_step(policy, batch, cfg, adv, iteration=it)
        stats.wall_seconds = time.perf_counter() - t0
        history.append(stats)
        if on_iteration is not None:
            on_iteration(stats, policy)
        if should_stop is not None and should_stop(history):
            break
    return history


class MetaPolicy(Policy):
    """A trained selector plus its basis set, acting in the primitive action space."""

    kind = "meta"

    def __init__(self, selector: NNPolicy, basis: list[Policy], metadata: dict | None = None) -> None:
        if selector.action_count != len(basis):
            raise ConfigError("selector output size must equal the basis count")
        self.selector = selector
        self.basis = list(basis)
        self.obs_dim = selector.obs_dim
        self.action_count = basis[0].action_count
        self.recurrent = True
        self.metadata = dict(metadata or {})

    def reset(self, rng):
        return [self.selector.reset(rng), [b.reset(rng) for b in self.basis]]

    def act(self, obs, memory, rng):
        if memory is None:
            memory = self.reset(rng)
        k, memory[0] = self.selector.act(obs, memory[0], rng)
        action = None
        for i, b in enumerate(self.basis):
            if i == k or b.recurrent:
                a, memory[1][i] = b.act(obs, memory[1][i], rng)
                if i == k:
                    action = a
        return action, memory
