from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metapolicy.basis import ConstantPolicy
from metapolicy.core import RolloutBatch, Trajectory, batch_rollouts, discounted_returns, rollout
from metapolicy.errors import ConfigError, DomainError
from metapolicy.meta import (MetaEnv, MetaPolicy, TRPOConfig, _FrozenBatch, compute_advantages, conjugate_gradient,
                             fisher_vector_product, fit_baseline, meta_step, surrogate_and_grad, train,
                             trust_region_step)
from metapolicy.nn import GRU, MLP, NNPolicy, make_policy

from conftest import ConstantAction, LineEnv, NoisyLineEnv, RandomAction


class _Recorder(LineEnv):
    def _step(self, action):
        self.last = action
        return super()._step(action)


def test_delegation():
    env = _Recorder(horizon=5)
    menv = MetaEnv(env, [ConstantPolicy(3, 9, 1), ConstantPolicy(7, 9, 1)])
    menv.reset(np.random.default_rng(0))
    meta_step(menv, 1)
    assert env.last == 7
    with pytest.raises(DomainError):
        meta_step(menv, 2)
    with pytest.raises(ConfigError):
        MetaEnv(env, [])


def test_meta_mirrors_inner_env():
    env = LineEnv(horizon=7)
    menv = MetaEnv(env, [ConstantPolicy(a, 3, 1) for a in range(3)])
    assert (menv.obs_dim, menv.horizon, menv.action_count) == (1, 7, 3)
    tr = rollout(menv, ConstantAction(2), 0)
    assert tr.env_steps == 7 and tr.rewards.tolist() == [2.0] * 7


@settings(max_examples=20, deadline=None)
@given(st.integers(0, 2**31))
def test_one_step_option_equivalence(seed):
    env = NoisyLineEnv(horizon=15)
    menv = MetaEnv(NoisyLineEnv(horizon=15), [ConstantPolicy(a, 3, 1) for a in range(3)])
    direct = rollout(env, RandomAction(), seed)
    wrapped = rollout(menv, RandomAction(), seed)
    assert np.array_equal(direct.observations, wrapped.observations)
    assert np.array_equal(direct.rewards, wrapped.rewards)
    assert [i["primitive"] for i in wrapped.infos] == direct.actions.tolist()


def test_single_basis_matches_basis_alone():
    env = NoisyLineEnv(horizon=10)
    basis = ConstantPolicy(2, 3, 1)
    menv = MetaEnv(NoisyLineEnv(horizon=10), [basis])
    selector = make_policy("mlp", 1, 1, np.random.default_rng(0))
    for seed in range(20):
        assert rollout(menv, selector, seed).episode_return == rollout(env, basis, seed).episode_return


class _Counter:
    """Recurrent stub that counts how many observations it has seen."""

    kind = "counter"
    obs_dim = 1
    action_count = 3
    recurrent = True

    def reset(self, rng):
        return 0

    def act(self, obs, memory, rng):
        return (memory + 1) % 3, memory + 1


def test_recurrent_basis_ticks_every_step():
    counter = _Counter()
    env = _Recorder(horizon=10)
    menv = MetaEnv(env, [ConstantPolicy(1, 3, 1), counter])
    menv.reset(np.random.default_rng(0))
    for _ in range(4):
        meta_step(menv, 0)
    meta_step(menv, 1)
    assert env.last == 5 % 3  # fifth observation seen by the counter


def _batch(trajs) -> RolloutBatch:
    return RolloutBatch(trajs, sum(t.env_steps for t in trajs), 0)


def _traj(obs, actions, rewards) -> Trajectory:
    obs = np.asarray(obs, dtype=float).reshape(len(rewards) + 1, -1)
    return Trajectory(obs, np.asarray(actions, dtype=np.int64), np.asarray(rewards, dtype=float), True,
                      len(rewards))


def test_baseline_constant_and_zero():
    rng = np.random.default_rng(0)
    # a single terminal reward c with gamma 1 gives G_t = c at every step
    trajs = [_traj(rng.normal(size=(6, 2)), np.zeros(5), [0, 0, 0, 0, 3.0]) for _ in range(20)]
    b = fit_baseline(_batch(trajs), 1.0, horizon=5)
    for tr in trajs:
        np.testing.assert_allclose(b.predict(tr), 3.0, atol=1e-3)
    zero = [_traj(rng.normal(size=(6, 2)), np.zeros(5), np.zeros(5)) for _ in range(5)]
    for tr in zero:
        np.testing.assert_allclose(fit_baseline(_batch(zero), 0.99).predict(tr), 0.0, atol=1e-6)
    with pytest.raises(DomainError):
        fit_baseline(_batch([]), 0.99)


def test_baseline_reduces_variance():
    batch = batch_rollouts(NoisyLineEnv(horizon=30), RandomAction(), 2000, 4)
    b = fit_baseline(batch, 0.99)
    G = np.concatenate([discounted_returns(t.rewards, 0.99) for t in batch.trajectories])
    resid = np.concatenate([discounted_returns(t.rewards, 0.99) - b.predict(t) for t in batch.trajectories])
    assert np.var(resid) <= np.var(G)


def test_advantage_examples():
    rng = np.random.default_rng(1)
    trajs = [_traj(rng.normal(size=(5, 1)), np.zeros(4), rng.normal(size=4)) for _ in range(6)]
    batch = _batch(trajs)

    class Perfect:
        def predict(self, tr):
            return discounted_returns(tr.rewards, 0.9)

    assert not np.any(compute_advantages(batch, Perfect(), 0.9))
    adv = compute_advantages(batch, None, 0.9)
    G = np.concatenate([discounted_returns(t.rewards, 0.9) for t in trajs])
    np.testing.assert_allclose(adv, (G - G.mean()) / (G.std() + 1e-8), atol=1e-12)
    assert abs(adv.mean()) < 1e-10


def _policy_and_batch(kind: str, seed: int):
    rng = np.random.default_rng(seed)
    if kind == "mlp":
        policy = NNPolicy(MLP(1, 3, hidden=(5,), rng=rng, output_scale=1.0))
    else:
        policy = NNPolicy(GRU(1, 3, hidden=4, rng=rng, output_scale=1.0))
    batch = batch_rollouts(NoisyLineEnv(horizon=8), policy, 40, seed)
    adv = rng.normal(size=batch.total_steps)
    return policy, batch, adv


def test_surrogate_examples():
    policy, batch, _ = _policy_and_batch("mlp", 0)
    _, g = surrogate_and_grad(policy, batch, np.zeros(batch.total_steps))
    assert not np.any(g)
    net = MLP(1, 4, hidden=(3,), rng=np.random.default_rng(0))
    net.set_flat(np.zeros(net.total_dim))
    uniform = NNPolicy(net)
    one = _batch([_traj([[0.5], [0.0]], [2], [1.0])])
    _, g = surrogate_and_grad(uniform, one, np.ones(1))
    # the only nonzero score is on the output bias: d/db log softmax = onehot - p, negated for a loss
    expected = np.zeros(4)
    expected[2] = 1.0
    g = net.params.unflatten(np.asarray(g).ravel())
    np.testing.assert_allclose(g["b2"], -(expected - 0.25), atol=1e-15)
    assert not np.any(g["W1"]) and not np.any(g["b1"])


@pytest.mark.parametrize("kind", ["mlp", "gru"])
def test_surrogate_gradient_finite_differences(kind):
    policy, batch, adv = _policy_and_batch(kind, 3)
    fb = _FrozenBatch(policy, batch.trajectories, adv)
    _, g = surrogate_and_grad(policy, batch, adv, fb)
    g = np.asarray(g).ravel()
    theta = policy.net.get_flat()
    eps = 1e-6
    fd = np.array([(fb.evaluate(theta + eps * e)[0] - fb.evaluate(theta - eps * e)[0]) / (2 * eps)
                   for e in np.eye(theta.size)])
    floor = 1e-3 * np.max(np.abs(fd))
    assert np.max(np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)) < 1e-4


@pytest.mark.parametrize("kind", ["mlp", "gru"])
def test_fisher_symmetric_psd_and_matches_kl_curvature(kind):
    policy, batch, adv = _policy_and_batch(kind, 7)
    fb = _FrozenBatch(policy, batch.trajectories, adv)
    rng = np.random.default_rng(0)
    n = policy.net.total_dim
    assert not np.any(fisher_vector_product(policy, fb, np.zeros(n), 1e-5))
    theta = policy.net.get_flat()
    for _ in range(5):
        u, v = rng.normal(size=n), rng.normal(size=n)
        Hu = fisher_vector_product(policy, fb, u, 0.0)
        Hv = fisher_vector_product(policy, fb, v, 0.0)
        assert abs(u @ Hv - v @ Hu) < 1e-8 * max(1.0, abs(u @ Hv))
        assert v @ fisher_vector_product(policy, fb, v, 1e-5) > 0
        # KL has zero value and zero slope at theta, so KL(theta + eps v) ~ eps^2 v'Hv / 2
        eps = 1e-4
        kl = fb.evaluate(theta + eps * v)[1]
        assert 2 * kl / eps**2 == pytest.approx(v @ Hv, rel=1e-3)


def test_cg_examples():
    b = np.array([3.0, -1.0, 2.0])
    np.testing.assert_array_equal(conjugate_gradient(lambda v: v, b, iters=1), b)
    x = conjugate_gradient(lambda v: np.array([1.0, 2.0]) * v, np.array([1.0, 2.0]))
    np.testing.assert_allclose(x, [1.0, 1.0], atol=1e-12)
    rng = np.random.default_rng(0)
    M = rng.normal(size=(50, 50))
    A = M @ M.T + 50 * np.eye(50)
    b = rng.normal(size=50)
    x = conjugate_gradient(lambda v: A @ v, b, iters=50, tol=1e-30)
    assert np.linalg.norm(A @ x - b) / np.linalg.norm(b) < 1e-6
    np.testing.assert_allclose(x, np.linalg.solve(A, b), atol=1e-8)


@settings(max_examples=25, deadline=None)
@given(st.lists(st.floats(0.1, 10), min_size=1, max_size=8), st.integers(0, 2**31))
def test_cg_diagonal_closed_form(diag, seed):
    d = np.asarray(diag)
    b = np.random.default_rng(seed).normal(size=d.size)
    x = conjugate_gradient(lambda v: d * v, b, iters=d.size, tol=1e-30)
    np.testing.assert_allclose(x, b / d, atol=1e-12 * max(1.0, np.max(np.abs(b / d))))


def test_trust_region_zero_gradient():
    policy, batch, _ = _policy_and_batch("mlp", 1)
    before = policy.net.get_flat().copy()
    flat, stats = trust_region_step(policy, batch, TRPOConfig(), np.zeros(batch.total_steps))
    assert stats.accepted and stats.surrogate_improvement == 0
    assert np.array_equal(flat, before) and np.array_equal(policy.net.get_flat(), before)


@settings(max_examples=15, deadline=None)
@given(st.integers(0, 2**31), st.sampled_from([1e-4, 1e-3, 1e-2]), st.sampled_from(["mlp", "gru"]))
def test_trust_region_respects_kl_or_leaves_params(seed, max_kl, kind):
    policy, batch, adv = _policy_and_batch(kind, seed % 1000)
    before = policy.net.get_flat().copy()
    flat, stats = trust_region_step(policy, batch, TRPOConfig(max_kl=max_kl), adv)
    if stats.accepted:
        kl = _FrozenBatch(policy, batch.trajectories, adv).evaluate(before)[1]
        measured = _FrozenBatch(NNPolicy(_clone(policy.net, before)), batch.trajectories, adv).evaluate(flat)[1]
        assert measured <= 1.01 * max_kl and kl >= 0
    else:
        assert np.array_equal(policy.net.get_flat(), before)


def _clone(net, flat):
    import copy

    other = copy.deepcopy(net)
    other.set_flat(flat)
    return other


def test_rejected_step_bit_identical():
    policy, batch, adv = _policy_and_batch("mlp", 2)
    before = policy.net.get_flat().copy()
    # a trust region too small for any float step to clear the line search
    _, stats = trust_region_step(policy, batch, TRPOConfig(max_kl=1e-300, max_backtracks=1), adv)
    if not stats.accepted:
        assert policy.net.get_flat().tobytes() == before.tobytes()


def test_train_zero_iterations_and_determinism():
    env = NoisyLineEnv(horizon=10)
    policy = make_policy("mlp", 1, 3, np.random.default_rng(0))
    before = policy.net.get_flat().copy()
    assert train(env, policy, TRPOConfig(iterations=0), 0) == []
    assert np.array_equal(policy.net.get_flat(), before)
    runs = []
    for _ in range(2):
        p = make_policy("mlp", 1, 3, np.random.default_rng(0))
        hist = train(env, p, TRPOConfig(iterations=3, batch_size=100, max_kl=0.01), 5)
        runs.append(([h.mean_return for h in hist], p.net.get_flat()))
    assert runs[0][0] == runs[1][0] and np.array_equal(runs[0][1], runs[1][1])


def test_train_improves_line_task():
    env = NoisyLineEnv(horizon=20)
    policy = make_policy("mlp", 1, 3, np.random.default_rng(0))
    hist = train(env, policy, TRPOConfig(iterations=30, batch_size=400, max_kl=0.01), 0)
    first = np.median([h.mean_return for h in hist[:10]])
    last = np.median([h.mean_return for h in hist[-10:]])
    assert last > first


def test_meta_policy_acts_in_primitive_space():
    basis = [ConstantPolicy(4, 9, 1), ConstantPolicy(8, 9, 1)]
    selector = make_policy("mlp", 1, 2, np.random.default_rng(0))
    mp = MetaPolicy(selector, basis)
    rng = np.random.default_rng(0)
    mem = mp.reset(rng)
    a, _ = mp.act(np.zeros(1), mem, rng)
    assert a in (4, 8)
    with pytest.raises(ConfigError):
        MetaPolicy(make_policy("mlp", 1, 3), basis)
    with pytest.raises(ConfigError):
        TRPOConfig(max_kl=0)
    with pytest.raises(ConfigError):
        TRPOConfig(batch_size=0)
