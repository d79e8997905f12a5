from __future__ import annotations

import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from metapolicy.core import Trajectory
from metapolicy.errors import NumericError
from metapolicy.nn import (GRU, MLP, NNPolicy, ParamBundle, entropy, episode_log_prob_grad, kl_categorical,
                           make_policy, sample_action, softmax)

simplex = arrays(np.float64, st.integers(2, 12), elements=st.floats(1e-3, 1.0)).map(lambda a: a / a.sum())


def _traj(obs: np.ndarray, actions) -> Trajectory:
    obs = np.vstack([obs, obs[-1:]])  # final observation is never fed to the policy
    return Trajectory(obs, np.asarray(actions, dtype=np.int64), np.zeros(len(actions)), False, len(actions))


def _random_net(rng, kind: str):
    in_dim = int(rng.integers(1, 5))
    out_dim = int(rng.integers(2, 7))
    if kind == "mlp":
        net = MLP(in_dim, out_dim, hidden=tuple(int(h) for h in rng.integers(2, 9, size=int(rng.integers(1, 3)))),
                  rng=rng, output_scale=1.0)
    else:
        net = GRU(in_dim, out_dim, hidden=int(rng.integers(2, 7)), rng=rng, output_scale=1.0)
    flat = net.get_flat() + 0.3 * rng.normal(size=net.total_dim)  # nonzero biases too
    net.set_flat(flat)
    return NNPolicy(net)


def _random_batch(rng, policy: NNPolicy, n_traj: int, max_len: int):
    trajs = []
    for _ in range(n_traj):
        T = int(rng.integers(1, max_len + 1))
        trajs.append(_traj(rng.normal(size=(T, policy.obs_dim)), rng.integers(policy.action_count, size=T)))
    weights = rng.normal(size=sum(t.env_steps for t in trajs))
    return trajs, weights


def finite_difference_check(policy: NNPolicy, trajs, weights, eps: float = 1e-5) -> float:
    """Max relative error of the analytic gradient against central differences."""
    _, grad = episode_log_prob_grad(policy, trajs, weights)
    g = grad.flatten()
    theta = policy.net.get_flat()
    fd = np.empty_like(theta)
    for i in range(theta.size):
        for sign in (1, -1):
            t = theta.copy()
            t[i] += sign * eps
            policy.net.set_flat(t)
            loss, _ = episode_log_prob_grad(policy, trajs, weights)
            fd[i] = loss if sign == 1 else (fd[i] - loss) / (2 * eps)
    policy.net.set_flat(theta)
    floor = 1e-3 * max(np.max(np.abs(fd)), 1e-12)
    return float(np.max(np.abs(g - fd) / np.maximum(np.maximum(np.abs(g), np.abs(fd)), floor)))


@pytest.mark.parametrize("kind", ["mlp", "gru"])
def test_gradients_match_finite_differences(kind):
    rng = np.random.default_rng(123 if kind == "mlp" else 321)
    for _ in range(10):
        policy = _random_net(rng, kind)
        trajs, w = _random_batch(rng, policy, 3, 12)
        assert finite_difference_check(policy, trajs, w) < 1e-4


def test_gru_bptt_fifty_steps():
    rng = np.random.default_rng(5)
    policy = _random_net(rng, "gru")
    trajs, w = _random_batch(rng, policy, 1, 1)
    trajs = [_traj(rng.normal(size=(50, policy.obs_dim)), rng.integers(policy.action_count, size=50))]
    w = rng.normal(size=50)
    assert finite_difference_check(policy, trajs, w) < 1e-4


def test_zero_weights_uniform():
    net = MLP(4, 9, rng=np.random.default_rng(0))
    net.set_flat(np.zeros(net.total_dim))
    probs, _ = NNPolicy(net).distribution(np.array([1.0, -0.5, 0.2, 0.0]))
    np.testing.assert_allclose(probs, np.full(9, 1 / 9), atol=1e-15)


def test_crafted_logits():
    net = MLP(2, 9, hidden=(3,), rng=np.random.default_rng(0))
    flat = np.zeros(net.total_dim)
    net.set_flat(flat)
    net.params["b2"] = np.eye(9)[0]
    net._bind()
    probs, _ = NNPolicy(net).distribution(np.zeros(2))
    assert probs[0] == pytest.approx(math.e / (math.e + 8), abs=1e-12)
    assert probs[0] == pytest.approx(0.2536117142620283, abs=1e-15)


@given(arrays(np.float64, 9, elements=st.floats(-30, 30)), st.floats(-100, 100))
def test_softmax_shift_invariant(logits, c):
    np.testing.assert_allclose(softmax(logits + c), softmax(logits), atol=1e-12)


@settings(deadline=None)
@given(st.integers(0, 2**31), st.sampled_from(["mlp", "gru"]))
def test_outputs_on_simplex(seed, kind):
    rng = np.random.default_rng(seed)
    policy = make_policy(kind, 4, 9, rng)
    probs, _ = policy.distribution(rng.normal(size=4) * 3)
    assert np.all(probs > 0) and abs(probs.sum() - 1) < 1e-12
    assert 0 <= entropy(probs) <= math.log(9) + 1e-12


def test_nonfinite_observation():
    with pytest.raises(NumericError):
        make_policy("mlp", 2, 3).distribution(np.array([np.nan, 0.0]))
    with pytest.raises(NumericError):
        make_policy("gru", 2, 3).distribution(np.array([np.inf, 0.0]))


def test_gru_zero_params():
    net = GRU(3, 4, hidden=5)
    net.set_flat(np.zeros(net.total_dim))
    h, logits = net.step(np.zeros(5), np.array([0.3, -0.2, 0.9]))
    assert np.array_equal(h, np.zeros(5))
    np.testing.assert_allclose(softmax(logits), np.full(4, 0.25))


def test_gru_closed_update_gate_passes_memory():
    net = GRU(3, 4, hidden=5, rng=np.random.default_rng(1))
    net.params["bz"] = np.full(5, -200.0)
    net._bind()
    h0 = np.random.default_rng(2).normal(size=5)
    h, _ = net.step(h0, np.array([0.3, -0.2, 0.9]))
    np.testing.assert_allclose(h, h0, atol=1e-12)


def test_gru_hidden_finite_over_long_episode():
    rng = np.random.default_rng(0)
    net = GRU(4, 9, rng=rng)
    h = net.initial_hidden()
    for _ in range(500):
        h, logits = net.step(h, rng.normal(size=4) * 5)
    assert np.all(np.isfinite(h)) and np.max(np.abs(h)) <= 1.0


def _adam_fit(policy, trajs, weights, steps, lr=0.03):
    m = np.zeros(policy.net.total_dim)
    v = np.zeros_like(m)
    for t in range(1, steps + 1):
        _, grad = episode_log_prob_grad(policy, trajs, weights)
        g = grad.flatten()
        m = 0.9 * m + 0.1 * g
        v = 0.999 * v + 0.001 * g * g
        step = lr * (m / (1 - 0.9**t)) / (np.sqrt(v / (1 - 0.999**t)) + 1e-8)
        policy.net.set_flat(policy.net.get_flat() - step)


def _final_step_accuracy(policy, trajs):
    hits = []
    for tr in trajs:
        mem = policy.reset(None)
        for obs in tr.observations[:-1]:
            probs, mem = policy.distribution(obs, mem)
        hits.append(int(np.argmax(probs)) == tr.actions[-1])
    return float(np.mean(hits))


def _memory_task(rng, n, length=20):
    """Cue in the first observation only; the label is asked for at the last step."""
    trajs = []
    for _ in range(n):
        label = int(rng.integers(2))
        obs = 0.1 * rng.normal(size=(length, 2))
        obs[0, 0] = 1.0 if label else -1.0
        obs[:, 1] = np.linspace(0, 1, length)
        trajs.append(_traj(obs, np.full(length, label)))
    weights = np.concatenate([np.r_[np.zeros(length - 1), 1.0] for _ in range(n)])
    return trajs, weights


def test_gru_remembers_first_observation_mlp_cannot():
    rng = np.random.default_rng(0)
    train, w = _memory_task(rng, 64)
    test, _ = _memory_task(rng, 200)
    gru = NNPolicy(GRU(2, 2, hidden=8, rng=np.random.default_rng(1), output_scale=1.0))
    mlp = NNPolicy(MLP(2, 2, hidden=(16, 16), rng=np.random.default_rng(1), output_scale=1.0))
    _adam_fit(gru, train, w, 300)
    _adam_fit(mlp, train, w, 300)
    assert _final_step_accuracy(gru, test) > 0.95
    assert _final_step_accuracy(mlp, test) < 0.65


def test_log_prob_grad_trivial_cases():
    policy = make_policy("mlp", 2, 5, np.random.default_rng(0))
    trajs = [_traj(np.ones((3, 2)), [0, 1, 2])]
    loss, grad = episode_log_prob_grad(policy, trajs, np.zeros(3))
    assert loss == 0 and not np.any(grad.flatten())
    policy.net.set_flat(np.zeros(policy.net.total_dim))
    loss, _ = episode_log_prob_grad(policy, [_traj(np.ones((1, 2)), [3])], np.ones(1))
    assert loss == pytest.approx(math.log(5), abs=1e-12)


def test_kl_examples():
    p = np.array([0.2, 0.3, 0.5])
    assert kl_categorical(p, p) == 0
    assert kl_categorical([1.0, 0.0], [0.5, 0.5]) == pytest.approx(math.log(2), abs=1e-12)


@given(st.integers(2, 12).flatmap(lambda k: st.tuples(
    arrays(np.float64, k, elements=st.floats(0, 1)), arrays(np.float64, k, elements=st.floats(1e-6, 1)))))
def test_kl_nonnegative(pq):
    p, q = pq
    if p.sum() == 0:
        p = np.ones_like(p)
    p, q = p / p.sum(), q / q.sum()
    assert kl_categorical(p, q) >= -1e-12


@given(simplex)
def test_entropy_bounds(p):
    assert -1e-12 <= entropy(p) <= math.log(len(p)) + 1e-12


def test_sample_action():
    rng = np.random.default_rng(0)
    assert all(sample_action(np.eye(9)[4], rng) == 4 for _ in range(200))
    n = 100_000
    counts = np.bincount([sample_action(np.full(9, 1 / 9), rng) for _ in range(n)], minlength=9)
    sd = math.sqrt(n * (1 / 9) * (8 / 9))
    assert np.all(np.abs(counts - n / 9) < 3 * sd)
    a = [sample_action(np.full(9, 1 / 9), np.random.default_rng(7)) for _ in range(3)]
    assert len(set(a)) == 1


@given(st.lists(st.tuples(st.integers(1, 4), st.integers(1, 4)), min_size=1, max_size=4), st.integers(0, 2**31))
def test_param_bundle_round_trip(shapes, seed):
    rng = np.random.default_rng(seed)
    pb = ParamBundle({f"p{i}": rng.normal(size=s) for i, s in enumerate(shapes)})
    v = rng.normal(size=pb.total_dim)
    assert np.array_equal(pb.unflatten(v).flatten(), v)
    assert np.array_equal(pb.unflatten(pb.flatten()).flatten(), pb.flatten())
    assert list(pb) == [f"p{i}" for i in range(len(shapes))]
