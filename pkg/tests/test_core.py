from __future__ import annotations

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from metapolicy.core import (RolloutBatch, Trajectory, batch_rollouts, child_seed, discounted_returns, mean_return,
                             rollout)
from metapolicy.errors import ConfigError, DomainError

from conftest import ConstantAction, LineEnv, NoisyLineEnv, RandomAction


def _same(a: Trajectory, b: Trajectory) -> bool:
    return (np.array_equal(a.observations, b.observations) and np.array_equal(a.actions, b.actions)
            and np.array_equal(a.rewards, b.rewards) and a.terminal == b.terminal)


def test_rollout_truncates_at_horizon():
    tr = rollout(LineEnv(horizon=3), ConstantAction(2), seed=0)
    assert len(tr.actions) == 3 and len(tr.rewards) == 3 and len(tr.observations) == 4
    assert tr.env_steps == 3 and not tr.terminal


def test_rollout_stops_on_terminal():
    tr = rollout(LineEnv(horizon=10, terminal_at=2), ConstantAction(2), seed=0)
    assert tr.env_steps == 2 and tr.terminal and tr.success


def test_rollout_is_deterministic():
    env = NoisyLineEnv(horizon=20)
    assert _same(rollout(env, RandomAction(), 7), rollout(env, RandomAction(), 7))
    assert not _same(rollout(env, RandomAction(), 7), rollout(env, RandomAction(), 8))


def test_rollout_dimension_mismatch():
    with pytest.raises(ConfigError):
        rollout(LineEnv(), ConstantAction(0, obs_dim=2), 0)
    with pytest.raises(ConfigError):
        rollout(LineEnv(), ConstantAction(0, action_count=4), 0)


def test_step_after_done_rejected():
    env = LineEnv(horizon=1)
    env.reset(np.random.default_rng(0))
    env.step(0)
    with pytest.raises(DomainError):
        env.step(0)


def test_batch_two_full_episodes():
    b = batch_rollouts(LineEnv(horizon=500), ConstantAction(1), 1000, 3)
    assert len(b) == 2 and b.total_steps == 1000


def test_batch_min_one():
    b = batch_rollouts(LineEnv(horizon=5), ConstantAction(1), 1, 3)
    assert len(b) == 1


def test_batch_deterministic_and_seeded_per_index():
    env = NoisyLineEnv(horizon=7)
    a = batch_rollouts(env, RandomAction(), 50, 11)
    b = batch_rollouts(env, RandomAction(), 50, 11)
    assert all(_same(x, y) for x, y in zip(a.trajectories, b.trajectories))
    assert [t.seed for t in a.trajectories] == [child_seed(11, i) for i in range(len(a))]


@settings(max_examples=40, deadline=None)
@given(st.integers(1, 60), st.integers(1, 200), st.integers(0, 2**32))
def test_batch_step_accounting(horizon, min_steps, seed):
    b = batch_rollouts(NoisyLineEnv(horizon=horizon), RandomAction(), min_steps, seed)
    assert b.total_steps == sum(t.env_steps for t in b.trajectories)
    assert b.total_steps >= min_steps
    assert b.total_steps - b.trajectories[-1].env_steps < min_steps
    assert all(t.env_steps <= horizon for t in b.trajectories)


def test_child_seed_is_stable():
    assert child_seed(0, 0) == child_seed(0, 0)
    assert len({child_seed(0, i) for i in range(100)}) == 100
    assert 0 <= child_seed(-5, 3) < 2**64


def test_discounted_returns_examples():
    np.testing.assert_allclose(discounted_returns([1, 1, 1], 0.5), [1.75, 1.5, 1.0])
    assert discounted_returns([4.2], 0.3).tolist() == [4.2]
    assert discounted_returns([2, 3], 1.0).tolist() == [5.0, 3.0]
    with pytest.raises(ConfigError):
        discounted_returns([1.0], 1.5)


@given(st.lists(st.floats(-1e3, 1e3), min_size=1, max_size=30))
def test_discounted_returns_limits(rewards):
    assert discounted_returns(rewards, 0.0).tolist() == [float(r) for r in rewards]
    suffix = np.array([sum(float(r) for r in rewards[t:]) for t in range(len(rewards))])
    # gamma = 1 gives suffix sums; summation order differs so allow rounding
    np.testing.assert_allclose(discounted_returns(rewards, 1.0), suffix, rtol=1e-12, atol=1e-9)


@given(st.lists(st.floats(-10, 10), min_size=1, max_size=30), st.floats(0, 1))
def test_discounted_returns_recursion(rewards, gamma):
    g = discounted_returns(rewards, gamma)
    for t in range(len(rewards) - 1):
        assert g[t] == pytest.approx(rewards[t] + gamma * g[t + 1], abs=1e-9)


def _traj(ret: float) -> Trajectory:
    return Trajectory(np.zeros((2, 1)), np.zeros(1, dtype=int), np.array([ret]), False, 1)


def test_mean_return():
    assert mean_return(RolloutBatch([_traj(10), _traj(20)], 2, 0)) == 15
    assert mean_return(RolloutBatch([_traj(-3.5)], 1, 0)) == -3.5
    with pytest.raises(DomainError):
        mean_return(RolloutBatch([], 0, 0))
