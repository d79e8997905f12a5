from __future__ import annotations

import numpy as np
import pytest

from metapolicy.core import Env, Policy


class LineEnv(Env):
    """Deterministic 1-D walk: obs is the position, reward is the action taken."""

    obs_dim = 1
    action_count = 3

    def __init__(self, horizon: int = 3, terminal_at: float | None = None) -> None:
        super().__init__()
        self.horizon = horizon
        self.terminal_at = terminal_at
        self.obs_low = np.array([-10.0])
        self.obs_high = np.array([10.0])
        self.pos = 0.0

    def _reset(self, rng):
        self.pos = 0.0
        return np.array([self.pos])

    def _step(self, action):
        self.pos += int(action) - 1
        done = self.terminal_at is not None and self.pos >= self.terminal_at
        return np.array([self.pos]), float(action), done, {"success": done}


class NoisyLineEnv(LineEnv):
    def _reset(self, rng):
        self._rng = rng
        self.pos = float(rng.normal())
        return np.array([self.pos])

    def _step(self, action):
        self.pos += int(action) - 1 + 0.1 * float(self._rng.normal())
        return np.array([self.pos]), -abs(self.pos), False, {}


class ConstantAction(Policy):
    kind = "constant"

    def __init__(self, action: int, obs_dim: int = 1, action_count: int = 3) -> None:
        self.action = action
        self.obs_dim = obs_dim
        self.action_count = action_count

    def act(self, obs, memory, rng):
        return self.action, memory


class RandomAction(Policy):
    def __init__(self, obs_dim: int = 1, action_count: int = 3) -> None:
        self.obs_dim = obs_dim
        self.action_count = action_count

    def act(self, obs, memory, rng):
        return int(rng.integers(self.action_count)), memory


@pytest.fixture
def line_env():
    return LineEnv()


ACCEPTANCE_LINES: list[str] = []


def pytest_terminal_summary(terminalreporter):
    if ACCEPTANCE_LINES:
        terminalreporter.section("acceptance criteria")
        for line in ACCEPTANCE_LINES:
            terminalreporter.write_line(line)
