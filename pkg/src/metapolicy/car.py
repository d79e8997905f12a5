"""RC-car kinematics and the Car-SD / Car-Barrier environments.

The car state is ``(x, y, v, theta)``. Nine discrete actions pair a speed
change from ``(+0.03, 0, -0.03)`` with a steering angle from ``(+30, 0, -30)``
degrees; index ``i`` decodes to ``(DV[i // 3], STEER[i % 3])``.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from enum import Enum

import numpy as np

from .core import Env
from .errors import ConfigError

DV_TABLE = (0.03, 0.0, -0.03)
STEER_TABLE = (math.radians(30.0), 0.0, math.radians(-30.0))
N_ACTIONS = 9


def decode_action(index: int) -> tuple[float, float]:
    if not 0 <= index < N_ACTIONS:
        raise ConfigError(f"car action index {index} outside [0, 9)")
    return DV_TABLE[index // 3], STEER_TABLE[index % 3]


def encode_action(dv_index: int, steer_index: int) -> int:
    return 3 * dv_index + steer_index


def wrap_angle(theta: float) -> float:
    """Wrap to (-pi, pi]."""
    wrapped = math.remainder(theta, 2.0 * math.pi)
    if wrapped == -math.pi:
        return math.pi
    return wrapped


@dataclass(frozen=True)
class Rect:
    xmin: float
    xmax: float
    ymin: float
    ymax: float

    def contains(self, x: float, y: float) -> bool:
        return self.xmin <= x <= self.xmax and self.ymin <= y <= self.ymax


@dataclass(frozen=True)
class Kinematics:
    dt: float = 0.1
    length: float = 0.3
    v_max: float = 0.3


@dataclass(frozen=True)
class CarDynamics:
    position_bias: tuple[float, float] = (0.0, 0.0)
    steer_bias: float = 0.0


NOMINAL = CarDynamics()
D1 = CarDynamics(position_bias=(0.0, 0.015))
D2 = CarDynamics(steer_bias=math.radians(10.0))


def car_step(
    state,
    action: int,
    dyn: CarDynamics,
    bounds: Rect,
    kin: Kinematics = Kinematics(),
) -> tuple[np.ndarray, bool]:
    """Advance the bicycle model one step; exits are clamped and flagged."""
    x, y, v, theta = (float(s) for s in state)
    dv, steer = decode_action(int(action))
    v_new = min(max(v + dv, -kin.v_max), kin.v_max)
    theta_new = wrap_angle(theta + (v_new / kin.length) * math.tan(steer + dyn.steer_bias) * kin.dt)
    x_new = x + v_new * math.cos(theta_new) * kin.dt + dyn.position_bias[0]
    y_new = y + v_new * math.sin(theta_new) * kin.dt + dyn.position_bias[1]
    collided = False
    if not bounds.contains(x_new, y_new):
        collided = True
        x_new = min(max(x_new, bounds.xmin), bounds.xmax)
        y_new = min(max(y_new, bounds.ymin), bounds.ymax)
    return np.array([x_new, y_new, v_new, theta_new]), collided


class Shaping(str, Enum):
    DISTANCE_PROPORTIONAL = "distance"
    CONSTANT_MINUS_ONE = "constant"
    NEGATIVE_LINEAR = "linear"
    NEGATIVE_QUADRATIC = "quadratic"


def car_sd_reward(
    dist: float,
    collided: bool,
    reached_goal: bool,
    shaping: Shaping | str,
    coef: float = 1.0,
    wall_penalty: float = -10.0,
    goal_bonus: float = 100.0,
) -> float:
    """Per-step Car-SD reward given the post-step distance to the goal."""
    shaping = Shaping(shaping)
    if shaping is Shaping.CONSTANT_MINUS_ONE:
        r = -1.0
    elif shaping is Shaping.NEGATIVE_QUADRATIC:
        r = -coef * dist * dist
    else:
        r = -coef * dist
    if collided:
        r += wall_penalty
    if reached_goal:
        r += goal_bonus
    return r


def barrier_entry(p0, p1, rect: Rect) -> float | None:
    """Smallest ``t`` in [0, 1] with ``p0 + t (p1 - p0)`` in the closed rect, else None.

    Liang-Barsky slab clipping with inclusive boundaries.
    """
    t0, t1 = 0.0, 1.0
    d = (p1[0] - p0[0], p1[1] - p0[1])
    for axis, (lo, hi) in enumerate(((rect.xmin, rect.xmax), (rect.ymin, rect.ymax))):
        p = p0[axis]
        if d[axis] == 0.0:
            if p < lo or p > hi:
                return None
            continue
        ta = (lo - p) / d[axis]
        tb = (hi - p) / d[axis]
        if ta > tb:
            ta, tb = tb, ta
        t0 = max(t0, ta)
        t1 = min(t1, tb)
        if t0 > t1:
            return None
    return t0


def barrier_collision(p0, p1, rect: Rect) -> bool:
    return barrier_entry(p0, p1, rect) is not None


@dataclass(frozen=True)
class ObservationNoiseConfig:
    probability: float = 0.0
    scale: float = 0.0

    def __post_init__(self):
        if not 0.0 <= self.probability <= 1.0:
            raise ConfigError("noise probability must lie in [0, 1]")
        if self.scale < 0.0:
            raise ConfigError("noise scale must be >= 0")

    @property
    def active(self) -> bool:
        return self.probability > 0.0 and self.scale > 0.0


def noisy_observe(state, cfg: ObservationNoiseConfig, rng: np.random.Generator, ranges) -> np.ndarray:
    """Observation of ``state``; with probability p every component gets N(0, (scale * range_i)^2)."""
    obs = np.array(state, dtype=float)
    if not cfg.active:
        return obs
    if rng.random() < cfg.probability:
        obs = obs + rng.normal(0.0, 1.0, size=obs.shape) * cfg.scale * np.asarray(ranges)
    return obs


START_MODES = ("fixed", "uniform", "mixed")


@dataclass(frozen=True)
class CarSDConfig:
    width: float = 7.0
    height: float = 4.0
    start: tuple[float, float] = (1.0, 2.0)
    start_heading: float = 0.0
    start_jitter: tuple[float, float] = (0.1, 0.1)  # (position half-width, heading half-width)
    # "fixed" (jittered start), "uniform" (random pose) or "mixed" (either, evenly); the
    # last two are exploring starts for basis training
    start_mode: str = "fixed"
    goal: tuple[float, float] = (4.0, 2.0)
    goal_radius: float = 0.2
    goal_speed: float = 0.2
    d1_radius: float = 1.0
    d1: CarDynamics = D1
    d2: CarDynamics = D2
    regime: str = "mixed"  # "mixed", "d1" or "d2"
    horizon: int = 500
    shaping: Shaping = Shaping.DISTANCE_PROPORTIONAL
    distance_coef: float = 0.05
    wall_penalty: float = -10.0
    goal_bonus: float = 100.0
    kinematics: Kinematics = field(default_factory=Kinematics)
    noise: ObservationNoiseConfig = field(default_factory=ObservationNoiseConfig)

    def __post_init__(self):
        if self.start_mode not in START_MODES:
            raise ConfigError(f"unknown start mode {self.start_mode!r}")
        if self.regime not in ("mixed", "d1", "d2"):
            raise ConfigError(f"unknown regime {self.regime!r}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        object.__setattr__(self, "shaping", Shaping(self.shaping))


@dataclass(frozen=True)
class CarBarrierConfig:
    width: float = 5.0
    height: float = 4.0
    start: tuple[float, float] = (1.0, 2.0)
    start_heading: float = 0.0
    start_jitter: tuple[float, float] = (0.1, 0.1)
    start_mode: str = "fixed"
    goal: tuple[float, float] = (4.0, 2.0)
    goal_radius: float = 0.4
    barrier: Rect = Rect(2.4, 2.6, 1.2, 2.8)
    horizon: int = 200
    step_penalty: float = -1.0
    goal_reward: float = 500.0
    barrier_penalty: float = -100.0
    wall_penalty: float = 0.0
    dynamics: CarDynamics = NOMINAL
    kinematics: Kinematics = field(default_factory=Kinematics)
    noise: ObservationNoiseConfig = field(default_factory=ObservationNoiseConfig)

    def __post_init__(self):
        if self.start_mode not in START_MODES:
            raise ConfigError(f"unknown start mode {self.start_mode!r}")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if not barrier_collision(self.start, self.goal, self.barrier):
            raise ConfigError("barrier must block the straight start-goal segment")


class _CarEnv(Env):
    obs_dim = 4
    action_count = N_ACTIONS

    def __init__(self, cfg) -> None:
        super().__init__()
        self.cfg = cfg
        self.bounds = Rect(0.0, cfg.width, 0.0, cfg.height)
        v_max = cfg.kinematics.v_max
        self.obs_low = np.array([0.0, 0.0, -v_max, -math.pi])
        self.obs_high = np.array([cfg.width, cfg.height, v_max, math.pi])
        self.obs_range = self.obs_high - self.obs_low
        self.horizon = cfg.horizon
        self.state = np.zeros(4)
        self._rng: np.random.Generator | None = None

    def _reset(self, rng):
        self._rng = rng
        mode = self.cfg.start_mode
        if mode == "uniform" or (mode == "mixed" and rng.random() < 0.5):
            self.state = self._uniform_start(rng)
            return self._observe()
        pos_j, head_j = self.cfg.start_jitter
        jitter = rng.uniform(-1.0, 1.0, size=3) * np.array([pos_j, pos_j, head_j])
        x, y = self.cfg.start
        self.state = np.array(
            [x + jitter[0], y + jitter[1], 0.0, wrap_angle(self.cfg.start_heading + jitter[2])]
        )
        return self._observe()

    def _uniform_start(self, rng) -> np.ndarray:
        """Random pose at rest, away from the walls, the goal and any barrier."""
        margin = 0.2
        barrier = getattr(self.cfg, "barrier", None)
        while True:
            x = rng.uniform(margin, self.cfg.width - margin)
            y = rng.uniform(margin, self.cfg.height - margin)
            theta = rng.uniform(-math.pi, math.pi)
            if math.hypot(x - self.cfg.goal[0], y - self.cfg.goal[1]) <= self.cfg.goal_radius:
                continue
            if barrier is not None and barrier.contains(x, y):
                continue
            return np.array([x, y, 0.0, theta])

    def _observe(self) -> np.ndarray:
        return noisy_observe(self.state, self.cfg.noise, self._rng, self.obs_range)

    def goal_distance(self, state=None) -> float:
        s = self.state if state is None else state
        return math.hypot(s[0] - self.cfg.goal[0], s[1] - self.cfg.goal[1])


class CarSDEnv(_CarEnv):
    """Drive to the goal across two dynamics regimes (D1 near the goal, D2 elsewhere)."""

    name = "car-sd"

    def regime_at(self, x: float, y: float) -> str:
        if self.cfg.regime != "mixed":
            return self.cfg.regime
        gx, gy = self.cfg.goal
        return "d1" if math.hypot(x - gx, y - gy) < self.cfg.d1_radius else "d2"

    def _step(self, action):
        cfg = self.cfg
        regime = self.regime_at(self.state[0], self.state[1])
        dyn = cfg.d1 if regime == "d1" else cfg.d2
        self.state, collided = car_step(self.state, action, dyn, self.bounds, cfg.kinematics)
        dist = self.goal_distance()
        success = dist < cfg.goal_radius and abs(self.state[2]) < cfg.goal_speed
        reward = car_sd_reward(
            dist, collided, success, cfg.shaping, cfg.distance_coef, cfg.wall_penalty, cfg.goal_bonus
        )
        info = {"state": self.state.copy(), "collided": collided, "success": success, "regime": regime}
        return self._observe(), reward, success, info


class CarBarrierEnv(_CarEnv):
    """Drive around a rectangular barrier to the goal."""

    name = "car-barrier"

    def _step(self, action):
        cfg = self.cfg
        p0 = (self.state[0], self.state[1])
        new_state, wall = car_step(self.state, action, cfg.dynamics, self.bounds, cfg.kinematics)
        hit = barrier_collision(p0, (new_state[0], new_state[1]), cfg.barrier)
        if hit:
            # blocked at the contact point: the car stays put and stops
            new_state[0], new_state[1] = p0
            new_state[2] = 0.0
        self.state = new_state
        success = self.goal_distance() < cfg.goal_radius
        reward = cfg.step_penalty
        if hit:
            reward += cfg.barrier_penalty
        if wall:
            reward += cfg.wall_penalty
        if success:
            reward += cfg.goal_reward
        info = {"state": self.state.copy(), "collided": hit, "wall": wall, "success": success}
        return self._observe(), reward, success, info
