"""Hybrid Control: piecewise-linear dynamics over a Voronoi map with LQR controllers.

The state is ``(x, y, vx, vy)``. Each Voronoi cell of the 12 x 12 map carries
one of four linear systems; the dynamics are linear about the goal state,
``s' - g = A (s - g) + B u + w``, so every synthesized regulator
``u = -K (s - g)`` shares the goal as its equilibrium.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .core import Env, Policy
from .errors import ConfigError, GenerationError, NumericError


@dataclass(frozen=True)
class LinearSystem:
    A: np.ndarray
    B: np.ndarray

    @property
    def state_dim(self) -> int:
        return self.A.shape[0]

    @property
    def input_dim(self) -> int:
        return self.B.shape[1]


def nominal_system(d: int, m: int, dt: float = 1.0) -> tuple[np.ndarray, np.ndarray]:
    """Double integrator when ``d == 2 m``, otherwise the identity maps."""
    if d == 2 * m:
        eye = np.eye(m)
        A0 = np.block([[eye, dt * eye], [np.zeros((m, m)), eye]])
        B0 = np.vstack([0.5 * dt * dt * eye, dt * eye])
        return A0, B0
    if d == m:
        return np.eye(d), np.eye(d)
    raise ConfigError(f"no nominal system for state dim {d} and input dim {m}")


def rotation(angle: float) -> np.ndarray:
    c, s = math.cos(angle), math.sin(angle)
    return np.array([[c, -s], [s, c]])


def solve_dare(A, B, Q, R, tol: float = 1e-10, max_iter: int = 10_000) -> np.ndarray:
    """Discrete algebraic Riccati equation by fixed-point iteration from ``P = Q``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    Q = np.atleast_2d(np.asarray(Q, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = Q.copy()
    for _ in range(max_iter):
        # divergence is detected below, so overflow on the way is expected
        with np.errstate(over="ignore", invalid="ignore"):
            P_new = _riccati_map(A, B, Q, R, P)
        if not np.all(np.isfinite(P_new)):
            raise NumericError("Riccati iteration produced non-finite values")
        delta = np.max(np.abs(P_new - P))
        P = P_new
        if delta < tol:
            residual = np.max(np.abs(P - _riccati_map(A, B, Q, R, P)))
            if residual >= 10 * tol:
                raise NumericError(f"DARE residual {residual:.3g} above {10 * tol:.3g}")
            return P
    raise NumericError(f"Riccati iteration did not converge in {max_iter} iterations")


def _riccati_map(A, B, Q, R, P):
    BtP = B.T @ P
    G = np.linalg.solve(R + BtP @ B, BtP @ A)
    out = Q + A.T @ P @ A - A.T @ P @ B @ G
    return 0.5 * (out + out.T)


def lqr_gain(A, B, Q, R, tol: float = 1e-10, max_iter: int = 10_000) -> np.ndarray:
    """``K = (R + B'PB)^{-1} B'PA`` for the control law ``u = -K (x - goal)``."""
    A = np.atleast_2d(np.asarray(A, dtype=float))
    B = np.atleast_2d(np.asarray(B, dtype=float))
    R = np.atleast_2d(np.asarray(R, dtype=float))
    P = solve_dare(A, B, Q, R, tol, max_iter)
    return np.linalg.solve(R + B.T @ P @ B, B.T @ P @ A)


def spectral_radius(M) -> float:
    return float(np.max(np.abs(np.linalg.eigvals(M))))


def sample_linear_system(
    rng: np.random.Generator,
    d: int,
    m: int,
    a_width: float = 0.1,
    b_width: float = 0.05,
    dt: float = 1.0,
    input_angle: float = 0.0,
    mirrored: bool = False,
    Q=None,
    R=None,
    max_attempts: int = 100,
) -> LinearSystem:
    """``A = A0 + E``, ``B = B0 rot(angle) + F`` with uniform perturbations.

    ``mirrored`` reflects the input map (``B0 rot(angle) diag(1, -1)``).

    Resamples until the Riccati iteration converges (stabilizable draw).
    """
    if d < 1 or m < 1:
        raise ConfigError("d and m must be >= 1")
    A0, B0 = nominal_system(d, m, dt)
    if m == 2 and input_angle != 0.0:
        B0 = B0 @ rotation(input_angle)
    if m == 2 and mirrored:
        B0 = B0 @ np.diag([1.0, -1.0])
    Q = np.eye(d) if Q is None else Q
    R = np.eye(m) if R is None else R
    for _ in range(max_attempts):
        A = A0 + rng.uniform(-a_width, a_width, size=(d, d)) if a_width > 0 else A0.copy()
        B = B0 + rng.uniform(-b_width, b_width, size=(d, m)) if b_width > 0 else B0.copy()
        try:
            K = lqr_gain(A, B, Q, R)
        except NumericError:
            continue
        if spectral_radius(A - B @ K) < 1.0:
            return LinearSystem(A, B)
    raise GenerationError(f"no stabilizable system in {max_attempts} attempts")


@dataclass(frozen=True)
class VoronoiPartition:
    seeds: np.ndarray  # (n, 2)
    labels: np.ndarray  # (n,)

    def assign(self, point) -> int:
        d = self.seeds - np.asarray(point, dtype=float)[:2]
        return int(self.labels[int(np.argmin(np.einsum("ij,ij->i", d, d)))])


def voronoi_assign(partition: VoronoiPartition, point) -> int:
    """Label of the nearest seed; ties go to the lowest seed index."""
    return partition.assign(point)


def make_partition(rng, n_seeds: int = 100, n_labels: int = 4, size: float = 12.0,
                   grid: int = 120, max_attempts: int = 100) -> VoronoiPartition:
    """Random seeds and labels, redrawn until every label owns part of a grid."""
    xs = (np.arange(grid) + 0.5) * size / grid
    gx, gy = np.meshgrid(xs, xs)
    pts = np.stack([gx.ravel(), gy.ravel()], axis=1)
    for _ in range(max_attempts):
        seeds = rng.uniform(0.0, size, size=(n_seeds, 2))
        labels = rng.integers(n_labels, size=n_seeds)
        d2 = ((pts[:, None, :] - seeds[None, :, :]) ** 2).sum(axis=2)
        covered = np.unique(labels[np.argmin(d2, axis=1)])
        if len(covered) == n_labels:
            return VoronoiPartition(seeds, labels)
    raise GenerationError("could not cover every label")


class LQRPolicy(Policy):
    kind = "lqr"
    action_count = None

    def __init__(self, K, goal, metadata: dict | None = None) -> None:
        self.K = np.atleast_2d(np.asarray(K, dtype=float))
        self.goal = np.asarray(goal, dtype=float)
        self.obs_dim = self.K.shape[1]
        self.action_dim = self.K.shape[0]
        self.metadata = dict(metadata or {})

    def act(self, obs, memory, rng):
        return -self.K @ (np.asarray(obs, dtype=float) - self.goal), memory


@dataclass(frozen=True)
class HybridConfig:
    size: float = 12.0
    n_seeds: int = 100
    n_regions: int = 4
    n_extra: int = 12
    dt: float = 0.15
    a_width: float = 0.1
    b_width: float = 0.05
    # input-map rotation per region system, degrees; by default every region
    # perturbs the same nominal map and only the extras are rotated
    region_angles: tuple[float, ...] = (0.0, 0.0, 0.0, 0.0)
    sigma_w: float = 0.01
    goal_radius: float = 0.4
    horizon: int = 100
    escape_radius: float = 50.0  # episode fails once any state coordinate is this far from the goal
    start: tuple[float, float] = (1.0, 1.0)
    goal: tuple[float, float] = (11.0, 11.0)
    q_weight: float = 1.0
    r_weight: float = 0.1

    def __post_init__(self):
        if len(self.region_angles) != self.n_regions:
            raise ConfigError("one input angle per region system")
        if self.horizon < 1:
            raise ConfigError("horizon must be >= 1")

    @property
    def Q(self) -> np.ndarray:
        return self.q_weight * np.eye(4)

    @property
    def R(self) -> np.ndarray:
        return self.r_weight * np.eye(2)

    @property
    def goal_state(self) -> np.ndarray:
        return np.array([self.goal[0], self.goal[1], 0.0, 0.0])


@dataclass
class HybridWorld:
    """Everything random about a hybrid-control experiment, drawn once."""

    cfg: HybridConfig
    partition: VoronoiPartition
    systems: list[LinearSystem]  # region systems first, then extras
    gains: list[np.ndarray] = field(default_factory=list)

    @classmethod
    def generate(cls, cfg: HybridConfig, rng: np.random.Generator) -> "HybridWorld":
        part_rng, sys_rng = rng.spawn(2)
        partition = make_partition(part_rng, cfg.n_seeds, cfg.n_regions, cfg.size)
        systems = []
        angles = [math.radians(a) for a in cfg.region_angles]
        angles += list(sys_rng.uniform(0.0, 2.0 * math.pi, size=cfg.n_extra))
        for i, angle in enumerate(angles):
            # extras get a mirrored input map, so their controllers push the
            # wrong way along one axis in every region
            systems.append(sample_linear_system(
                sys_rng, 4, 2, cfg.a_width, cfg.b_width, cfg.dt, angle, i >= cfg.n_regions, cfg.Q, cfg.R))
        world = cls(cfg, partition, systems)
        world.gains = [lqr_gain(s.A, s.B, cfg.Q, cfg.R) for s in systems]
        return world

    def controllers(self, count: int) -> list[LQRPolicy]:
        """The region controllers followed by ``count - n_regions`` extras."""
        if not self.cfg.n_regions <= count <= len(self.systems):
            raise ConfigError(f"controller count must lie in [{self.cfg.n_regions}, {len(self.systems)}]")
        return [LQRPolicy(self.gains[i], self.cfg.goal_state, {"system": i}) for i in range(count)]


def escaped(state, cfg: HybridConfig) -> bool:
    return bool(np.max(np.abs(np.asarray(state) - cfg.goal_state)) > cfg.escape_radius)


def hybrid_step(state, u, world: HybridWorld, rng: np.random.Generator) -> tuple[np.ndarray, float, bool]:
    """One transition under the region system at the current position.

    ``done`` reports only goal arrival; the horizon is enforced by the env.
    There are no walls: off-map positions take the region of the nearest seed.
    """
    cfg = world.cfg
    state = np.asarray(state, dtype=float)
    u = np.asarray(u, dtype=float)
    if not np.all(np.isfinite(u)):
        raise NumericError("non-finite control")
    g = cfg.goal_state
    err = state - g
    reward = -float(err @ cfg.Q @ err) - float(u @ cfg.R @ u)
    system = world.systems[world.partition.assign(state[:2])]
    new = g + system.A @ err + system.B @ u
    if cfg.sigma_w > 0:
        new = new + rng.normal(0.0, cfg.sigma_w, size=new.shape)
    done = math.hypot(new[0] - g[0], new[1] - g[1]) < cfg.goal_radius
    return new, reward, done


class HybridEnv(Env):
    name = "hybrid"
    obs_dim = 4
    action_count = None
    action_dim = 2

    def __init__(self, world: HybridWorld) -> None:
        super().__init__()
        self.world = world
        cfg = world.cfg
        self.horizon = cfg.horizon
        self.obs_low = np.array([0.0, 0.0, -2.0, -2.0])
        self.obs_high = np.array([cfg.size, cfg.size, 2.0, 2.0])
        self.state = np.zeros(4)
        self._rng: np.random.Generator | None = None

    def _reset(self, rng):
        self._rng = rng
        self.state = np.array([self.world.cfg.start[0], self.world.cfg.start[1], 0.0, 0.0])
        return self.state.copy()

    def _step(self, action):
        self.state, reward, done = hybrid_step(self.state, action, self.world, self._rng)
        lost = escaped(self.state, self.world.cfg)
        info = {"state": self.state.copy(), "success": done, "escaped": lost,
                "region": self.world.partition.assign(self.state[:2])}
        return self.state.copy(), reward, done or lost, info
