"""Experiment presets: each maps a config and a seed to records, curves and extra tables."""

from __future__ import annotations

import dataclasses
import math
from contextlib import contextmanager
from dataclasses import dataclass, field
from typing import Callable

import numpy as np

from ..basis import QLearningConfig, greedy_policy, make_distractor, q_learning_best_of
from ..car import CarBarrierConfig, CarBarrierEnv, CarDynamics, CarSDConfig, CarSDEnv, ObservationNoiseConfig
from ..composition import ConfidencePolicy, VotingEnsemble, fit_transition_kde, run_ucb
from ..errors import NumericError
from ..core import Env, Policy, child_seed, rollout
from ..hybrid import HybridConfig, HybridEnv, HybridWorld
from ..meta import IterationStats, MetaEnv, TRPOConfig, train
from ..nn import NNPolicy, make_policy
from .config import ExperimentConfig

# sub-seed tags, mixed with the repetition seed through ``child_seed``
TAG_D1, TAG_D2, TAG_META, TAG_SCRATCH, TAG_EVAL, TAG_KDE = 1, 2, 3, 4, 5, 6
TAG_VIABLE, TAG_WORLD, TAG_TRACE, TAG_UCB = 7, 8, 9, 10
TAG_DISTRACTOR = 1000


@dataclass
class Record:
    seed: int
    name: str
    metric: str
    value: float


@dataclass
class SeedResult:
    """Everything one repetition of a preset produced."""

    seed: int
    records: list[Record] = field(default_factory=list)
    curves: dict[str, list[IterationStats]] = field(default_factory=dict)
    tables: dict[str, tuple[list[str], list[list[str]]]] = field(default_factory=dict)
    traces: list = field(default_factory=list)
    worlds: dict[str, HybridWorld] = field(default_factory=dict)
    policies: dict[str, Policy] = field(default_factory=dict)

    def add(self, name: str, metric: str, value) -> None:
        self.records.append(Record(self.seed, name, metric, float("nan") if value is None else float(value)))

    def value(self, name: str, metric: str) -> float:
        for r in self.records:
            if r.name == name and r.metric == metric:
                return r.value
        raise KeyError((name, metric))


# --- building blocks ---------------------------------------------------------


def car_sd_env(cfg: ExperimentConfig, regime: str = "mixed", noise=(0.0, 0.0), shaping: str | None = None) -> CarSDEnv:
    return CarSDEnv(CarSDConfig(
        d1=CarDynamics(position_bias=tuple(cfg["car_sd.d1_bias"])),
        d2=CarDynamics(steer_bias=math.radians(cfg["car_sd.d2_steer_deg"])),
        regime=regime,
        horizon=cfg["car_sd.horizon"],
        shaping=shaping or cfg["car_sd.shaping"],
        distance_coef=cfg["car_sd.distance_coef"],
        noise=ObservationNoiseConfig(*noise),
    ))


def car_barrier_env(cfg: ExperimentConfig, start_mode: str = "fixed") -> CarBarrierEnv:
    return CarBarrierEnv(CarBarrierConfig(start_mode=start_mode))


def train_barrier_basis(cfg: ExperimentConfig, seed: int):
    """Q(lambda) on Car-Barrier with exploring starts, snapshots scored from the real start."""
    qcfg = dataclasses.replace(q_config(cfg), episodes=cfg["basis.barrier_episodes"])
    return q_learning_best_of(car_barrier_env(cfg, cfg["basis.barrier_start"]), qcfg, seed, cfg["basis.attempts"],
                              cfg["threshold.car_barrier"], eval_env=car_barrier_env(cfg))


def q_config(cfg: ExperimentConfig) -> QLearningConfig:
    return QLearningConfig(
        alpha=cfg["basis.alpha"], lam=cfg["basis.lam"], gamma=cfg["basis.gamma"],
        eps_start=cfg["basis.eps_start"], eps_end=cfg["basis.eps_end"], episodes=cfg["basis.episodes"],
        n_centers=cfg["basis.n_centers"], width=cfg["basis.width"],
        eval_every=cfg["basis.eval_every"], eval_rollouts=cfg["basis.eval_rollouts"],
    )


def trpo_config(cfg: ExperimentConfig, iterations: int, batch_size: int | None = None) -> TRPOConfig:
    return TRPOConfig(
        batch_size=batch_size or cfg["trpo.batch_size"], gamma=cfg["trpo.gamma"], max_kl=cfg["trpo.max_kl"],
        cg_iters=cfg["trpo.cg_iters"], cg_damping=cfg["trpo.cg_damping"],
        backtrack_ratio=cfg["trpo.backtrack_ratio"], max_backtracks=cfg["trpo.max_backtracks"],
        iterations=iterations,
    )


@contextmanager
def stage(name: str):
    """Tag a ``NumericError`` raised inside the block with the stage it came from."""
    try:
        yield
    except NumericError as exc:
        if getattr(exc, "stage", None) is None:
            exc.stage = name
        raise


_BASIS_CACHE: dict[tuple, Policy] = {}


def _basis_key(cfg: ExperimentConfig, *extra) -> tuple:
    keys = [k for k in cfg.keys() if k.startswith(("car_sd.", "basis."))]
    return tuple(cfg[k] for k in keys) + extra


def car_sd_bases(cfg: ExperimentConfig, seed: int) -> list[Policy]:
    """Greedy Q(lambda) policies trained on the D1-only and D2-only maps (memoized)."""
    out = []
    for regime, tag in (("d1", TAG_D1), ("d2", TAG_D2)):
        key = _basis_key(cfg, "car-sd", regime, seed)
        if key not in _BASIS_CACHE:
            with stage(f"basis car-sd-{regime}"):
                q = q_learning_best_of(car_sd_env(cfg, regime), q_config(cfg), child_seed(seed, tag),
                                       cfg["basis.attempts"], cfg["threshold.car_sd"])
            _BASIS_CACHE[key] = greedy_policy(q, {"env": f"car-sd-{regime}", "seed": seed})
        out.append(_BASIS_CACHE[key])
    return out


def barrier_viable(cfg: ExperimentConfig, seed: int) -> Policy:
    """Greedy Q(lambda) policy for Car-Barrier (memoized)."""
    key = _basis_key(cfg, "car-barrier", seed)
    if key not in _BASIS_CACHE:
        with stage("basis car-barrier"):
            q = train_barrier_basis(cfg, child_seed(seed, TAG_VIABLE))
        _BASIS_CACHE[key] = greedy_policy(q, {"env": "car-barrier", "seed": seed})
    return _BASIS_CACHE[key]


def clear_cache() -> None:
    _BASIS_CACHE.clear()


def evaluate(env: Env, policy: Policy, n: int, seed: int) -> tuple[float, float]:
    """Mean undiscounted return and success rate over ``n`` seeded rollouts."""
    trs = [rollout(env, policy, child_seed(seed, i)) for i in range(n)]
    return float(np.mean([t.episode_return for t in trs])), float(np.mean([t.success for t in trs]))


def smoothed(values, window: int) -> np.ndarray:
    """Trailing moving average (shorter windows at the start)."""
    v = np.asarray(values, dtype=float)
    c = np.cumsum(np.concatenate([[0.0], v]))
    idx = np.arange(1, len(v) + 1)
    lo = np.maximum(idx - window, 0)
    return (c[idx] - c[lo]) / (idx - lo)


def iterations_to_threshold(values, threshold: float, window: int) -> int | None:
    """First iteration whose trailing ``window`` average reaches ``threshold``."""
    if len(values) == 0:
        return None
    hit = np.flatnonzero(smoothed(values, window) >= threshold)
    return int(hit[0]) if hit.size else None


def steps_to_level(stats: list[IterationStats], level: float, window: int) -> int | None:
    """Cumulative env steps at the end of the first iteration whose smoothed return reaches ``level``."""
    it = iterations_to_threshold([s.mean_return for s in stats], level, window)
    if it is None:
        return None
    return int(sum(s.env_steps for s in stats[: it + 1]))


def converged_return(stats: list[IterationStats], tail: int = 10) -> float:
    return float(np.mean([s.mean_return for s in stats[-tail:]]))


def ninety_percent_level(converged: float) -> float:
    return 0.9 * converged if converged > 0 else converged - 0.1 * abs(converged)


def train_learner(env: Env, kind: str, out_dim: int, seed: int, tcfg: TRPOConfig, cfg: ExperimentConfig,
                  should_stop: Callable | None = None, label: str = "") -> tuple[NNPolicy, list[IterationStats]]:
    hidden = cfg["policy.gru_hidden"] if kind == "gru" else cfg["policy.hidden"]
    policy = make_policy(kind, env.obs_dim, out_dim, np.random.default_rng(seed), env.obs_low, env.obs_high, hidden)
    with stage(f"train {label or kind}"):
        stats = train(env, policy, tcfg, seed, should_stop=should_stop)
    return policy, stats


def _stop_after_threshold(threshold: float, window: int, key: str = "mean_return") -> Callable:
    def check(history):
        return iterations_to_threshold([getattr(s, key) for s in history], threshold, window) is not None
    return check


# --- presets -----------------------------------------------------------------


def fig1_baselines(cfg: ExperimentConfig, seed: int) -> SeedResult:
    """Basis policies, voting, transition-density confidence, meta-policy and from-scratch on Car-SD."""
    res = SeedResult(seed)
    bases = car_sd_bases(cfg, seed)
    mixed = car_sd_env(cfg)
    n_eval = cfg["eval_rollouts"]
    eval_seed = child_seed(seed, TAG_EVAL)
    for i, b in enumerate(bases, 1):
        ret, succ = evaluate(mixed, b, n_eval, eval_seed)
        res.add(f"basis-{i}", "return", ret)
        res.add(f"basis-{i}", "success", succ)
    ret, succ = evaluate(mixed, VotingEnsemble(bases), n_eval, eval_seed)
    res.add("voting", "return", ret)
    res.add("voting", "success", succ)
    kdes = []
    for i, (b, regime) in enumerate(zip(bases, ("d1", "d2"))):
        env = car_sd_env(cfg, regime)
        trs = [rollout(env, b, child_seed(child_seed(seed, TAG_KDE), 100 * i + j)) for j in range(100)]
        kdes.append(fit_transition_kde(trs, mixed.action_count, mixed.obs_low, mixed.obs_high))
    conf = ConfidencePolicy(bases, kdes, mixed.obs_low, mixed.obs_high)
    ret, succ = evaluate(mixed, conf, n_eval, eval_seed)
    res.add("confidence", "return", ret)
    res.add("confidence", "success", succ)

    menv = MetaEnv(mixed, bases)
    meta, meta_stats = train_learner(menv, "mlp", len(bases), child_seed(seed, TAG_META),
                                     trpo_config(cfg, cfg["iters.meta"]), cfg, label="meta")
    scratch, scratch_stats = train_learner(mixed, "mlp", mixed.action_count, child_seed(seed, TAG_SCRATCH),
                                           trpo_config(cfg, cfg["iters.scratch"]), cfg, label="scratch")
    res.curves["meta"] = meta_stats
    res.curves["scratch"] = scratch_stats
    res.policies["meta"] = meta
    res.policies["scratch"] = scratch
    window = cfg["threshold.window"]
    meta_conv = converged_return(meta_stats)
    scratch_conv = converged_return(scratch_stats)
    level = ninety_percent_level(meta_conv)
    res.add("meta", "return", meta_conv)
    res.add("scratch", "return", scratch_conv)
    res.add("meta", "success", np.mean([s.success_rate for s in meta_stats[-10:]]))
    res.add("scratch", "success", np.mean([s.success_rate for s in scratch_stats[-10:]]))
    meta_steps = steps_to_level(meta_stats, level, window)
    scratch_steps = steps_to_level(scratch_stats, level, window)
    res.add("meta", "steps_to_level", meta_steps)
    res.add("scratch", "steps_to_level", scratch_steps)
    res.add("scratch", "steps_total", sum(s.env_steps for s in scratch_stats))
    threshold = cfg["threshold.car_sd"]
    res.add("meta", "iters_to_threshold", iterations_to_threshold([s.mean_return for s in meta_stats], threshold, window))
    res.add("scratch", "iters_to_threshold",
            iterations_to_threshold([s.mean_return for s in scratch_stats], threshold, window))
    return res


def fig4_traces(cfg: ExperimentConfig, seed: int) -> SeedResult:
    """Train a Car-SD meta-policy and export (x, y, selected basis) for every step of 100 rollouts."""
    res = SeedResult(seed)
    bases = car_sd_bases(cfg, seed)
    menv = MetaEnv(car_sd_env(cfg), bases)
    meta, stats = train_learner(menv, "mlp", len(bases), child_seed(seed, TAG_META),
                                trpo_config(cfg, cfg["iters.meta"]), cfg, label="meta")
    res.curves["meta"] = stats
    res.policies["meta"] = meta
    traces = []
    fractions = []
    for k in range(cfg["traces.rollouts"]):
        tr = rollout(menv, meta, child_seed(child_seed(seed, TAG_TRACE), k))
        # pre-step positions: the reset state, then each post-step state but the last
        states = [tr.observations[0]] + [info["state"] for info in tr.infos[:-1]]
        pts = np.array([st[:2] for st in states])
        traces.append((k, pts, tr.actions))
        near = np.hypot(pts[:, 0] - menv.inner.cfg.goal[0], pts[:, 1] - menv.inner.cfg.goal[1]) < menv.inner.cfg.d1_radius
        if near.any():
            fractions.append(float(np.mean(np.asarray(tr.actions)[near] == 0)))
    res.traces = traces
    res.add("meta", "return", converged_return(stats))
    res.add("meta", "d1_basis_share_in_d1_region", np.mean(fractions) if fractions else None)
    return res


def fig5_distractors(cfg: ExperimentConfig, seed: int) -> SeedResult:
    """One viable Car-Barrier policy plus a growing number of uniform-random distractors."""
    res = SeedResult(seed)
    viable = barrier_viable(cfg, seed)
    env = car_barrier_env(cfg)
    ret, succ = evaluate(env, viable, cfg["eval_rollouts"], child_seed(seed, TAG_EVAL))
    res.add("viable", "return", ret)
    res.add("viable", "success", succ)
    threshold = cfg["threshold.car_barrier"]
    window = cfg["threshold.window"]
    for n in cfg["distractors.counts"]:
        basis = [viable] + [make_distractor(env.action_count, child_seed(seed, TAG_DISTRACTOR + i))
                            for i in range(n)]
        menv = MetaEnv(env, basis)
        _, stats = train_learner(menv, "mlp", len(basis), child_seed(seed, TAG_META + 10 * n),
                                 trpo_config(cfg, cfg["iters.distractors"], cfg["trpo.barrier_batch_size"]), cfg,
                                 should_stop=_stop_after_threshold(threshold, window), label=f"distractors-{n}")
        name = f"distractors-{n}"
        res.curves[name] = stats
        res.add(name, "iters_to_threshold",
                iterations_to_threshold([s.mean_return for s in stats], threshold, window))
        res.add(name, "final_return", converged_return(stats, window))
    return res


def fig6_hybrid(cfg: ExperimentConfig, seed: int) -> SeedResult:
    """Meta-policies over 4, 8 and 16 LQR controllers on the Voronoi hybrid map."""
    res = SeedResult(seed)
    hcfg = HybridConfig(dt=cfg["hybrid.dt"], sigma_w=cfg["hybrid.sigma_w"])
    world = HybridWorld.generate(hcfg, np.random.default_rng(child_seed(seed, TAG_WORLD)))
    res.worlds["world"] = world
    threshold = cfg["threshold.hybrid"]
    window = cfg["threshold.window"]
    rows = []
    for k in cfg["hybrid.counts"]:
        menv = MetaEnv(HybridEnv(world), world.controllers(k))
        _, stats = train_learner(menv, "mlp", k, child_seed(seed, TAG_META + 10 * k),
                                 trpo_config(cfg, cfg["iters.hybrid"]), cfg,
                                 should_stop=_stop_after_threshold(threshold, window, "success_rate"),
                                 label=f"controllers-{k}")
        name = f"controllers-{k}"
        res.curves[name] = stats
        res.add(name, "iters_to_threshold",
                iterations_to_threshold([s.success_rate for s in stats], threshold, window))
        res.add(name, "final_success", float(np.mean([s.success_rate for s in stats[-window:]])))
        rows += [[name, str(s.iteration), format(s.success_rate, ".6g")] for s in stats]
    res.tables["success"] = (["run", "iteration", "success_rate"], rows)
    return res


def fig7_noise(cfg: ExperimentConfig, seed: int) -> SeedResult:
    """Car-SD under sensing noise: meta (MLP, GRU) against from-scratch (MLP, GRU)."""
    res = SeedResult(seed)
    bases = car_sd_bases(cfg, seed)
    threshold = cfg["threshold.car_sd"]
    window = cfg["threshold.window"]
    learners = [s.strip() for s in cfg["noise.learners"].split(",") if s.strip()]
    for p in cfg["noise.p"]:
        for sigma in cfg["noise.sigma"]:
            env = car_sd_env(cfg, noise=(p, sigma))
            for j, learner in enumerate(learners):
                mode, kind = learner.split("-")
                if mode == "meta":
                    target, out_dim, iters = MetaEnv(env, bases), len(bases), cfg["iters.noise_meta"]
                else:
                    target, out_dim, iters = env, env.action_count, cfg["iters.noise_scratch"]
                name = f"p{p:g}-s{sigma:g}-{learner}"
                _, stats = train_learner(target, kind, out_dim, child_seed(seed, TAG_META + 100 + j),
                                         trpo_config(cfg, iters), cfg, label=name)
                res.curves[name] = stats
                res.add(name, "iters_to_threshold",
                        iterations_to_threshold([s.mean_return for s in stats], threshold, window))
                res.add(name, "return", converged_return(stats))
    return res


def fig8_reward_shaping(cfg: ExperimentConfig, seed: int) -> SeedResult:
    """Meta-policy and from-scratch learning under constant, linear and quadratic step rewards."""
    res = SeedResult(seed)
    bases = car_sd_bases(cfg, seed)
    iters = cfg["iters.shaping"]
    for shaping in ("constant", "linear", "quadratic"):
        env = car_sd_env(cfg, shaping=shaping)
        for mode in ("meta", "scratch"):
            target = MetaEnv(env, bases) if mode == "meta" else env
            out_dim = len(bases) if mode == "meta" else env.action_count
            name = f"{shaping}-{mode}"
            _, stats = train_learner(target, "mlp", out_dim, child_seed(seed, TAG_META + (mode == "scratch")),
                                     trpo_config(cfg, iters), cfg, label=name)
            res.curves[name] = stats
            res.add(name, "return", converged_return(stats))
            res.add(name, "success", float(np.mean([s.success_rate for s in stats[-10:]])))
    return res


def ucb_best_in_set(cfg: ExperimentConfig, seed: int) -> SeedResult:
    """UCB1 over one viable Car-Barrier policy and uniform-random distractors."""
    res = SeedResult(seed)
    viable = barrier_viable(cfg, seed)
    env = car_barrier_env(cfg)
    n_dist = cfg["ucb.distractors"]
    rows = []
    hits = 0
    for r in range(cfg["ucb.runs"]):
        run_seed = child_seed(child_seed(seed, TAG_UCB), r)
        rng = np.random.default_rng(run_seed)
        arms: list[Policy] = [make_distractor(env.action_count, child_seed(run_seed, TAG_DISTRACTOR + i))
                              for i in range(n_dist)]
        position = int(rng.integers(n_dist + 1))
        arms.insert(position, viable)
        budget = cfg["ucb.budget"]
        run = run_ucb(env, arms, budget, run_seed, cfg["ucb.low"], cfg["ucb.high"])
        # only pulls that finished inside the budget count
        within = [a for a, used in zip(run.pulls, run.steps) if used <= budget]
        counts = np.bincount(within, minlength=len(arms))
        hit = bool(within) and int(np.argmax(counts)) == position
        hits += hit
        rows.append([str(r), str(position), str(int(np.argmax(counts))), str(run.steps[-1]),
                     " ".join(str(int(c)) for c in counts)])
    res.tables["ucb_runs"] = (["run", "viable_arm", "most_pulled", "env_steps", "pull_counts"], rows)
    res.add("ucb", "viable_most_pulled_fraction", hits / max(cfg["ucb.runs"], 1))
    return res


PRESETS: dict[str, Callable[[ExperimentConfig, int], SeedResult]] = {
    "fig1-baselines": fig1_baselines,
    "fig4-traces": fig4_traces,
    "fig5-distractors": fig5_distractors,
    "fig6-hybrid": fig6_hybrid,
    "fig7-noise": fig7_noise,
    "fig8-reward-shaping": fig8_reward_shaping,
    "ucb-best-in-set": ucb_best_in_set,
}
