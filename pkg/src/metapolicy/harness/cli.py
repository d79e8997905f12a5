"""Command-line entry point: ``metapolicy <subcommand> [flags]``.

Exit status is 0 on success, 2 for usage errors (bad flags, config or
checkpoint files) and 1 for numeric failures, which print the stage that
failed.
"""

from __future__ import annotations

import argparse
import sys
import time
from pathlib import Path

import numpy as np

from ..basis import greedy_policy, make_distractor, q_learning_best_of
from ..checkpoint import load_policy, load_world, save_policy, save_world
from ..composition import ConfidencePolicy, VotingEnsemble, fit_transition_kde, run_ucb
from ..core import Policy, batch_rollouts, child_seed, rollout
from ..errors import CheckpointError, ConfigError, NumericError
from ..hybrid import HybridConfig, HybridEnv, HybridWorld
from ..meta import IterationStats, MetaEnv, MetaPolicy
from .config import ExperimentConfig, schema_text
from .experiments import (PRESETS, TAG_DISTRACTOR, TAG_KDE, TAG_WORLD, car_barrier_env, car_sd_env, q_config, stage,
                          train_barrier_basis, train_learner, trpo_config)
from .output import UsageError, emit_svg_curve, write_curve
from .runner import run_preset

ENVS = ("car-sd", "car-sd-d1", "car-sd-d2", "car-barrier", "hybrid")


def _config(args) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if getattr(args, "config", None) else ExperimentConfig()
    for item in getattr(args, "set", None) or []:
        key, sep, value = item.partition("=")
        if not sep:
            raise UsageError(f"--set expects key=value, got {item!r}")
        cfg.set(key.strip(), value.strip())
    if getattr(args, "seed", None) is not None:
        cfg.set("seed", args.seed)
    return cfg


def _make_env(name: str, cfg: ExperimentConfig, args, seed: int):
    if name.startswith("car-sd"):
        regime = "mixed" if name == "car-sd" else name[-2:]
        return car_sd_env(cfg, regime, noise=tuple(args.noise) if args.noise else (0.0, 0.0))
    if name == "car-barrier":
        return car_barrier_env(cfg)
    world = _world(cfg, args, seed)
    return HybridEnv(world)


def _world(cfg: ExperimentConfig, args, seed: int) -> HybridWorld:
    if getattr(args, "world", None):
        return load_world(args.world)
    hcfg = HybridConfig(dt=cfg["hybrid.dt"], sigma_w=cfg["hybrid.sigma_w"])
    return HybridWorld.generate(hcfg, np.random.default_rng(child_seed(seed, TAG_WORLD)))


def _basis_set(args, env, cfg: ExperimentConfig, seed: int) -> list[Policy]:
    if isinstance(env, HybridEnv):
        if args.basis:
            raise UsageError("hybrid meta-training takes --controllers, not --basis")
        return env.world.controllers(args.controllers)
    if not args.basis:
        raise UsageError("--basis checkpoint files are required for this environment")
    basis = [load_policy(p) for p in args.basis]
    basis += [make_distractor(env.action_count, child_seed(seed, TAG_DISTRACTOR + i)) for i in range(args.distractors)]
    return basis


def _outdir(args) -> Path:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    return out


def cmd_config(args) -> int:
    sys.stdout.write(schema_text())
    return 0


def cmd_train_basis(args) -> int:
    cfg = _config(args)
    if args.env not in ("car-sd-d1", "car-sd-d2", "car-barrier"):
        raise UsageError("train-basis supports car-sd-d1, car-sd-d2 and car-barrier")
    barrier = args.env == "car-barrier"
    if args.iters is not None:
        cfg.set("basis.barrier_episodes" if barrier else "basis.episodes", args.iters)
    with stage(f"basis {args.env}"):
        if barrier:
            q = train_barrier_basis(cfg, cfg["seed"])
        else:
            env = _make_env(args.env, cfg, args, cfg["seed"])
            q = q_learning_best_of(env, q_config(cfg), cfg["seed"], cfg["basis.attempts"], cfg["threshold.car_sd"])
    policy = greedy_policy(q, {"env": args.env, "seed": cfg["seed"]})
    out = Path(args.out)
    if out.suffix != ".ckpt":
        out = _outdir(args) / f"basis-{args.env}.ckpt"
    save_policy(policy, out)
    print(out)
    return 0


def _train(args, meta: bool) -> int:
    cfg = _config(args)
    seed = cfg["seed"]
    if args.env in ("car-sd-d1", "car-sd-d2") and meta:
        raise UsageError("meta-training runs on car-sd, car-barrier or hybrid")
    env = _make_env(args.env, cfg, args, seed)
    iters = args.iters if args.iters is not None else (cfg["iters.meta"] if meta else cfg["iters.scratch"])
    batch = args.batch or (cfg["trpo.barrier_batch_size"] if args.env == "car-barrier" else cfg["trpo.batch_size"])
    out = _outdir(args)
    if meta:
        basis = _basis_set(args, env, cfg, seed)
        target, out_dim = MetaEnv(env, basis), len(basis)
    else:
        target, out_dim = env, env.action_count
    label = "meta" if meta else "scratch"
    policy, stats = train_learner(target, args.kind, out_dim, seed, trpo_config(cfg, iters, batch), cfg, label=label)
    write_curve(out / f"curve-{label}.csv", stats)
    save_policy(MetaPolicy(policy, basis) if meta else policy, out / f"policy-{label}.ckpt")
    if isinstance(env, HybridEnv):
        save_world(env.world, out / "world.ckpt")
    last = stats[-1]
    print(f"{label}: {len(stats)} iterations, last mean return {last.mean_return:.4g}, "
          f"success {last.success_rate:.3f}")
    return 0


def cmd_train_meta(args) -> int:
    return _train(args, meta=True)


def cmd_train_scratch(args) -> int:
    return _train(args, meta=False)


def cmd_baseline(args) -> int:
    cfg = _config(args)
    seed = cfg["seed"]
    env = _make_env(args.env, cfg, args, seed)
    basis = _basis_set(args, env, cfg, seed)
    rounds = args.iters if args.iters is not None else 10
    batch = args.batch or cfg["trpo.batch_size"]
    if args.method == "ucb":
        run = run_ucb(env, basis, batch * rounds, seed, cfg["ucb.low"], cfg["ucb.high"])
        stats = [IterationStats(i, r, 0.0, r, r, 0.0, 0.0, s - (run.steps[i - 1] if i else 0), True,
                                n_trajectories=1)
                 for i, (r, s) in enumerate(zip(run.returns, run.steps))]
        print("pull counts:", " ".join(str(int(c)) for c in run.counts), "most pulled:", run.most_pulled)
    else:
        if args.method == "voting":
            policy = VotingEnsemble(basis)
        else:
            kdes = []
            for i, b in enumerate(basis):
                own = b.metadata.get("env", args.env) if hasattr(b, "metadata") else args.env
                fit_env = _make_env(own, cfg, args, seed) if own in ENVS else env
                trs = [rollout(fit_env, b, child_seed(child_seed(seed, TAG_KDE), 100 * i + j)) for j in range(100)]
                kdes.append(fit_transition_kde(trs, env.action_count, env.obs_low, env.obs_high))
            policy = ConfidencePolicy(basis, kdes, env.obs_low, env.obs_high)
        stats = []
        for i in range(rounds):
            t0 = time.perf_counter()
            b = batch_rollouts(env, policy, batch, child_seed(seed, i))
            rets = b.returns()
            stats.append(IterationStats(i, float(rets.mean()), float(rets.std()), float(rets.min()),
                                        float(rets.max()), 0.0, 0.0, b.total_steps, True,
                                        success_rate=b.success_rate(), n_trajectories=len(rets),
                                        wall_seconds=time.perf_counter() - t0))
        print(f"{args.method}: mean return {np.mean([s.mean_return for s in stats]):.4g}")
    write_curve(_outdir(args) / f"curve-{args.method}.csv", stats)
    return 0


def cmd_preset(args) -> int:
    cfg = _config(args)
    if args.name not in PRESETS:
        raise UsageError(f"unknown preset {args.name!r}; choose from {', '.join(PRESETS)}")
    if args.iters is not None:
        for key in cfg.keys():
            if key.startswith("iters."):
                cfg.set(key, args.iters)
    if args.batch is not None:
        cfg.set("trpo.batch_size", args.batch)
        cfg.set("trpo.barrier_batch_size", args.batch)
    if args.repetitions is not None:
        cfg.set("repetitions", args.repetitions)
    report = run_preset(args.name, cfg, args.out)
    print(report.outdir / "summary.csv")
    return 0


def cmd_plot(args) -> int:
    labels = args.labels or [Path(p).stem for p in args.csv]
    if len(labels) != len(args.csv):
        raise UsageError("--labels must match the number of CSV files")
    emit_svg_curve(args.csv, labels, args.out, column=args.column, title=args.title)
    print(args.out)
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="metapolicy", description="Meta-policy composition experiments.")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p, out_default="runs"):
        p.add_argument("--seed", type=int, default=None, help="master seed (default from config)")
        p.add_argument("--out", default=out_default, help="output directory")
        p.add_argument("--config", default=None, help="plain-text config file (see `metapolicy config`)")
        p.add_argument("--set", action="append", metavar="KEY=VALUE", help="override one config key")
        p.add_argument("--iters", type=int, default=None, help="iteration budget")
        p.add_argument("--batch", type=int, default=None, help="env steps per iteration")

    def env_flags(p, choices=ENVS, default="car-sd"):
        p.add_argument("--env", choices=choices, default=default)
        p.add_argument("--noise", type=float, nargs=2, metavar=("P", "SIGMA"), help="Car-SD sensing noise")
        p.add_argument("--world", default=None, help="hybrid world checkpoint (default: generated from seed)")

    def basis_flags(p):
        p.add_argument("--basis", nargs="*", default=[], help="basis policy checkpoints")
        p.add_argument("--distractors", type=int, default=0, help="uniform-random policies appended to the basis")
        p.add_argument("--controllers", type=int, default=4, help="hybrid: number of LQR controllers")

    p = sub.add_parser("config", help="print the config schema with defaults")
    p.set_defaults(func=cmd_config)

    p = sub.add_parser("train-basis", help="Q(lambda) basis policy; --iters sets episodes")
    common(p)
    env_flags(p, ("car-sd-d1", "car-sd-d2", "car-barrier"), "car-sd-d1")
    p.set_defaults(func=cmd_train_basis)

    for name, func, help_text in (("train-meta", cmd_train_meta, "trust-region meta-policy over a basis set"),
                                  ("train-scratch", cmd_train_scratch, "trust-region policy over primitive actions")):
        p = sub.add_parser(name, help=help_text)
        common(p)
        env_flags(p)
        basis_flags(p)
        p.add_argument("--kind", choices=("mlp", "gru"), default="mlp")
        p.set_defaults(func=func)

    p = sub.add_parser("baseline", help="voting, confidence or UCB over a basis set; --iters sets rounds")
    common(p)
    env_flags(p)
    basis_flags(p)
    p.add_argument("--method", choices=("voting", "confidence", "ucb"), required=True)
    p.set_defaults(func=cmd_baseline)

    p = sub.add_parser("preset", help="run a figure preset over all repetitions")
    p.add_argument("name", help=", ".join(PRESETS))
    common(p)
    p.add_argument("--repetitions", type=int, default=None)
    p.set_defaults(func=cmd_preset)

    p = sub.add_parser("plot", help="SVG line plot from curve CSVs")
    p.add_argument("csv", nargs="+")
    p.add_argument("--labels", nargs="*")
    p.add_argument("--out", required=True)
    p.add_argument("--column", default="mean_return")
    p.add_argument("--title", default="")
    p.set_defaults(func=cmd_plot)
    return parser


def main(argv: list[str] | None = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    try:
        return args.func(args)
    except NumericError as exc:
        print(f"error: numeric failure in stage {getattr(exc, 'stage', None) or args.command}: {exc}",
              file=sys.stderr)
        return 1
    except (ConfigError, CheckpointError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    raise SystemExit(main())
