"""Versioned plain-text experiment configuration.

A config file is a list of ``key = value`` lines; ``#`` starts a comment.
The first setting must be ``format = 1``. Lists are comma separated.
Unknown keys and malformed values are usage errors. Every key, its type and
its default are listed in ``SCHEMA`` (``metapolicy config`` prints them).
"""

from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path

from .output import UsageError

FORMAT_VERSION = 1


@dataclass(frozen=True)
class Key:
    kind: str  # "int", "float", "str", "ints", "floats"
    default: object
    doc: str


SCHEMA: dict[str, Key] = {
    "seed": Key("int", 0, "master seed; repetition r uses seed + r"),
    "repetitions": Key("int", 3, "independent seeds per preset"),
    "eval_rollouts": Key("int", 100, "rollouts per fixed-policy evaluation"),
    # Car-SD
    "car_sd.d1_bias": Key("floats", (0.0, 0.015), "D1 position bias per step (x, y)"),
    "car_sd.d2_steer_deg": Key("float", 10.0, "D2 steering bias in degrees"),
    "car_sd.distance_coef": Key("float", 0.05, "per-step distance penalty coefficient"),
    "car_sd.shaping": Key("str", "distance", "distance | constant | linear | quadratic"),
    "car_sd.horizon": Key("int", 500, "episode length"),
    # basis training
    "basis.episodes": Key("int", 1000, "Q-learning episodes per basis policy"),
    "basis.eps_start": Key("float", 0.3, "initial exploration rate"),
    "basis.eps_end": Key("float", 0.05, "final exploration rate"),
    "basis.alpha": Key("float", 0.95, "learning rate on normalized features"),
    "basis.lam": Key("float", 0.4, "trace decay"),
    "basis.gamma": Key("float", 0.995, "discount"),
    "basis.n_centers": Key("int", 2000, "RBF kernel count"),
    "basis.width": Key("float", 0.15, "RBF bandwidth as a fraction of each normalized range"),
    "basis.eval_every": Key("int", 50, "episodes between greedy snapshot evaluations (0 = off)"),
    "basis.eval_rollouts": Key("int", 5, "rollouts per greedy snapshot evaluation"),
    "basis.attempts": Key("int", 3, "Q-learning restarts until a snapshot reaches the env threshold"),
    "basis.barrier_episodes": Key("int", 6000, "Q-learning episodes for the Car-Barrier policy"),
    "basis.barrier_start": Key("str", "mixed", "Car-Barrier training starts: fixed | uniform | mixed"),
    # trust region
    "trpo.batch_size": Key("int", 1000, "env steps per iteration (Car-SD, Hybrid)"),
    "trpo.barrier_batch_size": Key("int", 2000, "env steps per iteration (Car-Barrier)"),
    "trpo.gamma": Key("float", 0.995, "discount"),
    "trpo.max_kl": Key("float", 0.001, "trust-region size"),
    "trpo.cg_iters": Key("int", 10, "conjugate-gradient iterations"),
    "trpo.cg_damping": Key("float", 1e-5, "Fisher damping"),
    "trpo.backtrack_ratio": Key("float", 0.8, "line-search shrink factor"),
    "trpo.max_backtracks": Key("int", 15, "line-search attempts"),
    "policy.hidden": Key("ints", (32, 32), "MLP hidden sizes"),
    "policy.gru_hidden": Key("int", 32, "GRU hidden size"),
    # budgets
    "iters.meta": Key("int", 150, "fig1 meta-policy iterations"),
    "iters.scratch": Key("int", 600, "fig1 from-scratch iterations"),
    "iters.distractors": Key("int", 600, "fig5 iteration cap"),
    "iters.noise_meta": Key("int", 100, "fig7 meta-policy iterations"),
    "iters.noise_scratch": Key("int", 200, "fig7 from-scratch iterations"),
    "iters.hybrid": Key("int", 300, "fig6 iteration cap"),
    "iters.shaping": Key("int", 150, "fig8 meta-policy iterations"),
    # thresholds
    "threshold.car_sd": Key("float", 70.0, "Car-SD convergence return"),
    "threshold.car_barrier": Key("float", 350.0, "Car-Barrier convergence return"),
    "threshold.hybrid": Key("float", 0.9, "Hybrid convergence success rate"),
    "threshold.window": Key("int", 5, "iterations averaged before comparing with a threshold"),
    # experiment-specific
    "distractors.counts": Key("ints", (1, 3, 5), "distractor counts swept in fig5"),
    "noise.p": Key("floats", (0.1, 0.3, 0.5), "corruption probabilities swept in fig7"),
    "noise.learners": Key("str", "meta-mlp,meta-gru,scratch-mlp,scratch-gru", "learners trained per noise cell"),
    "noise.sigma": Key("floats", (0.05, 0.1), "noise scales swept in fig7"),
    "hybrid.counts": Key("ints", (4, 8, 16), "controller-set sizes swept in fig6"),
    "hybrid.dt": Key("float", 0.15, "hybrid time step"),
    "hybrid.sigma_w": Key("float", 0.01, "hybrid process noise"),
    "ucb.budget": Key("int", 4000, "env-step budget per UCB run"),
    "ucb.distractors": Key("int", 3, "distractor arms"),
    "ucb.runs": Key("int", 10, "UCB seeds"),
    "ucb.low": Key("float", -300.0, "return mapped to 0"),
    "ucb.high": Key("float", 500.0, "return mapped to 1"),
    "traces.rollouts": Key("int", 100, "rollouts exported by fig4"),
}


def _parse(key: str, kind: str, text: str):
    text = text.strip()
    try:
        if kind == "int":
            return int(text)
        if kind == "float":
            return float(text)
        if kind == "str":
            return text
        items = [t.strip() for t in text.split(",") if t.strip()]
        if kind == "ints":
            return tuple(int(t) for t in items)
        return tuple(float(t) for t in items)
    except ValueError:
        raise UsageError(f"{key}: cannot parse {text!r} as {kind}") from None


def _format(kind: str, value) -> str:
    if kind in ("ints", "floats"):
        return ",".join(repr(float(v)) if kind == "floats" else str(v) for v in value)
    if kind == "float":
        return repr(float(value))
    return str(value)


class ExperimentConfig:
    """Validated settings; index with dotted keys (``cfg["trpo.max_kl"]``)."""

    def __init__(self, values: dict | None = None) -> None:
        self._values = {k: spec.default for k, spec in SCHEMA.items()}
        for key, value in (values or {}).items():
            self.set(key, value)

    def __getitem__(self, key: str):
        if key not in self._values:
            raise UsageError(f"unknown config key {key!r}")
        return self._values[key]

    def keys(self) -> list[str]:
        return list(self._values)

    def set(self, key: str, value) -> None:
        if key not in SCHEMA:
            raise UsageError(f"unknown config key {key!r}")
        spec = SCHEMA[key]
        if isinstance(value, str) and spec.kind != "str":
            value = _parse(key, spec.kind, value)
        elif spec.kind in ("ints", "floats"):
            value = tuple(int(v) if spec.kind == "ints" else float(v) for v in value)
        elif spec.kind == "int":
            value = int(value)
        elif spec.kind == "float":
            value = float(value)
        self._values[key] = value

    def replace(self, **changes) -> "ExperimentConfig":
        """Copy with ``section__name=value`` overrides."""
        out = ExperimentConfig(dict(self._values))
        for name, value in changes.items():
            out.set(name.replace("__", "."), value)
        return out

    def dumps(self) -> str:
        lines = [f"format = {FORMAT_VERSION}"]
        for key, spec in SCHEMA.items():
            lines.append(f"{key} = {_format(spec.kind, self._values[key])}")
        return "\n".join(lines) + "\n"

    @classmethod
    def loads(cls, text: str) -> "ExperimentConfig":
        cfg = cls()
        seen_format = False
        for n, raw in enumerate(text.splitlines(), 1):
            line = raw.split("#", 1)[0].strip()
            if not line:
                continue
            key, sep, value = line.partition("=")
            if not sep:
                raise UsageError(f"line {n}: expected 'key = value'")
            key = key.strip()
            if not seen_format:
                if key != "format":
                    raise UsageError("config must start with 'format = 1'")
                if value.strip() != str(FORMAT_VERSION):
                    raise UsageError(f"unsupported config format {value.strip()!r}")
                seen_format = True
                continue
            cfg.set(key, _parse(key, SCHEMA[key].kind, value) if key in SCHEMA else value)
        if not seen_format:
            raise UsageError("config must start with 'format = 1'")
        return cfg

    @classmethod
    def load(cls, path) -> "ExperimentConfig":
        path = Path(path)
        if not path.is_file():
            raise UsageError(f"{path}: no such config file")
        return cls.loads(path.read_text())


def schema_text() -> str:
    rows = [f"format = {FORMAT_VERSION}  # required first line"]
    for key, spec in SCHEMA.items():
        rows.append(f"{key} = {_format(spec.kind, spec.default)}  # {spec.kind}: {spec.doc}")
    return "\n".join(rows) + "\n"
