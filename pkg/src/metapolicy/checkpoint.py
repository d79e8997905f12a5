"""Plain-text, versioned checkpoints for every policy kind and for hybrid worlds.

Layout::

    metapolicy-checkpoint 1
    begin <kind>
    meta <key> <value>          (optional, repeated)
    arch <int> <int> ...
    array <name> <dim> <dim> ...
    <row-major values, 17 significant digits>
    ...
    end

Meta-policies nest their selector and basis blocks between their own
``begin meta`` / ``end`` lines.
"""

from __future__ import annotations

import dataclasses
import math
from pathlib import Path

import numpy as np

from .basis import DistractorPolicy, GreedyQPolicy, QFunction, RBFFeatureMap
from .core import Policy
from .errors import (
    CheckpointError,
    CheckpointShapeError,
    CheckpointTruncatedError,
    CheckpointVersionError,
)
from .hybrid import HybridConfig, HybridWorld, LinearSystem, LQRPolicy, VoronoiPartition
from .meta import MetaPolicy
from .nn import GRU, MLP, NNPolicy

MAGIC = "metapolicy-checkpoint"
VERSION = 1


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


class _Writer:
    def __init__(self) -> None:
        self.lines: list[str] = []

    def begin(self, kind: str, metadata: dict | None = None) -> None:
        self.lines.append(f"begin {kind}")
        for key, value in sorted((metadata or {}).items()):
            self.lines.append(f"meta {key} {value}")

    def arch(self, *ints) -> None:
        self.lines.append("arch " + " ".join(str(int(i)) for i in ints))

    def array(self, name: str, arr) -> None:
        arr = np.asarray(arr, dtype=float)
        self.lines.append(" ".join(["array", name] + [str(d) for d in arr.shape]))
        self.lines.append(" ".join(_fmt(v) for v in arr.ravel()))

    def end(self) -> None:
        self.lines.append("end")


class _Reader:
    def __init__(self, text: str) -> None:
        self.lines = text.splitlines()
        self.pos = 0

    def next(self) -> str:
        if self.pos >= len(self.lines):
            raise CheckpointTruncatedError("checkpoint ended unexpectedly")
        line = self.lines[self.pos]
        self.pos += 1
        return line

    def peek(self) -> str | None:
        return self.lines[self.pos] if self.pos < len(self.lines) else None

    def begin(self) -> tuple[str, dict]:
        line = self.next().split()
        if len(line) != 2 or line[0] != "begin":
            raise CheckpointError(f"expected 'begin <kind>', got {' '.join(line)!r}")
        metadata = {}
        while (nxt := self.peek()) is not None and nxt.startswith("meta "):
            _, key, value = self.next().split(" ", 2)
            metadata[key] = value
        return line[1], metadata

    def arch(self) -> list[int]:
        parts = self.next().split()
        if not parts or parts[0] != "arch":
            raise CheckpointError("expected an 'arch' line")
        return [int(p) for p in parts[1:]]

    def array(self, name: str, shape: tuple[int, ...] | None = None) -> np.ndarray:
        header = self.next().split()
        if len(header) < 2 or header[0] != "array" or header[1] != name:
            raise CheckpointError(f"expected array {name!r}, got {' '.join(header[:2])!r}")
        dims = tuple(int(d) for d in header[2:])
        if shape is not None and dims != tuple(shape):
            raise CheckpointShapeError(f"array {name}: stored shape {dims}, expected {tuple(shape)}")
        values = self.next().split()
        count = math.prod(dims)
        if len(values) != count:
            if self.pos >= len(self.lines):
                raise CheckpointTruncatedError(f"array {name}: checkpoint ends after {len(values)} values")
            raise CheckpointShapeError(f"array {name}: {len(values)} values for shape {dims}")
        return np.array([float(v) for v in values], dtype=float).reshape(dims)

    def end(self) -> None:
        line = self.next()
        if line.strip() != "end":
            raise CheckpointError(f"expected 'end', got {line!r}")


def _write_norm(w: _Writer, low, high) -> None:
    w.array("obs_low", low)
    w.array("obs_high", high)


def _write_policy(w: _Writer, policy: Policy) -> None:
    meta = getattr(policy, "metadata", None)
    if isinstance(policy, MetaPolicy):
        w.begin("meta", meta)
        w.arch(len(policy.basis))
        _write_policy(w, policy.selector)
        for b in policy.basis:
            _write_policy(w, b)
    elif isinstance(policy, NNPolicy) and isinstance(policy.net, MLP):
        net = policy.net
        w.begin("mlp", meta)
        w.arch(net.in_dim, net.out_dim, *net.hidden)
        _write_norm(w, net.obs_low, net.obs_high)
        for name, arr in net.params.items():
            w.array(name, arr)
    elif isinstance(policy, NNPolicy) and isinstance(policy.net, GRU):
        net = policy.net
        w.begin("gru", meta)
        w.arch(net.in_dim, net.out_dim, net.hidden_dim)
        _write_norm(w, net.obs_low, net.obs_high)
        for name, arr in net.params.items():
            w.array(name, arr)
    elif isinstance(policy, GreedyQPolicy):
        fmap = policy.q.features
        w.begin("greedyq", meta)
        w.arch(policy.action_count, fmap.n_features, policy.obs_dim)
        _write_norm(w, fmap.obs_low, fmap.obs_high)
        w.array("centers", fmap.centers)
        w.array("bandwidths", fmap.bandwidths)
        w.array("weights", policy.q.weights)
    elif isinstance(policy, LQRPolicy):
        w.begin("lqr", meta)
        w.arch(policy.action_dim, policy.obs_dim)
        w.array("K", policy.K)
        w.array("goal", policy.goal)
    elif isinstance(policy, DistractorPolicy):
        w.begin("distractor", meta)
        w.arch(policy.action_count, policy.obs_dim, policy.seed)
    else:
        raise CheckpointError(f"cannot checkpoint policy of type {type(policy).__name__}")
    w.end()


def _read_net(r: _Reader, kind: str, arch: list[int]):
    if kind == "mlp":
        if len(arch) < 2:
            raise CheckpointShapeError("mlp arch needs input and output sizes")
        in_dim, out_dim, hidden = arch[0], arch[1], tuple(arch[2:])
        low = r.array("obs_low", (in_dim,))
        high = r.array("obs_high", (in_dim,))
        net = MLP(in_dim, out_dim, hidden, obs_low=low, obs_high=high)
    else:
        if len(arch) != 3:
            raise CheckpointShapeError("gru arch is (input, output, hidden)")
        in_dim, out_dim, hidden = arch
        low = r.array("obs_low", (in_dim,))
        high = r.array("obs_high", (in_dim,))
        net = GRU(in_dim, out_dim, hidden, obs_low=low, obs_high=high)
    for name, arr in net.params.items():
        net.params[name] = r.array(name, arr.shape)
    net._bind()
    return NNPolicy(net)


def _read_policy(r: _Reader) -> Policy:
    kind, metadata = r.begin()
    arch = r.arch()
    if kind == "meta":
        if len(arch) != 1 or arch[0] < 1:
            raise CheckpointShapeError("meta arch is the basis count")
        selector = _read_policy(r)
        basis = [_read_policy(r) for _ in range(arch[0])]
        if not isinstance(selector, NNPolicy) or selector.action_count != arch[0]:
            raise CheckpointShapeError("selector output size does not match the basis count")
        policy: Policy = MetaPolicy(selector, basis, metadata)
    elif kind in ("mlp", "gru"):
        policy = _read_net(r, kind, arch)
        policy.metadata = metadata
    elif kind == "greedyq":
        if len(arch) != 3:
            raise CheckpointShapeError("greedyq arch is (actions, features, obs_dim)")
        n_act, n_feat, d = arch
        low = r.array("obs_low", (d,))
        high = r.array("obs_high", (d,))
        centers = r.array("centers", (n_feat, d))
        bandwidths = r.array("bandwidths", (d,))
        weights = r.array("weights", (n_act, n_feat))
        policy = GreedyQPolicy(QFunction(weights, RBFFeatureMap(centers, bandwidths, low, high)), metadata)
    elif kind == "lqr":
        if len(arch) != 2:
            raise CheckpointShapeError("lqr arch is (input_dim, state_dim)")
        K = r.array("K", tuple(arch))
        goal = r.array("goal", (arch[1],))
        policy = LQRPolicy(K, goal, metadata)
    elif kind == "distractor":
        if len(arch) != 3:
            raise CheckpointShapeError("distractor arch is (actions, obs_dim, seed)")
        policy = DistractorPolicy(arch[0], arch[2], arch[1], metadata)
    else:
        raise CheckpointError(f"unknown policy kind {kind!r}")
    r.end()
    return policy


def _header(text: str) -> _Reader:
    r = _Reader(text)
    first = r.peek()
    if first is None:
        raise CheckpointTruncatedError("empty checkpoint")
    parts = first.split()
    if len(parts) != 2 or parts[0] != MAGIC or parts[1] != str(VERSION):
        raise CheckpointVersionError(f"unsupported checkpoint header {first[:60]!r}")
    r.next()
    return r


def dumps_policy(policy: Policy) -> str:
    w = _Writer()
    w.lines.append(f"{MAGIC} {VERSION}")
    _write_policy(w, policy)
    return "\n".join(w.lines) + "\n"


def loads_policy(text: str) -> Policy:
    r = _header(text)
    policy = _read_policy(r)
    if any(line.strip() for line in r.lines[r.pos:]):
        raise CheckpointError("trailing content after checkpoint")
    return policy


def save_policy(policy: Policy, path) -> None:
    Path(path).write_text(dumps_policy(policy))


def load_policy(path) -> Policy:
    return loads_policy(Path(path).read_text())


def _config_line(cfg: HybridConfig) -> str:
    parts = []
    for f in dataclasses.fields(cfg):
        value = getattr(cfg, f.name)
        if isinstance(value, tuple):
            text = ",".join(_fmt(v) for v in value)
        elif isinstance(value, int):
            text = str(value)
        else:
            text = _fmt(value)
        parts.append(f"{f.name}={text}")
    return "config " + " ".join(parts)


def _parse_config(line: str) -> HybridConfig:
    parts = line.split()
    if not parts or parts[0] != "config":
        raise CheckpointError("expected a 'config' line")
    kwargs = {}
    types = {f.name: f.type for f in dataclasses.fields(HybridConfig)}
    for item in parts[1:]:
        key, _, value = item.partition("=")
        if key not in types:
            raise CheckpointError(f"unknown hybrid config key {key!r}")
        kind = str(types[key])
        if "tuple" in kind:
            kwargs[key] = tuple(float(v) for v in value.split(","))
        elif kind == "int":
            kwargs[key] = int(value)
        else:
            kwargs[key] = float(value)
    return HybridConfig(**kwargs)


def dumps_world(world: HybridWorld) -> str:
    w = _Writer()
    w.lines.append(f"{MAGIC} {VERSION}")
    w.begin("hybrid-world")
    w.arch(len(world.partition.labels), len(world.systems))
    w.lines.append(_config_line(world.cfg))
    w.array("seeds", world.partition.seeds)
    w.array("labels", world.partition.labels)
    for i, s in enumerate(world.systems):
        w.array(f"A{i}", s.A)
        w.array(f"B{i}", s.B)
        w.array(f"K{i}", world.gains[i])
    w.end()
    return "\n".join(w.lines) + "\n"


def loads_world(text: str) -> HybridWorld:
    r = _header(text)
    kind, _ = r.begin()
    if kind != "hybrid-world":
        raise CheckpointError(f"expected a hybrid-world block, got {kind!r}")
    arch = r.arch()
    if len(arch) != 2:
        raise CheckpointShapeError("hybrid-world arch is (seed count, system count)")
    n_seeds, n_systems = arch
    cfg = _parse_config(r.next())
    seeds = r.array("seeds", (n_seeds, 2))
    labels = r.array("labels", (n_seeds,)).astype(np.int64)
    systems, gains = [], []
    for i in range(n_systems):
        A = r.array(f"A{i}", (4, 4))
        B = r.array(f"B{i}", (4, 2))
        gains.append(r.array(f"K{i}", (2, 4)))
        systems.append(LinearSystem(A, B))
    r.end()
    return HybridWorld(cfg, VoronoiPartition(seeds, labels), systems, gains)


def save_world(world: HybridWorld, path) -> None:
    Path(path).write_text(dumps_world(world))


def load_world(path) -> HybridWorld:
    return loads_world(Path(path).read_text())
