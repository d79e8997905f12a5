"""Run presets over repetitions and write their artifacts."""

from __future__ import annotations

import math
import os
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from ..checkpoint import save_policy, save_world
from .config import ExperimentConfig
from .experiments import PRESETS, SeedResult
from .output import UsageError, emit_svg_curve, write_csv, write_curve, write_summary, write_traces


@dataclass
class PresetReport:
    name: str
    outdir: Path
    results: list[SeedResult]

    def values(self, name: str, metric: str) -> list[float]:
        return [r.value(name, metric) for r in self.results]


def thread_cap() -> int:
    """Worker processes allowed by ``METAPOLICY_THREADS`` (default 1)."""
    raw = os.environ.get("METAPOLICY_THREADS", "1")
    try:
        n = int(raw)
    except ValueError:
        raise UsageError(f"METAPOLICY_THREADS must be an integer, got {raw!r}") from None
    if n < 1:
        raise UsageError("METAPOLICY_THREADS must be >= 1")
    return n


def _run_one(args):
    name, cfg_text, seed = args
    return PRESETS[name](ExperimentConfig.loads(cfg_text), seed)


def run_preset(name: str, cfg: ExperimentConfig, outdir, seeds: list[int] | None = None) -> PresetReport:
    """Run ``name`` for every repetition seed and write CSVs, summary and SVG plots under ``outdir/name``."""
    if name not in PRESETS:
        raise UsageError(f"unknown preset {name!r}; choose from {', '.join(PRESETS)}")
    if seeds is None:
        if cfg["repetitions"] < 1:
            raise UsageError("repetitions must be >= 1")
        seeds = [cfg["seed"] + r for r in range(cfg["repetitions"])]
    jobs = [(name, cfg.dumps(), s) for s in seeds]
    workers = min(thread_cap(), len(jobs))
    if workers > 1:
        with ProcessPoolExecutor(max_workers=workers) as pool:
            results = list(pool.map(_run_one, jobs))
    else:
        results = [PRESETS[name](cfg, s) for s in seeds]
    root = Path(outdir) / name
    write_artifacts(root, cfg, results)
    return PresetReport(name, root, results)


def write_artifacts(root: Path, cfg: ExperimentConfig, results: list[SeedResult]) -> None:
    root.mkdir(parents=True, exist_ok=True)
    (root / "config.txt").write_text(cfg.dumps())
    for res in results:
        sdir = root / f"seed-{res.seed}"
        sdir.mkdir(parents=True, exist_ok=True)
        write_csv(sdir / "results.csv", ["name", "metric", "value"],
                  [[r.name, r.metric, format(r.value, ".10g")] for r in res.records])
        for cname, stats in res.curves.items():
            write_curve(sdir / f"curve-{cname}.csv", stats)
        for tname, (header, rows) in res.tables.items():
            write_csv(sdir / f"{tname}.csv", header, rows)
        if res.traces:
            write_traces(sdir / "traces.csv", res.traces)
        for wname, world in res.worlds.items():
            save_world(world, sdir / f"{wname}.ckpt")
        for pname, policy in res.policies.items():
            save_policy(policy, sdir / f"policy-{pname}.ckpt")
        if res.curves:
            names = sorted(res.curves)
            emit_svg_curve([sdir / f"curve-{n}.csv" for n in names], names, sdir / "curves.svg",
                           title=f"{root.name} seed {res.seed}")
    write_summary(root / "summary.csv", summarize(results))


def summarize(results: list[SeedResult]) -> list[dict]:
    """Mean and std over repetitions for every (name, metric); NaN marks runs that never got there."""
    groups: dict[tuple[str, str], list[float]] = {}
    for res in results:
        for r in res.records:
            groups.setdefault((r.name, r.metric), []).append(r.value)
    rows = []
    for (name, metric), vals in groups.items():
        arr = np.array(vals, dtype=float)
        ok = arr[~np.isnan(arr)]
        rows.append({
            "name": name,
            "metric": metric,
            "mean": float(ok.mean()) if ok.size else math.nan,
            "std": float(ok.std()) if ok.size else math.nan,
            "n": int(ok.size),
            "runs": int(arr.size),
        })
    return rows
