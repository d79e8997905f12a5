"""Deterministic experiment artifacts: curve CSVs, summary tables, traces and SVG plots."""

from __future__ import annotations

import csv
import io
import math
from pathlib import Path

import numpy as np

from ..errors import ConfigError

CURVE_HEADER = (
    "iteration",
    "mean_return",
    "std_return",
    "min_return",
    "max_return",
    "mean_kl",
    "env_steps",
    "wall_seconds",
)


class UsageError(ConfigError):
    """Bad CLI input or malformed artifact; maps to exit status 2."""


def _num(x: float) -> str:
    return format(float(x), ".10g")


def curve_rows(stats) -> list[list[str]]:
    """Rows for per-iteration stats; ``env_steps`` is cumulative."""
    rows = []
    total = 0
    for s in stats:
        total += s.env_steps
        rows.append([
            str(s.iteration),
            _num(s.mean_return),
            _num(s.std_return),
            _num(s.min_return),
            _num(s.max_return),
            _num(s.mean_kl),
            str(total),
            format(s.wall_seconds, ".3f"),
        ])
    return rows


def write_csv(path, header, rows) -> None:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    buf = io.StringIO()
    writer = csv.writer(buf, lineterminator="\n")
    writer.writerow(header)
    writer.writerows(rows)
    path.write_text(buf.getvalue())


def write_curve(path, stats) -> None:
    write_csv(path, CURVE_HEADER, curve_rows(stats))


def read_curve(path) -> dict[str, np.ndarray]:
    """Columns of a curve CSV; raises ``UsageError`` on schema mismatch or no rows."""
    path = Path(path)
    if not path.is_file():
        raise UsageError(f"{path}: no such file")
    with path.open(newline="") as fh:
        rows = list(csv.reader(fh))
    if not rows or tuple(rows[0]) != CURVE_HEADER:
        raise UsageError(f"{path}: header does not match the curve schema")
    if len(rows) < 2:
        raise UsageError(f"{path}: no data rows")
    try:
        data = np.array([[float(v) for v in r] for r in rows[1:]], dtype=float)
    except ValueError as exc:
        raise UsageError(f"{path}: non-numeric value ({exc})") from None
    if data.shape[1] != len(CURVE_HEADER):
        raise UsageError(f"{path}: ragged rows")
    return {name: data[:, i] for i, name in enumerate(CURVE_HEADER)}


def write_summary(path, rows: list[dict]) -> None:
    """``rows`` share keys; floats printed with 6 significant digits."""
    if not rows:
        raise UsageError("empty summary")
    header = list(rows[0])
    out = []
    for r in rows:
        out.append([_num6(r[k]) for k in header])
    write_csv(path, header, out)


def _num6(v) -> str:
    if isinstance(v, (float, np.floating)):
        return "nan" if math.isnan(v) else format(float(v), ".6g")
    return str(v)


def write_traces(path, traces) -> None:
    """``traces``: iterable of (rollout, positions (T, 2), selections (T,))."""
    rows = []
    for k, positions, selections in traces:
        for t, ((x, y), sel) in enumerate(zip(positions, selections)):
            rows.append([str(k), str(t), _num(x), _num(y), str(int(sel))])
    write_csv(path, ["rollout", "step", "x", "y", "selected_basis_index"], rows)


_PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        return [lo]
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=10 * mag)
    start = math.ceil(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-9 * step:
        out.append(round(v, 12))
        v += step
    return out


def svg_curves(series: list[tuple[str, np.ndarray, np.ndarray]], title: str = "",
               xlabel: str = "iteration", ylabel: str = "mean return") -> str:
    """Line plot of ``(label, x, y)`` series as an SVG document string."""
    if not series:
        raise UsageError("nothing to plot")
    W, H, ml, mr, mt, mb = 640, 400, 70, 150, 30, 50
    xs = np.concatenate([s[1] for s in series])
    ys = np.concatenate([s[2] for s in series])
    finite = np.isfinite(ys)
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = (float(ys[finite].min()), float(ys[finite].max())) if finite.any() else (0.0, 1.0)
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 1.0, y1 + 1.0
    pw, ph = W - ml - mr, H - mt - mb

    def px(x):
        return ml + (x - x0) / (x1 - x0) * pw

    def py(y):
        return mt + ph - (y - y0) / (y1 - y0) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" viewBox="0 0 {W} {H}">',
        f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
        f'<text x="{W / 2:.1f}" y="18" text-anchor="middle" font-size="14">{_esc(title)}</text>',
        f'<line x1="{ml}" y1="{mt + ph}" x2="{ml + pw}" y2="{mt + ph}" stroke="black"/>',
        f'<line x1="{ml}" y1="{mt}" x2="{ml}" y2="{mt + ph}" stroke="black"/>',
    ]
    for t in _ticks(x0, x1):
        out.append(f'<text x="{px(t):.2f}" y="{mt + ph + 16}" text-anchor="middle" font-size="10">{t:g}</text>')
    for t in _ticks(y0, y1):
        out.append(f'<text x="{ml - 6}" y="{py(t) + 3:.2f}" text-anchor="end" font-size="10">{t:g}</text>')
    out.append(f'<text x="{ml + pw / 2:.1f}" y="{H - 12}" text-anchor="middle" font-size="12">{_esc(xlabel)}</text>')
    out.append(f'<text x="16" y="{mt + ph / 2:.1f}" text-anchor="middle" font-size="12" '
               f'transform="rotate(-90 16 {mt + ph / 2:.1f})">{_esc(ylabel)}</text>')
    for i, (label, x, y) in enumerate(series):
        color = _PALETTE[i % len(_PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(x, y) if math.isfinite(b))
        out.append(f'<polyline fill="none" stroke="{color}" stroke-width="1.5" points="{pts}"/>')
        ly = mt + 14 + 16 * i
        out.append(f'<line x1="{ml + pw + 10}" y1="{ly}" x2="{ml + pw + 30}" y2="{ly}" stroke="{color}" stroke-width="2"/>')
        out.append(f'<text x="{ml + pw + 34}" y="{ly + 4}" font-size="11">{_esc(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _esc(text: str) -> str:
    return text.replace("&", "&amp;").replace("<", "&lt;").replace(">", "&gt;")


def emit_svg_curve(csv_paths, labels, out_path, column: str = "mean_return", title: str = "") -> Path:
    """Plot ``column`` against iteration for each curve CSV; nothing is written on error."""
    csv_paths = list(csv_paths)
    labels = list(labels)
    if len(labels) != len(csv_paths):
        raise UsageError("one label per CSV")
    if column not in CURVE_HEADER:
        raise UsageError(f"unknown column {column!r}")
    series = []
    for path, label in zip(csv_paths, labels):
        data = read_curve(path)
        series.append((label, data["iteration"], data[column]))
    svg = svg_curves(series, title=title, ylabel=column.replace("_", " "))
    out_path = Path(out_path)
    out_path.parent.mkdir(parents=True, exist_ok=True)
    out_path.write_text(svg)
    return out_path
