"""Static SVG line charts of metrics CSVs.

The output is a pure function of the inputs: fixed canvas, fixed palette,
fixed number formatting. Every series is also embedded verbatim as an XML
comment so a chart can be audited without the CSV next to it.
"""

from __future__ import annotations

import csv
import math
from dataclasses import dataclass
from pathlib import Path
from xml.sax.saxutils import escape

from .errors import UsageError

KINDS = {
    "acc_vs_round": ("round", "round"),
    "acc_vs_upload": ("cum_upload_bytes", "uploaded data [MB]"),
    "acc_vs_flops": ("cum_flops", "performed FLOPs [GFLOP]"),
}
_X_SCALE = {"round": 1.0, "cum_upload_bytes": 1e-6, "cum_flops": 1e-9}
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
           "#7f7f7f")
W, H = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 64, 168, 24, 48


@dataclass(frozen=True)
class Series:
    label: str
    x: tuple[float, ...]
    y: tuple[float, ...]


def load_series(path, kind: str, label: str) -> Series:
    """Accuracy (in percent) against the chart's x column; rows without accuracy skipped."""
    if kind not in KINDS:
        raise UsageError(f"unknown chart kind {kind!r}; expected one of {sorted(KINDS)}")
    xcol = KINDS[kind][0]
    with open(path, newline="") as f:
        reader = csv.DictReader(f)
        if not reader.fieldnames:
            raise UsageError(f"{path}: empty CSV")
        for col in (xcol, "accuracy"):
            if col not in reader.fieldnames:
                raise UsageError(f"{path}: missing column {col!r}")
        rows = [r for r in reader if r["accuracy"] != ""]
    if not rows:
        raise UsageError(f"{path}: no evaluated rounds")
    scale = _X_SCALE[xcol]
    return Series(label, tuple(float(r[xcol]) * scale for r in rows),
                  tuple(100.0 * float(r["accuracy"]) for r in rows))


def _ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / n
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.floor(lo / step) * step
    out = []
    v = start
    while v <= hi + 1e-9 * step:
        if v >= lo - 1e-9 * step:
            out.append(round(v, 10))
        v += step
    return out


def _fmt(v: float) -> str:
    s = f"{v:.2f}".rstrip("0").rstrip(".")
    return "0" if s == "-0" else s


def render_svg(series: list[Series], kind: str, title: str = "") -> str:
    if not series:
        raise UsageError("nothing to plot")
    xlabel = KINDS[kind][1]
    xs = [v for s in series for v in s.x]
    x_lo, x_hi = min(0.0, min(xs)), max(xs)
    if x_hi <= x_lo:
        x_hi = x_lo + 1.0
    y_lo, y_hi = 0.0, 100.0
    pw, ph = W - LEFT - RIGHT, H - TOP - BOTTOM

    def px(v):
        return LEFT + (v - x_lo) / (x_hi - x_lo) * pw

    def py(v):
        return TOP + ph - (v - y_lo) / (y_hi - y_lo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
           f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">']
    for s in series:
        pts = " ".join(f"{_fmt(a)},{_fmt(b)}" for a, b in zip(s.x, s.y))
        # "--" may not appear inside an XML comment
        label = escape(s.label).replace("--", "- -")
        out.append(f"<!-- data label={label!r} kind={kind} points={pts} -->")
    out.append(f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>')
    if title:
        out.append(f'<text x="{LEFT + pw / 2:.1f}" y="16" text-anchor="middle" '
                   f'font-size="13">{escape(title)}</text>')
    # grid and ticks
    for t in _ticks(y_lo, y_hi):
        y = py(t)
        out.append(f'<line x1="{LEFT}" y1="{y:.1f}" x2="{LEFT + pw}" y2="{y:.1f}" '
                   f'stroke="#dddddd"/>')
        out.append(f'<text x="{LEFT - 6}" y="{y + 4:.1f}" text-anchor="end">{_fmt(t)}</text>')
    for t in _ticks(x_lo, x_hi):
        x = px(t)
        out.append(f'<line x1="{x:.1f}" y1="{TOP + ph}" x2="{x:.1f}" y2="{TOP + ph + 4}" '
                   f'stroke="black"/>')
        out.append(f'<text x="{x:.1f}" y="{TOP + ph + 16}" text-anchor="middle">{_fmt(t)}</text>')
    out.append(f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" '
               f'stroke="black"/>')
    out.append(f'<text x="{LEFT + pw / 2:.1f}" y="{H - 10}" text-anchor="middle">'
               f'{escape(xlabel)}</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.1f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.1f})">accuracy [%]</text>')
    for i, s in enumerate(series):
        colour = PALETTE[i % len(PALETTE)]
        pts = " ".join(f"{px(a):.2f},{py(b):.2f}" for a, b in zip(s.x, s.y))
        out.append(f'<polyline fill="none" stroke="{colour}" stroke-width="1.5" '
                   f'points="{pts}"/>')
        ly = TOP + 12 + 18 * i
        lx = LEFT + pw + 12
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{colour}" '
                   f'stroke-width="2"/>')
        out.append(f'<text x="{lx + 26}" y="{ly + 4}">{escape(s.label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def write_chart(csv_paths, kind: str, out_path, labels=None, title: str = "") -> Path:
    """Render one series per CSV. Nothing is written if any input is unusable."""
    csv_paths = list(csv_paths)
    labels = list(labels) if labels else [Path(p).parent.name or Path(p).stem for p in csv_paths]
    if len(labels) != len(csv_paths):
        raise UsageError(f"{len(labels)} labels for {len(csv_paths)} CSV files")
    series = [load_series(p, kind, lab) for p, lab in zip(csv_paths, labels)]
    svg = render_svg(series, kind, title)
    out_path = Path(out_path)
    out_path.write_text(svg)
    return out_path
