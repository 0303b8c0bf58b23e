"""Deterministic SVG line charts from metrics files.

x is the task sample count on a log axis; y is the median over seeds with a
shaded min-max band. A sample count of 0 is drawn half a decade left of the
smallest positive count and labelled "0".
"""

from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .errors import PlotError
from .experiments import grouped, load_records, paired_gaps

PLOT_KINDS = ("curve", "gap")
HEADLINE_METRICS = ("exact_match", "rougeL_f1", "mcq_accuracy")
PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f")

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 170, 40, 50


def _fmt(v: float) -> str:
    return f"{v:.2f}"


def _headline(records) -> str:
    present = {r.metric for r in records}
    for m in HEADLINE_METRICS:
        if m in present:
            return m
    if not present:
        raise PlotError("metrics file holds no records")
    return sorted(present)[0]


def _series(records, kind: str, metric: str) -> dict[str, dict[int, list[float]]]:
    if kind == "curve":
        return {f"{method}/{scheme}": {n: [v[s] for s in sorted(v)] for n, v in by_n.items()}
                for (method, scheme), by_n in sorted(grouped(records, metric).items())}
    out: dict[str, dict[int, list[float]]] = {}
    methods = sorted({r.method for r in records if r.metric == metric})
    ns = sorted({r.n for r in records if r.metric == metric})
    for method in methods:
        pts = {n: paired_gaps(records, metric, n, method) for n in ns}
        pts = {n: v for n, v in pts.items() if v}
        if pts:
            out[f"{method}/d2lora-vanilla"] = pts
    return out


def render_svg(series: dict[str, dict[int, list[float]]], title: str, ylabel: str) -> str:
    """SVG text for ``{label: {n: [values over seeds]}}``; one polyline per label."""
    if not series:
        raise PlotError("nothing to plot: no series")
    for label, pts in series.items():
        if len(pts) < 2:
            raise PlotError(f"series {label!r} has {len(pts)} point(s); at least 2 are needed")
    ns = sorted({n for pts in series.values() for n in pts})
    if ns[0] < 0:
        raise PlotError("sample counts must be non-negative")
    positive = [n for n in ns if n > 0]
    if not positive:
        raise PlotError("a log axis needs at least one positive sample count")
    zero_at = math.log10(positive[0]) - 0.5

    def xpos(n: int) -> float:
        return math.log10(n) if n > 0 else zero_at

    xlo, xhi = xpos(ns[0]), xpos(ns[-1])
    values = [v for pts in series.values() for vals in pts.values() for v in vals]
    ylo, yhi = min(values), max(values)
    if yhi - ylo < 1e-9:
        ylo, yhi = ylo - 0.05, yhi + 0.05
    pad = 0.05 * (yhi - ylo)
    ylo, yhi = ylo - pad, yhi + pad
    pw, ph = WIDTH - LEFT - RIGHT, HEIGHT - TOP - BOTTOM

    def sx(n: int) -> float:
        return LEFT + (xpos(n) - xlo) / (xhi - xlo) * pw

    def sy(v: float) -> float:
        return TOP + (yhi - v) / (yhi - ylo) * ph

    out = [f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
           f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
           f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
           f'<text x="{WIDTH / 2:.2f}" y="20" text-anchor="middle" font-size="14">{escape(title)}</text>',
           f'<line x1="{LEFT}" y1="{TOP + ph}" x2="{LEFT + pw}" y2="{TOP + ph}" stroke="black"/>',
           f'<line x1="{LEFT}" y1="{TOP}" x2="{LEFT}" y2="{TOP + ph}" stroke="black"/>']
    for n in ns:
        x = sx(n)
        out.append(f'<line x1="{_fmt(x)}" y1="{TOP + ph}" x2="{_fmt(x)}" y2="{TOP + ph + 4}" stroke="black"/>')
        out.append(f'<text x="{_fmt(x)}" y="{TOP + ph + 16}" text-anchor="middle">{n}</text>')
    for k in range(5):
        v = ylo + (yhi - ylo) * k / 4
        y = sy(v)
        out.append(f'<line x1="{LEFT - 4}" y1="{_fmt(y)}" x2="{LEFT}" y2="{_fmt(y)}" stroke="black"/>')
        out.append(f'<text x="{LEFT - 6}" y="{_fmt(y + 4)}" text-anchor="end">{v:.3f}</text>')
    out.append(f'<text x="{LEFT + pw / 2:.2f}" y="{HEIGHT - 10}" text-anchor="middle">'
               f'task samples n (log scale)</text>')
    out.append(f'<text x="16" y="{TOP + ph / 2:.2f}" text-anchor="middle" '
               f'transform="rotate(-90 16 {TOP + ph / 2:.2f})">{escape(ylabel)}</text>')
    for i, (label, pts) in enumerate(series.items()):
        color = PALETTE[i % len(PALETTE)]
        xs = sorted(pts)
        med = [float(np.median(pts[n])) for n in xs]
        lo = [min(pts[n]) for n in xs]
        hi = [max(pts[n]) for n in xs]
        band = [(sx(n), sy(v)) for n, v in zip(xs, hi)] + [(sx(n), sy(v)) for n, v in zip(xs[::-1], lo[::-1])]
        out.append(f'<polygon points="{" ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in band)}" '
                   f'fill="{color}" fill-opacity="0.15" stroke="none"/>')
        line = " ".join(f"{_fmt(sx(n))},{_fmt(sy(v))}" for n, v in zip(xs, med))
        out.append(f'<polyline points="{line}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = TOP + 14 * i + 6
        out.append(f'<rect x="{LEFT + pw + 12}" y="{ly - 8}" width="12" height="3" fill="{color}"/>')
        out.append(f'<text x="{LEFT + pw + 28}" y="{ly}">{escape(label)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def emit_plot(metrics_path, kind: str = "curve", out=None, metric: str | None = None) -> Path:
    """Render a metrics file to SVG.

    Args:
        metrics_path: JSONL file written by a sweep.
        kind: ``curve`` plots each (method, scheme) series; ``gap`` plots the
            paired warm-up minus plain difference per method.
        out: Destination; defaults to the metrics path with ``.<kind>.svg``.
        metric: Metric to draw; defaults to the file's headline metric.

    Returns:
        Path of the written SVG.
    """
    if kind not in PLOT_KINDS:
        raise PlotError(f"unknown plot kind {kind!r}; expected one of {PLOT_KINDS}")
    metrics_path = Path(metrics_path)
    records = load_records(metrics_path)
    if not records:
        raise PlotError(f"{metrics_path} holds no records")
    metric = metric or _headline(records)
    series = _series(records, kind, metric)
    experiment = records[0].experiment
    ylabel = metric if kind == "curve" else f"{metric} gap (warm-up minus plain)"
    svg = render_svg(series, f"{experiment}: {metric} ({kind})", ylabel)
    out = Path(out) if out else metrics_path.with_suffix(f".{kind}.svg")
    out.write_text(svg, encoding="utf-8")
    return out
