"""Dependency-free SVG curves from a metrics CSV.

Each figure shows one metric against epoch, one curve per run id: the mean
across seeds with a shaded min/max band.  Output is deterministic so figures
can be compared byte for byte.
"""
from __future__ import annotations

import math
from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

from .training import parse_list, read_rows

WIDTH, HEIGHT = 640, 400
MARGIN = dict(left=70, right=170, top=30, bottom=50)
COLORS = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2",
          "#7f7f7f"]

# metric -> (title, log scale)
METRICS = {
    "train_loss": ("training loss", True),
    "test_loss": ("test loss", True),
    "train_acc": ("training accuracy", False),
    "test_acc": ("test accuracy", False),
    "minibatch_loss_change_pct": ("mini-batch loss change (%)", False),
    "ntk_similarity": ("NTK similarity to init", False),
    "ntk_rate": ("NTK rate of change", True),
    "cka_first": ("CKA to init, first block", False),
    "cka_last": ("CKA to init, last block", False),
}


class EmptySelection(ValueError):
    """No plottable data matched the request."""


def _value(row, metric):
    if metric.startswith("cka_"):
        vals = parse_list(row.get("cka", ""))
        if not vals:
            return None
        return vals[0] if metric == "cka_first" else vals[-1]
    text = row.get(metric, "")
    return float(text) if text not in ("", None) else None


def collect(rows, metric, log=False):
    """``{run_id: (epochs, mean, lo, hi)}``; log axes keep positive values only."""
    series = {}
    for row in rows:
        if row.get("status", "ok") != "ok":
            continue
        v = _value(row, metric)
        if v is None or not math.isfinite(v) or (log and v <= 0):
            continue
        series.setdefault(row["run_id"], {}).setdefault(int(row["epoch"]), []).append(v)
    out = {}
    for run_id in sorted(series):
        by_epoch = series[run_id]
        epochs = sorted(by_epoch)
        vals = [np.array(by_epoch[e]) for e in epochs]
        out[run_id] = (np.array(epochs, dtype=float), np.array([v.mean() for v in vals]),
                       np.array([v.min() for v in vals]), np.array([v.max() for v in vals]))
    return out


def _f(v):
    return f"{v:.2f}"


def _ticks(lo, hi, log):
    if log:
        a, b = math.floor(lo), math.ceil(hi)
        step = max(1, (b - a) // 6)
        return [float(k) for k in range(a, b + 1, step)]
    if hi == lo:
        return [lo]
    raw = (hi - lo) / 5
    mag = 10 ** math.floor(math.log10(raw))
    step = min((m * mag for m in (1, 2, 5, 10) if m * mag >= raw), default=raw)
    start = math.ceil(lo / step) * step
    return [start + i * step for i in range(int((hi - start) / step + 1e-9) + 1)]


def render_svg(series, title, log=False):
    """SVG text for prepared series (see :func:`collect`)."""
    if not series:
        raise EmptySelection(f"nothing to plot for {title!r}")
    tf = (lambda v: np.log10(np.maximum(v, 1e-300))) if log else (lambda v: v)
    xs = np.concatenate([s[0] for s in series.values()])
    ys = np.concatenate([tf(np.concatenate([s[2], s[3]])) for s in series.values()])
    x0, x1 = float(xs.min()), float(xs.max())
    y0, y1 = float(ys.min()), float(ys.max())
    if x1 == x0:
        x1 = x0 + 1.0
    if y1 == y0:
        y0, y1 = y0 - 0.5, y1 + 0.5
    pad = 0.05 * (y1 - y0)
    y0, y1 = y0 - pad, y1 + pad
    pw = WIDTH - MARGIN["left"] - MARGIN["right"]
    ph = HEIGHT - MARGIN["top"] - MARGIN["bottom"]

    def px(x):
        return MARGIN["left"] + (x - x0) / (x1 - x0) * pw

    def py(y):
        return MARGIN["top"] + (1.0 - (y - y0) / (y1 - y0)) * ph

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect x="0" y="0" width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
        f'<text x="{WIDTH / 2 - MARGIN["right"] / 2:.2f}" y="18" text-anchor="middle" '
        f'font-size="14">{escape(title)}</text>',
        f'<rect x="{MARGIN["left"]}" y="{MARGIN["top"]}" width="{pw}" height="{ph}" '
        'fill="none" stroke="black"/>',
    ]
    for t in _ticks(y0, y1, log):
        if y0 <= t <= y1:
            label = f"1e{int(t)}" if log else f"{t:.4g}"
            out.append(f'<line x1="{MARGIN["left"] - 4}" y1="{_f(py(t))}" x2="{MARGIN["left"]}" '
                       f'y2="{_f(py(t))}" stroke="black"/>')
            out.append(f'<text x="{MARGIN["left"] - 6}" y="{_f(py(t) + 4)}" '
                       f'text-anchor="end">{label}</text>')
    for t in _ticks(x0, x1, False):
        if x0 <= t <= x1:
            out.append(f'<line x1="{_f(px(t))}" y1="{HEIGHT - MARGIN["bottom"]}" x2="{_f(px(t))}" '
                       f'y2="{HEIGHT - MARGIN["bottom"] + 4}" stroke="black"/>')
            out.append(f'<text x="{_f(px(t))}" y="{HEIGHT - MARGIN["bottom"] + 18}" '
                       f'text-anchor="middle">{t:.4g}</text>')
    out.append(f'<text x="{MARGIN["left"] + pw / 2:.2f}" y="{HEIGHT - 10}" '
               'text-anchor="middle">epoch</text>')
    for i, (run_id, (ep, mean, lo, hi)) in enumerate(series.items()):
        color = COLORS[i % len(COLORS)]
        if np.any(hi > lo):
            upper = [f"{_f(px(x))},{_f(py(y))}" for x, y in zip(ep, tf(hi))]
            lower = [f"{_f(px(x))},{_f(py(y))}" for x, y in zip(ep[::-1], tf(lo)[::-1])]
            out.append(f'<polygon points="{" ".join(upper + lower)}" fill="{color}" '
                       'fill-opacity="0.2" stroke="none"/>')
        pts = " ".join(f"{_f(px(x))},{_f(py(y))}" for x, y in zip(ep, tf(mean)))
        out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="2"/>')
        ly = MARGIN["top"] + 16 * i + 10
        lx = WIDTH - MARGIN["right"] + 10
        out.append(f'<line x1="{lx}" y1="{ly}" x2="{lx + 20}" y2="{ly}" stroke="{color}" '
                   'stroke-width="2"/>')
        out.append(f'<text x="{lx + 25}" y="{ly + 4}">{escape(run_id)}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def plot_csv(csv_path, out_dir, metrics=None):
    """Write one SVG per metric that has data; returns the written paths."""
    rows = read_rows(csv_path)
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    written = []
    for metric in metrics or METRICS:
        if metric not in METRICS:
            raise ValueError(f"unknown metric {metric!r}")
        title, log = METRICS[metric]
        series = collect(rows, metric, log)
        if not series:
            continue
        path = out_dir / f"{metric}.svg"
        path.write_text(render_svg(series, title, log), encoding="utf-8")
        written.append(path)
    if not written:
        raise EmptySelection(f"{csv_path}: no plottable metrics")
    return written
