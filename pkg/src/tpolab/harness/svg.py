"""Standalone SVG charts: regret curves and per-block selection bars."""

from __future__ import annotations

from pathlib import Path
from xml.sax.saxutils import escape

import numpy as np

WIDTH, HEIGHT = 640, 400
LEFT, RIGHT, TOP, BOTTOM = 70, 160, 30, 50
PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#e377c2", "#7f7f7f",
           "#bcbd22", "#17becf"]
MARGIN = 0.05


def padded_range(lo: float, hi: float, margin: float = MARGIN) -> tuple[float, float]:
    """``[lo, hi]`` widened by ``margin`` of the span on each side (unit span when flat)."""
    span = hi - lo
    if span <= 0:
        span = max(abs(hi), 1.0)
    return lo - margin * span, hi + margin * span


class _Canvas:
    def __init__(self, title: str, xr: tuple[float, float], yr: tuple[float, float], xlabel: str, ylabel: str):
        self.xr, self.yr = xr, yr
        self.parts = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
            f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="11">',
            f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
            f'<text x="{WIDTH / 2:.1f}" y="18" text-anchor="middle" font-size="13">{escape(title)}</text>',
        ]
        x0, x1, y0, y1 = LEFT, WIDTH - RIGHT, HEIGHT - BOTTOM, TOP
        self.parts.append(f'<g class="axes" data-x-range="{xr[0]!r} {xr[1]!r}" data-y-range="{yr[0]!r} {yr[1]!r}">')
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x1}" y2="{y0}" stroke="black"/>')
        self.parts.append(f'<line x1="{x0}" y1="{y0}" x2="{x0}" y2="{y1}" stroke="black"/>')
        for v in np.linspace(*xr, 5):
            x, _ = self.map(v, yr[0])
            self.parts.append(f'<line x1="{x:.1f}" y1="{y0}" x2="{x:.1f}" y2="{y0 + 4}" stroke="black"/>')
            self.parts.append(f'<text x="{x:.1f}" y="{y0 + 16}" text-anchor="middle">{v:.3g}</text>')
        for v in np.linspace(*yr, 5):
            _, y = self.map(xr[0], v)
            self.parts.append(f'<line x1="{x0 - 4}" y1="{y:.1f}" x2="{x0}" y2="{y:.1f}" stroke="black"/>')
            self.parts.append(f'<text x="{x0 - 6}" y="{y + 4:.1f}" text-anchor="end">{v:.3g}</text>')
        self.parts.append(f'<text x="{(x0 + x1) / 2:.1f}" y="{HEIGHT - 12}" text-anchor="middle">{escape(xlabel)}</text>')
        self.parts.append(f'<text x="16" y="{(y0 + y1) / 2:.1f}" text-anchor="middle" '
                          f'transform="rotate(-90 16 {(y0 + y1) / 2:.1f})">{escape(ylabel)}</text>')
        self.parts.append("</g>")
        self.legend = 0

    def map(self, x, y):
        x = np.asarray(x, dtype=float)
        y = np.asarray(y, dtype=float)
        px = LEFT + (x - self.xr[0]) / (self.xr[1] - self.xr[0]) * (WIDTH - RIGHT - LEFT)
        py = HEIGHT - BOTTOM - (y - self.yr[0]) / (self.yr[1] - self.yr[0]) * (HEIGHT - BOTTOM - TOP)
        return px, py

    def add_legend(self, label: str, color: str) -> None:
        y = TOP + 14 * self.legend
        x = WIDTH - RIGHT + 12
        self.parts.append(f'<rect x="{x}" y="{y}" width="10" height="10" fill="{color}"/>')
        self.parts.append(f'<text x="{x + 14}" y="{y + 9}">{escape(label)}</text>')
        self.legend += 1

    def svg(self) -> str:
        return "\n".join(self.parts + ["</svg>"]) + "\n"


def regret_svg(report) -> str:
    """Mean cumulative regret per algorithm with a shaded 95% band."""
    steps = np.arange(1, report.T + 1)
    curves = {t: report.curve(t) for t in report.algorithms}
    lo = min(float(np.min(m - h)) for m, h in curves.values())
    hi = max(float(np.max(m + h)) for m, h in curves.values())
    c = _Canvas("Cumulative regret (mean, 95% CI)", padded_range(1.0, float(report.T)), padded_range(lo, hi),
                "step", "cumulative regret")
    stride = max(1, report.T // 1000)
    idx = np.unique(np.r_[np.arange(0, report.T, stride), report.T - 1])
    for i, (tag, (m, h)) in enumerate(curves.items()):
        color = PALETTE[i % len(PALETTE)]
        xs, ys_hi = c.map(steps[idx], (m + h)[idx])
        _, ys_lo = c.map(steps[idx], (m - h)[idx])
        band = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(np.r_[xs, xs[::-1]], np.r_[ys_hi, ys_lo[::-1]]))
        c.parts.append(f'<polygon points="{band}" fill="{color}" fill-opacity="0.15" stroke="none"/>')
        _, ys = c.map(steps[idx], m[idx])
        pts = " ".join(f"{x:.2f},{y:.2f}" for x, y in zip(xs, ys))
        c.parts.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.5" '
                       f'data-algorithm="{escape(tag)}"/>')
        c.add_legend(tag, color)
    return c.svg()


def selection_svg(report, tag: str) -> str:
    """Stacked per-block selection frequencies of one algorithm."""
    means = report.selection_means(tag)
    K = report.K
    c = _Canvas(f"Selection frequency per block: {tag}", (0.5 - MARGIN * K, K + 0.5 + MARGIN * K),
                padded_range(0.0, 1.0), "block", "share of steps")
    base = np.zeros(K)
    for i, (cat, v) in enumerate(means.items()):
        color = PALETTE[i % len(PALETTE)]
        for k in range(K):
            x0, y_top = c.map(k + 1 - 0.35, base[k] + v[k])
            x1, y_bot = c.map(k + 1 + 0.35, base[k])
            c.parts.append(f'<rect x="{x0:.2f}" y="{y_top:.2f}" width="{x1 - x0:.2f}" height="{y_bot - y_top:.2f}" '
                           f'fill="{color}" data-category="{escape(cat)}" data-block="{k + 1}"/>')
        base += v
        c.add_legend(cat, color)
    return c.svg()


def render_svg(report, out_dir) -> list[Path]:
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    files = [out / "regret.svg"]
    files[0].write_text(regret_svg(report))
    for tag in report.algorithms:
        p = out / f"selection_{tag.replace(':', '_')}.svg"
        p.write_text(selection_svg(report, tag))
        files.append(p)
    return files
