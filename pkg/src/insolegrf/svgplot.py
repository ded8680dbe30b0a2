"""Minimal SVG line/band/category plots, stacked vertically as panels."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

import numpy as np

PALETTE = ("#1f77b4", "#d62728", "#2ca02c", "#ff7f0e", "#9467bd", "#8c564b", "#17becf", "#7f7f7f")
CATEGORY_COLORS = {
    "heel-strike": "#d62728",
    "loading": "#ff7f0e",
    "mid-stance": "#2ca02c",
    "terminal-stance/toe-off": "#1f77b4",
    "swing": "#dddddd",
}


def nice_ticks(lo: float, hi: float, n: int = 5) -> list[float]:
    if not (math.isfinite(lo) and math.isfinite(hi)):
        return []
    if hi <= lo:
        hi = lo + 1.0
    raw = (hi - lo) / max(n, 1)
    mag = 10 ** math.floor(math.log10(raw))
    step = next(m * mag for m in (1, 2, 2.5, 5, 10) if m * mag >= raw)
    start = math.ceil(lo / step) * step
    ticks = []
    t = start
    while t <= hi + 1e-9 * step:
        ticks.append(round(t, 10))
        t += step
    return ticks


def _fmt(v: float) -> str:
    return f"{v:.2f}".rstrip("0").rstrip(".")


@dataclass
class Series:
    x: np.ndarray
    y: np.ndarray
    label: str = ""
    color: str | None = None
    band: tuple[np.ndarray, np.ndarray] | None = None
    dashed: bool = False


@dataclass
class Panel:
    title: str = ""
    xlabel: str = ""
    ylabel: str = ""
    series: list[Series] = field(default_factory=list)
    categories: tuple[np.ndarray, list[str]] | None = None

    def add(self, x, y, label="", color=None, band=None, dashed=False) -> Panel:
        self.series.append(Series(np.asarray(x, float), np.asarray(y, float), label, color, band, dashed))
        return self


class Figure:
    def __init__(self, panels: list[Panel], width: int = 720, panel_height: int = 240):
        self.panels = panels
        self.width = width
        self.panel_height = panel_height

    def _panel_svg(self, p: Panel, top: float) -> list[str]:
        ml, mr, mt, mb = 70, 150, 28, 40
        w = self.width - ml - mr
        h = self.panel_height - mt - mb
        x0, y0 = ml, top + mt
        out = [f'<g class="panel">']
        if p.title:
            out.append(f'<text x="{x0}" y="{top + 18}" font-size="13" font-weight="bold">{escape(p.title)}</text>')

        if p.categories is not None:
            xs, labels = p.categories
            xs = np.asarray(xs, float)
            xmin, xmax = float(xs.min()), float(xs.max())
            span = (xmax - xmin) or 1.0
            edges = np.concatenate([[xs[0]], 0.5 * (xs[1:] + xs[:-1]), [xs[-1]]])
            for i, lab in enumerate(labels):
                a = x0 + (edges[i] - xmin) / span * w
                b = x0 + (edges[i + 1] - xmin) / span * w
                color = CATEGORY_COLORS.get(lab, "#999999")
                out.append(f'<rect x="{a:.2f}" y="{y0}" width="{max(b - a, 0):.2f}" height="{h}" fill="{color}"/>')
            legend = [lab for lab in CATEGORY_COLORS if lab in labels]
            for j, lab in enumerate(legend):
                ly = y0 + 14 * j
                out.append(f'<rect x="{x0 + w + 10}" y="{ly}" width="10" height="10" fill="{CATEGORY_COLORS[lab]}"/>')
                out.append(f'<text x="{x0 + w + 24}" y="{ly + 9}" font-size="10">{escape(lab)}</text>')
            ylo, yhi = 0.0, 1.0
        else:
            xs_all = np.concatenate([s.x for s in p.series]) if p.series else np.array([0.0, 1.0])
            ys = [s.y for s in p.series] + [b for s in p.series if s.band for b in s.band]
            ys_all = np.concatenate(ys) if ys else np.array([0.0, 1.0])
            xmin, xmax = float(np.nanmin(xs_all)), float(np.nanmax(xs_all))
            ylo, yhi = float(np.nanmin(ys_all)), float(np.nanmax(ys_all))
            if yhi <= ylo:
                ylo, yhi = ylo - 1.0, yhi + 1.0
            pad = 0.05 * (yhi - ylo)
            ylo, yhi = ylo - pad, yhi + pad
            span = (xmax - xmin) or 1.0

            def px(x):
                return x0 + (np.asarray(x) - xmin) / span * w

            def py(y):
                return y0 + h - (np.asarray(y) - ylo) / (yhi - ylo) * h

            for t in nice_ticks(ylo, yhi):
                yy = py(t)
                out.append(f'<line x1="{x0}" x2="{x0 + w}" y1="{yy:.2f}" y2="{yy:.2f}" stroke="#eeeeee"/>')
                out.append(f'<text x="{x0 - 6}" y="{yy + 4:.2f}" font-size="10" text-anchor="end">{_fmt(t)}</text>')
            for i, s in enumerate(p.series):
                color = s.color or PALETTE[i % len(PALETTE)]
                if s.band is not None:
                    lo, hi = s.band
                    pts = [f"{a:.2f},{b:.2f}" for a, b in zip(px(s.x), py(hi))]
                    pts += [f"{a:.2f},{b:.2f}" for a, b in zip(px(s.x[::-1]), py(lo[::-1]))]
                    out.append(f'<polygon points="{" ".join(pts)}" fill="{color}" fill-opacity="0.2" stroke="none"/>')
                pts = " ".join(f"{a:.2f},{b:.2f}" for a, b in zip(px(s.x), py(s.y)))
                dash = ' stroke-dasharray="5,3"' if s.dashed else ""
                out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.4"{dash}/>')
                if s.label:
                    ly = y0 + 14 * i
                    out.append(f'<line x1="{x0 + w + 10}" x2="{x0 + w + 24}" y1="{ly + 5}" y2="{ly + 5}" stroke="{color}" stroke-width="2"{dash}/>')
                    out.append(f'<text x="{x0 + w + 28}" y="{ly + 9}" font-size="10">{escape(s.label)}</text>')

        for t in nice_ticks(xmin, xmax):
            xx = x0 + (t - xmin) / span * w
            out.append(f'<text x="{xx:.2f}" y="{y0 + h + 14}" font-size="10" text-anchor="middle">{_fmt(t)}</text>')
        out.append(f'<rect x="{x0}" y="{y0}" width="{w}" height="{h}" fill="none" stroke="#333333"/>')
        if p.xlabel:
            out.append(f'<text x="{x0 + w / 2}" y="{y0 + h + 32}" font-size="11" text-anchor="middle">{escape(p.xlabel)}</text>')
        if p.ylabel:
            cy = y0 + h / 2
            out.append(
                f'<text x="{x0 - 48}" y="{cy}" font-size="11" text-anchor="middle" '
                f'transform="rotate(-90 {x0 - 48} {cy})">{escape(p.ylabel)}</text>'
            )
        out.append("</g>")
        return out

    def to_svg(self, stamp: str | None = None) -> str:
        height = self.panel_height * len(self.panels)
        lines = [
            '<?xml version="1.0" encoding="UTF-8"?>',
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{height}" '
            f'viewBox="0 0 {self.width} {height}" font-family="sans-serif">',
        ]
        if stamp:
            lines.append(f"<!-- generated {escape(stamp)} -->")
        lines.append(f'<rect width="{self.width}" height="{height}" fill="white"/>')
        for i, p in enumerate(self.panels):
            lines += self._panel_svg(p, i * self.panel_height)
        lines.append("</svg>")
        return "\n".join(lines) + "\n"
