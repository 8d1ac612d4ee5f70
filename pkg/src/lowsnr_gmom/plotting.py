"""Minimal log-log SVG line plots (no plotting dependency)."""

from __future__ import annotations

import math
from dataclasses import dataclass, field
from xml.sax.saxutils import escape

PALETTE = ["#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b", "#e377c2", "#17becf"]


@dataclass
class Series:
    label: str
    x: list[float]
    y: list[float]
    dashed: bool = False
    markers: bool = True


@dataclass
class LogLogPlot:
    title: str
    xlabel: str
    ylabel: str
    series: list[Series] = field(default_factory=list)
    width: int = 640
    height: int = 460

    def add(self, label, x, y, dashed=False, markers=True) -> None:
        pts = [(float(a), float(b)) for a, b in zip(x, y) if a > 0 and b > 0
               and math.isfinite(a) and math.isfinite(b)]
        if pts:
            xs, ys = zip(*pts)
            self.series.append(Series(label, list(xs), list(ys), dashed, markers))

    def add_reference(self, label, x, slope, anchor_x, anchor_y) -> None:
        """Line of the given log-log ``slope`` through ``(anchor_x, anchor_y)``."""
        ys = [anchor_y * (xi / anchor_x) ** slope for xi in x]
        self.add(label, x, ys, dashed=True, markers=False)

    def _bounds(self):
        xs = [v for s in self.series for v in s.x]
        ys = [v for s in self.series for v in s.y]
        if not xs:
            return 0.0, 1.0, 0.0, 1.0
        lx0, lx1 = math.log10(min(xs)), math.log10(max(xs))
        ly0, ly1 = math.log10(min(ys)), math.log10(max(ys))
        if lx1 == lx0:
            lx0, lx1 = lx0 - 0.5, lx1 + 0.5
        if ly1 == ly0:
            ly0, ly1 = ly0 - 0.5, ly1 + 0.5
        pad_y = 0.05 * (ly1 - ly0)
        return lx0, lx1, ly0 - pad_y, ly1 + pad_y

    def to_svg(self) -> str:
        W, H = self.width, self.height
        left, right, top, bottom = 80, 170, 40, 60
        pw, ph = W - left - right, H - top - bottom
        lx0, lx1, ly0, ly1 = self._bounds()

        def px(x):
            return left + (math.log10(x) - lx0) / (lx1 - lx0) * pw

        def py(y):
            return top + (ly1 - math.log10(y)) / (ly1 - ly0) * ph

        out = [
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{W}" height="{H}" '
            f'viewBox="0 0 {W} {H}" font-family="sans-serif" font-size="11">',
            f'<rect x="0" y="0" width="{W}" height="{H}" fill="white"/>',
            f'<text x="{W / 2:.1f}" y="22" text-anchor="middle" font-size="14">{escape(self.title)}</text>',
            f'<rect x="{left}" y="{top}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
        ]
        for e in range(math.ceil(lx0), math.floor(lx1) + 1):
            x = px(10.0**e)
            out.append(f'<line x1="{x:.1f}" y1="{top}" x2="{x:.1f}" y2="{top + ph}" stroke="#ddd"/>')
            out.append(f'<text x="{x:.1f}" y="{top + ph + 16}" text-anchor="middle">1e{e}</text>')
        for e in range(math.ceil(ly0), math.floor(ly1) + 1):
            y = py(10.0**e)
            out.append(f'<line x1="{left}" y1="{y:.1f}" x2="{left + pw}" y2="{y:.1f}" stroke="#ddd"/>')
            out.append(f'<text x="{left - 6}" y="{y + 4:.1f}" text-anchor="end">1e{e}</text>')
        out.append(f'<text x="{left + pw / 2:.1f}" y="{H - 16}" text-anchor="middle">{escape(self.xlabel)}</text>')
        out.append(f'<text x="18" y="{top + ph / 2:.1f}" text-anchor="middle" '
                   f'transform="rotate(-90 18 {top + ph / 2:.1f})">{escape(self.ylabel)}</text>')

        solid = [s for s in self.series if not s.dashed]
        for i, s in enumerate(self.series):
            color = PALETTE[(solid.index(s) if s in solid else i) % len(PALETTE)]
            if s.dashed:
                color = "#888"
            pts = " ".join(f"{px(a):.1f},{py(b):.1f}" for a, b in zip(s.x, s.y))
            dash = ' stroke-dasharray="5,4"' if s.dashed else ""
            out.append(f'<polyline points="{pts}" fill="none" stroke="{color}" stroke-width="1.6"{dash}/>')
            if s.markers:
                for a, b in zip(s.x, s.y):
                    out.append(f'<circle cx="{px(a):.1f}" cy="{py(b):.1f}" r="2.8" fill="{color}"/>')
            ly = top + 14 + 16 * i
            out.append(f'<line x1="{left + pw + 10}" y1="{ly - 4}" x2="{left + pw + 30}" y2="{ly - 4}" '
                       f'stroke="{color}" stroke-width="1.6"{dash}/>')
            out.append(f'<text x="{left + pw + 34}" y="{ly}">{escape(s.label)}</text>')
        out.append("</svg>")
        return "\n".join(out) + "\n"
