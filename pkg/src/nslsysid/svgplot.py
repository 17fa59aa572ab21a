"""Log-log scatter plots of sweep outcomes, written as plain SVG.

Output is a pure function of the inputs: coordinates are printed with fixed
precision and elements are emitted in a fixed order, so the same registry
and plot spec always produce the same bytes.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from pathlib import Path
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .errors import EmptySelectionError, InvalidArgumentError
from .nslfit import NSLParams, eval_nsl, lower_envelope
from .outcomes import ERROR_FIELDS, RESOURCE_FIELDS, Outcome, filter_outcomes

WIDTH, HEIGHT = 720, 480
LEFT, RIGHT, TOP, BOTTOM = 80, 170, 30, 60
NSL_COLOR = "#1f4fd8"

# viridis-like ramp, sampled at five stops
_RAMP = [(68, 1, 84), (59, 82, 139), (33, 145, 140), (94, 201, 98), (253, 231, 37)]

LABELS = {
    "compute": "compute c [flops]",
    "data": "data d [s]",
    "model": "model size p",
    "nmae": "nMAE",
    "nmse": "nMSE",
}


@dataclass(frozen=True)
class PlotSpec:
    resource: str = "compute"
    error: str = "nmae"
    system: str | None = None
    arch: str | None = None
    color_by: str | None = None
    size_by: str | None = None
    title: str | None = None

    def __post_init__(self):
        if self.resource not in RESOURCE_FIELDS:
            raise InvalidArgumentError(f"resource must be one of {sorted(RESOURCE_FIELDS)}")
        if self.error not in ERROR_FIELDS:
            raise InvalidArgumentError(f"error must be one of {ERROR_FIELDS}")
        for enc in (self.color_by, self.size_by):
            if enc is not None and enc not in RESOURCE_FIELDS:
                raise InvalidArgumentError(f"encoding must be one of {sorted(RESOURCE_FIELDS)}")

    def encodings(self) -> tuple[str, str]:
        """Colour and size resources; by default the two not on the x axis."""
        others = [r for r in ("data", "model", "compute") if r != self.resource]
        return self.color_by or others[0], self.size_by or others[1]


def _f(v: float) -> str:
    return f"{v:.2f}"


def _ramp(t: float) -> str:
    t = min(max(t, 0.0), 1.0) * (len(_RAMP) - 1)
    i = min(int(t), len(_RAMP) - 2)
    w = t - i
    rgb = [round(a + (b - a) * w) for a, b in zip(_RAMP[i], _RAMP[i + 1])]
    return "#{:02x}{:02x}{:02x}".format(*rgb)


def _unit(values: np.ndarray) -> np.ndarray:
    """Log-scale values to [0, 1]; constant input maps to 0.5."""
    lv = np.log10(values)
    lo, hi = lv.min(), lv.max()
    if hi - lo < 1e-12:
        return np.full_like(lv, 0.5)
    return (lv - lo) / (hi - lo)


class _Axes:
    def __init__(self, xs: np.ndarray, ys: np.ndarray):
        self.x0, self.x1 = self._decades(xs)
        self.y0, self.y1 = self._decades(ys)

    @staticmethod
    def _decades(v) -> tuple[int, int]:
        lv = np.log10(v)
        lo, hi = math.floor(lv.min()), math.ceil(lv.max())
        return (lo, hi) if hi > lo else (lo, lo + 1)

    def px(self, x):
        return LEFT + (np.log10(x) - self.x0) / (self.x1 - self.x0) * (WIDTH - LEFT - RIGHT)

    def py(self, y):
        return HEIGHT - BOTTOM - (np.log10(y) - self.y0) / (self.y1 - self.y0) * (HEIGHT - TOP - BOTTOM)


def _decade_label(k: int) -> str:
    return f'10<tspan dy="-6" font-size="9">{k}</tspan>'


def render_svg(
    outcomes: Sequence[Outcome],
    spec: PlotSpec,
    envelope: bool = False,
    nsl: NSLParams | None = None,
    formula: str | None = None,
) -> str:
    """SVG document for the outcomes selected by ``spec`` with optional overlays."""
    chosen = filter_outcomes(outcomes, system=spec.system, arch=spec.arch)
    if not chosen:
        raise EmptySelectionError("nothing to plot under the given filter")
    chosen = sorted(chosen, key=lambda o: (o.resource(spec.resource), getattr(o, spec.error), o.key))
    r = np.array([o.resource(spec.resource) for o in chosen], dtype=float)
    e = np.array([getattr(o, spec.error) for o in chosen], dtype=float)
    color_by, size_by = spec.encodings()
    cvals = np.array([o.resource(color_by) for o in chosen], dtype=float)
    svals = np.array([o.resource(size_by) for o in chosen], dtype=float)
    ax = _Axes(r, e)

    out = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}" font-family="sans-serif" font-size="12">',
        f'<rect width="{WIDTH}" height="{HEIGHT}" fill="white"/>',
    ]
    x_lo, x_hi = LEFT, WIDTH - RIGHT
    y_lo, y_hi = TOP, HEIGHT - BOTTOM
    out.append(f'<rect x="{x_lo}" y="{y_lo}" width="{x_hi - x_lo}" height="{y_hi - y_lo}" fill="none" stroke="black"/>')
    out.append('<g class="ticks" stroke="#bbbbbb" stroke-width="0.5">')
    for k in range(ax.x0, ax.x1 + 1):
        x = _f(ax.px(10.0**k))
        out.append(f'<line x1="{x}" y1="{y_lo}" x2="{x}" y2="{y_hi}"/>')
    for k in range(ax.y0, ax.y1 + 1):
        y = _f(ax.py(10.0**k))
        out.append(f'<line x1="{x_lo}" y1="{y}" x2="{x_hi}" y2="{y}"/>')
    out.append("</g>")
    for k in range(ax.x0, ax.x1 + 1):
        out.append(f'<text x="{_f(ax.px(10.0**k))}" y="{y_hi + 18}" text-anchor="middle">{_decade_label(k)}</text>')
    for k in range(ax.y0, ax.y1 + 1):
        out.append(f'<text x="{x_lo - 8}" y="{_f(ax.py(10.0**k) + 4)}" text-anchor="end">{_decade_label(k)}</text>')
    out.append(f'<text x="{(x_lo + x_hi) / 2}" y="{HEIGHT - 15}" text-anchor="middle">{LABELS[spec.resource]}</text>')
    out.append(
        f'<text x="20" y="{(y_lo + y_hi) / 2}" text-anchor="middle" '
        f'transform="rotate(-90 20 {(y_lo + y_hi) / 2})">{LABELS[spec.error]}</text>'
    )
    title = spec.title or " / ".join(s for s in (spec.system, spec.arch) if s)
    if title:
        out.append(f'<text x="{(x_lo + x_hi) / 2}" y="{TOP - 10}" text-anchor="middle">{escape(title)}</text>')

    cu, su = _unit(cvals), _unit(svals)
    out.append('<g class="points" fill-opacity="0.75">')
    for xi, yi, c, s in zip(ax.px(r), ax.py(e), cu, su):
        out.append(f'<circle cx="{_f(xi)}" cy="{_f(yi)}" r="{_f(1.5 + 4.5 * s)}" fill="{_ramp(c)}"/>')
    out.append("</g>")

    if envelope:
        grid = np.unique(r)
        env = lower_envelope(r, e, grid)
        pts = [(grid[0], env[0])]
        for g, v in zip(grid[1:], env[1:]):
            pts += [(g, pts[-1][1]), (g, v)]
        path = " ".join(f"{_f(ax.px(a))},{_f(ax.py(b))}" for a, b in pts)
        out.append(f'<polyline class="envelope" points="{path}" fill="none" stroke="black" stroke-width="1.2"/>')
    if nsl is not None:
        rr = np.logspace(np.log10(r.min()), np.log10(r.max()), 200)
        ll = np.asarray(eval_nsl(nsl, rr), dtype=float)
        keep = np.isfinite(ll) & (ll > 0)
        path = " ".join(f"{_f(a)},{_f(b)}" for a, b in zip(ax.px(rr[keep]), ax.py(ll[keep])))
        out.append(f'<polyline class="nsl" points="{path}" fill="none" stroke="{NSL_COLOR}" stroke-width="2"/>')
        if formula:
            out.append(f'<text x="{x_lo + 6}" y="{y_lo + 16}" font-size="10" fill="{NSL_COLOR}">{escape(formula)}</text>')

    out.extend(_legends(color_by, cvals, size_by, svals))
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _legends(color_by, cvals, size_by, svals) -> list[str]:
    lx = WIDTH - RIGHT + 25
    out = ['<g class="legend">', f'<text x="{lx}" y="{TOP + 10}">{LABELS[color_by]}</text>']
    for i in range(5):
        out.append(
            f'<rect x="{lx}" y="{TOP + 20 + 16 * (4 - i)}" width="14" height="16" fill="{_ramp(i / 4)}"/>'
        )
    out.append(f'<text x="{lx + 20}" y="{TOP + 32}" font-size="10">{cvals.max():.3g}</text>')
    out.append(f'<text x="{lx + 20}" y="{TOP + 96}" font-size="10">{cvals.min():.3g}</text>')
    sy = TOP + 140
    out.append(f'<text x="{lx}" y="{sy}">{LABELS[size_by]}</text>')
    lo, hi = svals.min(), svals.max()
    for j, t in enumerate((0.0, 0.5, 1.0)):
        v = 10 ** (np.log10(lo) + t * (np.log10(hi) - np.log10(lo)))
        cy = sy + 20 + 22 * j
        out.append(f'<circle cx="{lx + 7}" cy="{cy}" r="{_f(1.5 + 4.5 * t)}" fill="#666666"/>')
        out.append(f'<text x="{lx + 20}" y="{cy + 4}" font-size="10">{v:.3g}</text>')
    out.append("</g>")
    return out


def write_svg(path, text: str) -> Path:
    path = Path(path)
    path.write_text(text)
    return path
