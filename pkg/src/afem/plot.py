"""Deterministic log-log convergence plots as standalone SVG."""
from __future__ import annotations

import math
from xml.sax.saxutils import escape

__all__ = ["emit_plot"]

WIDTH, HEIGHT = 800, 600
LEFT, RIGHT, TOP, BOTTOM = 80, 200, 40, 60
COLORS = ["#1f77b4", "#ff7f0e", "#2ca02c", "#d62728", "#9467bd", "#8c564b",
          "#e377c2", "#7f7f7f", "#bcbd22", "#17becf", "#393b79", "#637939",
          "#8c6d31", "#843c39"]


def _fmt(v: float) -> str:
    return f"{v:.12g}"


def _series(history):
    out = []
    first = history[0]
    for k, j in enumerate(first.indices):
        pts = [(r.n_dof, r.errors[k]) for r in history
               if r.errors[k] is not None and r.errors[k] > 0]
        if pts:
            out.append((f"|lambda_{j} - lambda_{j},h|", pts, False))
    for name in ("eta2", "eta2_star"):
        pts = [(r.n_dof, getattr(r, name)) for r in history if getattr(r, name) > 0]
        if pts:
            label = "sum eta^2" if name == "eta2" else "sum eta*^2"
            out.append((label, pts, True))
    return out


def emit_plot(history, guide_slope: float = -1.0, title: str = "convergence",
              series=None) -> str:
    """SVG with one polyline per quantity against #dofs and a dashed guide of slope ``guide_slope``.

    ``series`` overrides the default curves (per-eigenvalue errors plus the
    primal and adjoint estimators) with ``[(label, [(dofs, value), ...]), ...]``.
    """
    curves = _series(history) if series is None else [(l, p, False) for l, p in series]
    xs = [math.log10(x) for _, pts, _ in curves for x, _ in pts]
    ys = [math.log10(y) for _, pts, _ in curves for _, y in pts]
    if not xs:
        xs, ys = [0.0, 1.0], [0.0, 1.0]
    x0, x1 = math.floor(min(xs)), math.ceil(max(xs))
    y0, y1 = math.floor(min(ys)), math.ceil(max(ys))
    x1 = max(x1, x0 + 1)
    y1 = max(y1, y0 + 1)
    pw = WIDTH - LEFT - RIGHT
    ph = HEIGHT - TOP - BOTTOM

    def px(lx):
        return LEFT + (lx - x0) / (x1 - x0) * pw

    def py(ly):
        return TOP + (y1 - ly) / (y1 - y0) * ph

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{WIDTH}" height="{HEIGHT}" '
        f'viewBox="0 0 {WIDTH} {HEIGHT}">',
        f'<title>{escape(title)}</title>',
        f'<rect x="{LEFT}" y="{TOP}" width="{pw}" height="{ph}" fill="none" stroke="black"/>',
    ]
    for d in range(x0, x1 + 1):
        parts.append(f'<line x1="{_fmt(px(d))}" y1="{TOP}" x2="{_fmt(px(d))}" y2="{TOP + ph}" '
                     f'stroke="#dddddd"/>')
        parts.append(f'<text x="{_fmt(px(d))}" y="{TOP + ph + 20}" text-anchor="middle" '
                     f'font-size="12">1e{d}</text>')
    for d in range(y0, y1 + 1):
        parts.append(f'<line x1="{LEFT}" y1="{_fmt(py(d))}" x2="{LEFT + pw}" y2="{_fmt(py(d))}" '
                     f'stroke="#dddddd"/>')
        parts.append(f'<text x="{LEFT - 8}" y="{_fmt(py(d) + 4)}" text-anchor="end" '
                     f'font-size="12">1e{d}</text>')
    parts.append(f'<text x="{LEFT + pw / 2:g}" y="{HEIGHT - 15}" text-anchor="middle" '
                 f'font-size="14">degrees of freedom</text>')

    # guide line through the first point of the last curve
    if curves:
        _, pts, _ = curves[-1]
        gx0, gy0 = math.log10(pts[0][0]), math.log10(pts[0][1])
        gx1 = math.log10(pts[-1][0]) if len(pts) > 1 else gx0 + 1
        gy1 = gy0 + guide_slope * (gx1 - gx0)
        parts.append(f'<polyline class="guide" points="{_fmt(px(gx0))},{_fmt(py(gy0))} '
                     f'{_fmt(px(gx1))},{_fmt(py(gy1))}" fill="none" stroke="black" '
                     f'stroke-dasharray="6,4"/>')
    legend_y = TOP + 10
    parts.append(f'<g class="legend" font-size="12">')
    parts.append(f'<text class="legend-guide" x="{LEFT + pw + 35}" y="{legend_y + 4}">slope {_fmt(guide_slope)}</text>')
    parts.append('</g>')
    for k, (label, pts, dashed) in enumerate(curves):
        color = COLORS[k % len(COLORS)]
        coords = " ".join(f"{_fmt(px(math.log10(x)))},{_fmt(py(math.log10(y)))}" for x, y in pts)
        dash = ' stroke-dasharray="2,2"' if dashed else ""
        parts.append(f'<polyline class="data" points="{coords}" fill="none" stroke="{color}" '
                     f'stroke-width="1.5"{dash}/>')
        ly = legend_y + 18 * (k + 1)
        parts.append(f'<line x1="{LEFT + pw + 10}" y1="{ly}" x2="{LEFT + pw + 30}" y2="{ly}" '
                     f'stroke="{color}" stroke-width="2"{dash}/>')
        parts.append(f'<text class="legend-entry" x="{LEFT + pw + 35}" y="{ly + 4}" '
                     f'font-size="12">{escape(label)}</text>')
    parts.append("</svg>")
    return "\n".join(parts) + "\n"
