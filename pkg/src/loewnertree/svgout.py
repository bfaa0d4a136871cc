"""Deterministic SVG rendering of traced hulls.

Output contains no timestamps or environment-dependent content, so files are
byte-identical across runs with the same inputs.
"""
from __future__ import annotations

import numpy as np

from .hulls import TracedHull

_PALETTE = (
    "#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e",
    "#17becf", "#8c564b", "#e377c2", "#7f7f7f", "#bcbd22",
)


def _subtree_color(vertex, parent_map):
    # color by the top-level branch below the root: walk up to depth 1
    k, v = vertex
    chain = [v]
    while (k, chain[-1]) in parent_map:
        chain.append(parent_map[(k, chain[-1])][1])
    top = chain[-2] if len(chain) > 1 else chain[-1]
    return _PALETTE[(hash((k, top)) % len(_PALETTE))]


def emit_svg(hull: TracedHull, *, width: int = 800, margin: float = 0.05,
             stroke: float = 1.5) -> str:
    """Render the hull: one polyline per genealogy vertex, the real axis, and
    markers at branch vertices; y is flipped for screen coordinates."""
    if not hull.curves:
        raise ValueError("cannot render an empty hull")
    pts = hull.all_points()
    anchors = np.array([c.anchor for c in hull.curves.values()])
    allp = np.concatenate([pts, anchors])
    x0, x1 = float(allp.real.min()), float(allp.real.max())
    y1 = float(allp.imag.max())
    x0 = min(x0, -0.05 * (x1 - x0 + 1e-9))
    span_x = max(x1 - x0, 1e-9)
    span_y = max(y1, 1e-9)
    pad = margin * max(span_x, span_y)
    sx = width / (span_x + 2 * pad)
    height = int(round((span_y + 2 * pad) * sx))

    def to_px(z):
        px = (z.real - x0 + pad) * sx
        py = height - (z.imag + pad) * sx
        return px, py

    parent_map = {}
    for v, c in hull.curves.items():
        for w, img in hull.branch_images.items():
            if isinstance(c.anchor, complex) and c.anchor == img and v != w:
                parent_map[v] = w
    lines = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" height="{height}" '
        f'viewBox="0 0 {width} {height}">',
        '<rect width="100%" height="100%" fill="white"/>',
    ]
    ax_y = to_px(0j)[1]
    lines.append(
        f'<line x1="0" y1="{ax_y:.3f}" x2="{width}" y2="{ax_y:.3f}" '
        f'stroke="#444444" stroke-width="1"/>'
    )
    for v, c in sorted(hull.curves.items()):
        color = _subtree_color(v, parent_map)
        coords = [to_px(c.anchor)] + [to_px(p) for p in c.points]
        txt = " ".join(f"{x:.3f},{y:.3f}" for x, y in coords)
        lines.append(
            f'<polyline fill="none" stroke="{color}" stroke-width="{stroke}" '
            f'data-vertex="{v[0]}:{v[1]}" points="{txt}"/>'
        )
    for v, img in sorted(hull.branch_images.items()):
        px, py = to_px(img)
        lines.append(
            f'<circle cx="{px:.3f}" cy="{py:.3f}" r="3" fill="black" '
            f'data-branch="{v[0]}:{v[1]}"/>'
        )
    lines.append("</svg>")
    return "\n".join(lines) + "\n"


def save_svg(hull: TracedHull, path: str, **kw) -> None:
    with open(path, "w") as f:
        f.write(emit_svg(hull, **kw))
