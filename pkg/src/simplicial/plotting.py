"""Standalone SVG ternary diagrams, assembled from primitives.

Output is fully deterministic (fixed number formatting, no timestamps), so
identical inputs give byte-identical files.
"""

from __future__ import annotations

import math
from typing import Sequence
from xml.sax.saxutils import escape

import numpy as np

from .composition import negated_entropy
from .errors import ShapeMismatch
from .inference import ConfidenceEllipse, ternary_coords

SIZE = 480.0
MARGIN = 50.0
H = math.sqrt(3) / 2

# Two-stop colour ramp for the entropy surface (low -> high).
_LOW = np.array([68, 1, 84])
_HIGH = np.array([253, 231, 37])


def _fmt(v: float) -> str:
    s = f"{v:.3f}".rstrip("0").rstrip(".")
    return "0" if s == "-0" else s


def _px(p) -> tuple[float, float]:
    """Ternary-plane point to SVG pixels (y axis points down)."""
    x, y = float(p[0]), float(p[1])
    return MARGIN + x * SIZE, MARGIN + (H - y) * SIZE


def _pt(p) -> str:
    x, y = _px(p)
    return f"{_fmt(x)},{_fmt(y)}"


def _header(title: str | None) -> list[str]:
    width = SIZE + 2 * MARGIN
    height = H * SIZE + 2 * MARGIN
    out = [
        '<?xml version="1.0" encoding="UTF-8"?>',
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{_fmt(width)}" height="{_fmt(height)}" '
        f'viewBox="0 0 {_fmt(width)} {_fmt(height)}" font-family="sans-serif" font-size="13">',
        f'<rect x="0" y="0" width="{_fmt(width)}" height="{_fmt(height)}" fill="white"/>',
    ]
    if title:
        out.append(f'<text x="{_fmt(width / 2)}" y="20" text-anchor="middle">{escape(title)}</text>')
    return out


def _triangle(labels: Sequence[str]) -> list[str]:
    verts = ternary_coords(np.eye(3))
    out = [
        '<polygon points="' + " ".join(_pt(v) for v in verts)
        + '" fill="none" stroke="black" stroke-width="1.5"/>'
    ]
    offsets = [(-8, 18, "end"), (8, 18, "start"), (0, -10, "middle")]
    for v, lab, (dx, dy, anchor) in zip(verts, labels, offsets):
        x, y = _px(v)
        out.append(
            f'<text class="vertex" x="{_fmt(x + dx)}" y="{_fmt(y + dy)}" '
            f'text-anchor="{anchor}">{escape(str(lab))}</text>'
        )
    return out


def _grid(step: float = 0.2) -> list[str]:
    out = []
    for t in np.arange(step, 1.0 - 1e-9, step):
        for i in range(3):
            a = np.zeros(3)
            b = np.zeros(3)
            a[i] = b[i] = t
            a[(i + 1) % 3] = 1 - t
            b[(i + 2) % 3] = 1 - t
            p, q = ternary_coords(a), ternary_coords(b)
            x1, y1 = _px(p)
            x2, y2 = _px(q)
            out.append(
                f'<line x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
                'stroke="#cccccc" stroke-width="0.6"/>'
            )
    return out


def ternary_svg(
    B,
    response_names: Sequence[str] = ("Y1", "Y2", "Y3"),
    ellipses: Sequence[ConfidenceEllipse] = (),
    title: str | None = None,
) -> str:
    """Ternary diagram of the rows of a ``D_p x 3`` coefficient matrix.

    Each row is a marker labelled ``B1``, ``B2``, ...; the barycentre is
    marked with a cross (rows near it carry little information).
    """
    B = np.asarray(B, dtype=float)
    if B.ndim != 2 or B.shape[1] != 3:
        raise ShapeMismatch(f"ternary plots need 3 response components, got shape {B.shape}")
    out = _header(title)
    out += _grid()
    out += _triangle(response_names)
    for e in ellipses:
        pts = e.boundary(120)
        out.append(
            f'<polygon class="ellipse" data-row="{e.row_index + 1}" points="'
            + " ".join(_pt(p) for p in pts)
            + '" fill="#1f77b4" fill-opacity="0.15" stroke="#1f77b4" stroke-width="1"/>'
        )
    cx, cy = _px(ternary_coords(np.full(3, 1 / 3)))
    out.append(
        f'<path class="barycentre" d="M{_fmt(cx - 6)},{_fmt(cy)} H{_fmt(cx + 6)} '
        f'M{_fmt(cx)},{_fmt(cy - 6)} V{_fmt(cy + 6)}" stroke="#d62728" stroke-width="1.5"/>'
    )
    for j, p in enumerate(ternary_coords(B)):
        x, y = _px(p)
        out.append(
            f'<circle class="marker" data-row="{j + 1}" cx="{_fmt(x)}" cy="{_fmt(y)}" r="4.5" '
            'fill="black"/>'
        )
        out.append(f'<text x="{_fmt(x + 7)}" y="{_fmt(y - 7)}">B{j + 1}</text>')
    out.append("</svg>")
    return "\n".join(out) + "\n"


def _colour(t: float) -> str:
    c = np.rint(_LOW + (_HIGH - _LOW) * min(max(t, 0.0), 1.0)).astype(int)
    return "#%02x%02x%02x" % tuple(c)


def entropy_svg(resolution: int = 30, labels: Sequence[str] = ("Y1", "Y2", "Y3"), title: str | None = None) -> str:
    """Shade a triangular grid by the negated entropy ``sum y log y`` at cell centroids.

    Darkest at the barycentre (``-log 3``), brightest at the vertices (0).
    """
    if resolution < 1:
        raise ShapeMismatch("resolution must be positive")
    N = int(resolution)
    lo = -math.log(3.0)
    out = _header(title)
    for i in range(N):
        for j in range(N - i):
            k = N - i - j
            tris = [[(i, j, k), (i + 1, j, k - 1), (i, j + 1, k - 1)]]
            if k >= 2:
                tris.append([(i + 1, j, k - 1), (i, j + 1, k - 1), (i + 1, j + 1, k - 2)])
            for tri in tris:
                bary = np.array(tri, dtype=float) / N
                val = negated_entropy(bary.mean(axis=0))
                out.append(
                    '<polygon points="' + " ".join(_pt(ternary_coords(b)) for b in bary)
                    + f'" fill="{_colour((val - lo) / -lo)}" stroke="none"/>'
                )
    out += _triangle(labels)
    out.append("</svg>")
    return "\n".join(out) + "\n"
