"""SVG export of reconstructed trajectories: polylines, no raster.

Two fixed projections of the world frame: top-down (X across, Y up the
table) and side-on (Y across, Z up), each with the table outline for
scale. Output is deterministic text.
"""

from __future__ import annotations

from pathlib import Path

import numpy as np

from .camgeom import TableModel

_COLORS = ("#1f77b4", "#d62728", "#2ca02c", "#9467bd", "#ff7f0e", "#8c564b")
_PAD_M = 0.35  # world margin around the drawn content


class _Panel:
    """Maps a world rectangle into an SVG viewport, metric aspect."""

    def __init__(self, x0, y0, w, h, wxmin, wxmax, wymin, wymax):
        scale = min(w / (wxmax - wxmin), h / (wymax - wymin))
        self.s = scale
        # center the world rect inside the viewport
        self.ox = x0 + (w - scale * (wxmax - wxmin)) / 2.0
        self.oy = y0 + (h + scale * (wymax - wymin)) / 2.0
        self.wxmin, self.wymin = wxmin, wymin

    def to_px(self, wx, wy):
        return (
            self.ox + self.s * (wx - self.wxmin),
            self.oy - self.s * (wy - self.wymin),  # world up = SVG down
        )

    def polyline(self, pts, color, width=1.6, dash=None):
        coords = " ".join(
            f"{x:.2f},{y:.2f}" for x, y in (self.to_px(a, b) for a, b in pts)
        )
        extra = f' stroke-dasharray="{dash}"' if dash else ""
        return (
            f'<polyline points="{coords}" fill="none" stroke="{color}" '
            f'stroke-width="{width}"{extra}/>'
        )

    def dot(self, wx, wy, color, r=3.0):
        x, y = self.to_px(wx, wy)
        return f'<circle cx="{x:.2f}" cy="{y:.2f}" r="{r}" fill="{color}"/>'


def _bounds(values, lo, hi):
    if len(values):
        lo = min(lo, float(np.min(values)))
        hi = max(hi, float(np.max(values)))
    return lo - _PAD_M, hi + _PAD_M


def render_svg(
    trajectories,
    table: TableModel | None = None,
    width: int = 960,
    height: int = 420,
) -> str:
    """Render 3D trajectories as a two-panel SVG string.

    trajectories: iterables of (N, 3) world positions; each gets its own
    color (cycled). Left panel is top-down (X, Y), right panel side-on
    (Y, Z).
    """
    if table is None:
        table = TableModel()
    trajectories = [np.asarray(t, dtype=np.float64).reshape(-1, 3) for t in trajectories]
    allp = (
        np.vstack(trajectories) if trajectories else np.empty((0, 3), dtype=np.float64)
    )
    corners = table.corners

    hw = float(np.max(np.abs(corners[:, 0])))
    hl = float(np.max(np.abs(corners[:, 1])))
    z_t = table.height

    panel_w = (width - 30) / 2.0
    panel_h = height - 20.0
    x0, x1 = _bounds(allp[:, 0], -hw, hw)
    y0, y1 = _bounds(allp[:, 1], -hl, hl)
    z0, z1 = _bounds(allp[:, 2], 0.0, z_t + 0.5)
    top = _Panel(10, 10, panel_w, panel_h, x0, x1, y0, y1)
    side = _Panel(20 + panel_w, 10, panel_w, panel_h, y0, y1, z0, z1)

    parts = [
        f'<svg xmlns="http://www.w3.org/2000/svg" width="{width}" '
        f'height="{height}" viewBox="0 0 {width} {height}">',
        f'<rect width="{width}" height="{height}" fill="white"/>',
    ]
    # table outline, top-down: playing surface and the net line
    outline = [tuple(c[:2]) for c in corners] + [tuple(corners[0][:2])]
    parts.append(top.polyline(outline, "#444", width=1.2))
    parts.append(top.polyline([(-hw, 0.0), (hw, 0.0)], "#444", width=1.0, dash="4 3"))
    # side-on: surface at table height, floor at z=0
    parts.append(side.polyline([(-hl, z_t), (hl, z_t)], "#444", width=1.2))
    parts.append(side.polyline([(y0, 0.0), (y1, 0.0)], "#bbb", width=1.0))

    for i, traj in enumerate(trajectories):
        color = _COLORS[i % len(_COLORS)]
        parts.append(top.polyline([(p[0], p[1]) for p in traj], color))
        parts.append(side.polyline([(p[1], p[2]) for p in traj], color))
        if len(traj):
            parts.append(top.dot(traj[0, 0], traj[0, 1], color))
            parts.append(side.dot(traj[0, 1], traj[0, 2], color))
    parts.append("</svg>")
    return "\n".join(parts) + "\n"


def save_svg(path, trajectories, table: TableModel | None = None, **kw) -> None:
    Path(path).write_text(render_svg(trajectories, table, **kw))
