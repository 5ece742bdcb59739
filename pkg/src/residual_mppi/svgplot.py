"""Hand-rolled SVG figures: trajectory overlays, error boxplots, rate densities.

No plotting library: elements are emitted with fixed-precision coordinates in
a deterministic order, so identical inputs produce byte-identical files.
Geometry metadata (axis scales, box positions) is returned alongside each
figure so tests can verify glyph positions against the underlying statistics.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .metrics import DistributionSummary, RateDensity

METHOD_COLORS = {"reference": "#888888", "nominal": "#c0392b", "icode": "#1f6fb2"}
_FALLBACK_COLORS = ("#2a9d8f", "#7b2d8b", "#b58900")


def _color(name: str, index: int) -> str:
    return METHOD_COLORS.get(name, _FALLBACK_COLORS[index % len(_FALLBACK_COLORS)])


def _fmt(v: float) -> str:
    return f"{v:.3f}"


@dataclass
class LinearScale:
    """Affine map from data coordinates to pixel coordinates."""

    d0: float
    d1: float
    p0: float
    p1: float

    def __call__(self, v: float) -> float:
        if self.d1 == self.d0:
            return 0.5 * (self.p0 + self.p1)
        return self.p0 + (float(v) - self.d0) * (self.p1 - self.p0) / (self.d1 - self.d0)


class SvgCanvas:
    def __init__(self, width: int, height: int):
        self.width = width
        self.height = height
        self._parts: list[str] = []

    def polyline(self, xs, ys, stroke: str, width: float = 1.5, cls: str | None = None) -> None:
        pts = " ".join(f"{_fmt(x)},{_fmt(y)}" for x, y in zip(xs, ys))
        cls_attr = f' class="{cls}"' if cls else ""
        self._parts.append(
            f'<polyline{cls_attr} points="{pts}" fill="none" stroke="{stroke}" stroke-width="{width}"/>'
        )

    def line(self, x1, y1, x2, y2, stroke: str, width: float = 1.0, cls: str | None = None) -> None:
        cls_attr = f' class="{cls}"' if cls else ""
        self._parts.append(
            f'<line{cls_attr} x1="{_fmt(x1)}" y1="{_fmt(y1)}" x2="{_fmt(x2)}" y2="{_fmt(y2)}" '
            f'stroke="{stroke}" stroke-width="{width}"/>'
        )

    def rect(self, x, y, w, h, stroke: str, fill: str = "none", cls: str | None = None) -> None:
        cls_attr = f' class="{cls}"' if cls else ""
        self._parts.append(
            f'<rect{cls_attr} x="{_fmt(x)}" y="{_fmt(y)}" width="{_fmt(w)}" height="{_fmt(h)}" '
            f'stroke="{stroke}" fill="{fill}"/>'
        )

    def circle(self, cx, cy, r, fill: str, cls: str | None = None) -> None:
        cls_attr = f' class="{cls}"' if cls else ""
        self._parts.append(f'<circle{cls_attr} cx="{_fmt(cx)}" cy="{_fmt(cy)}" r="{_fmt(r)}" fill="{fill}"/>')

    def text(self, x, y, content: str, size: int = 11, anchor: str = "start") -> None:
        self._parts.append(
            f'<text x="{_fmt(x)}" y="{_fmt(y)}" font-size="{size}" font-family="sans-serif" '
            f'text-anchor="{anchor}">{content}</text>'
        )

    def render(self) -> str:
        body = "\n".join(self._parts)
        return (
            f'<svg xmlns="http://www.w3.org/2000/svg" width="{self.width}" height="{self.height}" '
            f'viewBox="0 0 {self.width} {self.height}">\n'
            f'<rect x="0" y="0" width="{self.width}" height="{self.height}" fill="white"/>\n'
            f"{body}\n</svg>\n"
        )


MARGIN = 50.0


def _frame(canvas: SvgCanvas, title: str) -> tuple[float, float, float, float]:
    x0, y0 = MARGIN, MARGIN
    x1, y1 = canvas.width - MARGIN, canvas.height - MARGIN
    canvas.rect(x0, y0, x1 - x0, y1 - y0, stroke="#333333")
    canvas.text(canvas.width / 2, MARGIN - 14, title, size=13, anchor="middle")
    return x0, y0, x1, y1


def trajectory_overlay(ref_xy: np.ndarray, runs: dict[str, np.ndarray], title: str,
                       width: int = 640, height: int = 480) -> tuple[str, dict]:
    """Reference curve plus one trajectory per labelled run, equal-aspect."""
    all_x = np.concatenate([ref_xy[:, 0]] + [r[:, 0] for r in runs.values()])
    all_y = np.concatenate([ref_xy[:, 1]] + [r[:, 1] for r in runs.values()])
    pad = 0.05 * max(np.ptp(all_x), np.ptp(all_y), 1.0)
    canvas = SvgCanvas(width, height)
    x0, y0, x1, y1 = _frame(canvas, title)
    # equal aspect: one scale factor for both axes
    span = max(np.ptp(all_x), np.ptp(all_y)) + 2 * pad
    cx, cy = (all_x.min() + all_x.max()) / 2, (all_y.min() + all_y.max()) / 2
    extent = min(x1 - x0, y1 - y0)
    sx = LinearScale(cx - span / 2, cx + span / 2, (x0 + x1) / 2 - extent / 2, (x0 + x1) / 2 + extent / 2)
    sy = LinearScale(cy - span / 2, cy + span / 2, (y0 + y1) / 2 + extent / 2, (y0 + y1) / 2 - extent / 2)
    canvas.polyline([sx(v) for v in ref_xy[:, 0]], [sy(v) for v in ref_xy[:, 1]],
                    stroke=METHOD_COLORS["reference"], width=1.0, cls="reference")
    legend_y = y0 + 16
    for i, (label, xy) in enumerate(runs.items()):
        color = _color(label, i)
        canvas.polyline([sx(v) for v in xy[:, 0]], [sy(v) for v in xy[:, 1]],
                        stroke=color, width=1.5, cls=f"run-{label}")
        canvas.text(x0 + 10, legend_y, label, size=11)
        canvas.line(x0 + 60, legend_y - 4, x0 + 90, legend_y - 4, stroke=color, width=2.0)
        legend_y += 16
    meta = {"x_scale": sx, "y_scale": sy}
    return canvas.render(), meta


def error_boxplots(summaries: dict[str, dict[str, DistributionSummary]], title: str,
                   width: int = 640, height: int = 360) -> tuple[str, dict]:
    """Grouped boxplots of absolute tracking errors per state and method.

    ``summaries`` maps method -> {state label -> DistributionSummary}.  The
    median line of each box carries class "median"; the mean marker class
    "mean".
    """
    methods = list(summaries)
    states = list(next(iter(summaries.values())))
    canvas = SvgCanvas(width, height)
    x0, y0, x1, y1 = _frame(canvas, title)
    hi = max(s.whisker_high for by_state in summaries.values() for s in by_state.values())
    scale = LinearScale(0.0, max(hi, 1e-9) * 1.1, y1, y0)
    n_slots = len(states) * len(methods)
    slot_w = (x1 - x0) / max(n_slots, 1)
    box_w = slot_w * 0.55
    boxes = {}
    slot = 0
    for si, state in enumerate(states):
        for mi, method in enumerate(methods):
            s = summaries[method][state]
            cx = x0 + slot_w * (slot + 0.5)
            color = _color(method, mi)
            canvas.line(cx, scale(s.whisker_low), cx, scale(s.q1), stroke=color, cls="whisker")
            canvas.line(cx, scale(s.q3), cx, scale(s.whisker_high), stroke=color, cls="whisker")
            canvas.rect(cx - box_w / 2, scale(s.q3), box_w, scale(s.q1) - scale(s.q3), stroke=color, cls="box")
            canvas.line(cx - box_w / 2, scale(s.median), cx + box_w / 2, scale(s.median),
                        stroke=color, width=2.0, cls="median")
            canvas.circle(cx, scale(s.mean), 3.0, fill="#2e8b57", cls="mean")
            canvas.text(cx, y1 + 16, f"{state}:{method}", size=9, anchor="middle")
            boxes[f"{state}:{method}"] = {"cx": cx, "median_px": scale(s.median)}
            slot += 1
    canvas.text(x0 - 8, scale(0.0) + 4, "0", size=10, anchor="end")
    canvas.text(x0 - 8, y0 + 4, f"{scale.d1:.3g}", size=10, anchor="end")
    meta = {"scale": scale, "boxes": boxes}
    return canvas.render(), meta


def rate_density_plot(densities: dict[str, tuple[RateDensity, RateDensity]], title: str,
                      width: int = 640, height: int = 360) -> tuple[str, dict]:
    """Control-rate densities; left panel acceleration rate, right panel steering rate."""
    canvas = SvgCanvas(width, height)
    canvas.text(width / 2, MARGIN - 14, title, size=13, anchor="middle")
    panel_w = (width - 3 * MARGIN) / 2
    meta = {}
    for p, channel in enumerate(("accel_rate", "steer_rate")):
        px0 = MARGIN + p * (panel_w + MARGIN)
        px1 = px0 + panel_w
        py0, py1 = MARGIN, height - MARGIN
        canvas.rect(px0, py0, px1 - px0, py1 - py0, stroke="#333333")
        canvas.text((px0 + px1) / 2, py1 + 18, channel, size=10, anchor="middle")
        all_d = [d for pair in densities.values() for d in [pair[p]]]
        dmax = max(max(d.density) if d.density else 0.0 for d in all_d)
        bmax = max(max(abs(e) for e in d.bin_edges) for d in all_d)
        sx = LinearScale(-bmax, bmax, px0, px1)
        sy = LinearScale(0.0, max(dmax, 1e-9) * 1.05, py1, py0)
        for i, (method, pair) in enumerate(densities.items()):
            d = pair[p]
            centers = 0.5 * (np.array(d.bin_edges[:-1]) + np.array(d.bin_edges[1:]))
            canvas.polyline([sx(c) for c in centers], [sy(v) for v in d.density],
                            stroke=_color(method, i), width=1.5, cls=f"density-{channel}-{method}")
            if p == 0:
                canvas.text(px0 + 8, py0 + 14 + 14 * i, method, size=10)
                canvas.line(px0 + 70, py0 + 10 + 14 * i, px0 + 95, py0 + 10 + 14 * i,
                            stroke=_color(method, i), width=2.0)
        meta[channel] = {"x_scale": sx, "y_scale": sy}
    return canvas.render(), meta
