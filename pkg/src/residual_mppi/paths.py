"""Reference path generators and monotone nearest-point matching.

A path is a densely sampled curve with per-point tangent headings and
cumulative arc length.  Matching is forward-only: queries search a window
ahead of the previous match, so progress never runs backwards even where the
figure-8 self-intersects.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .dynamics import wrap_angle

# Forward search window as a fraction of the path length.
MATCH_WINDOW_FRACTION = 0.25


@dataclass
class ReferencePath:
    """Sampled reference curve.

    points     -- (N, 3) array of [x, y, tangent heading]
    arc_length -- (N,) cumulative arc length, starting at 0
    closed     -- whether the curve loops back on itself
    """

    points: np.ndarray
    arc_length: np.ndarray
    closed: bool

    def __len__(self) -> int:
        return len(self.points)

    @property
    def total_length(self) -> float:
        return float(self.arc_length[-1])

    def window_size(self) -> int:
        return max(1, int(MATCH_WINDOW_FRACTION * len(self.points)))


def _finalize(x, y, theta, closed: bool) -> ReferencePath:
    pts = np.column_stack([x, y, wrap_angle(theta)])
    seg = np.hypot(np.diff(x), np.diff(y))
    arc = np.concatenate([[0.0], np.cumsum(seg)])
    return ReferencePath(points=pts, arc_length=arc, closed=closed)


def make_ellipse(a_axis: float, b_axis: float, n_points: int = 600) -> ReferencePath:
    """Ellipse (a cos(phi), b sin(phi)) traversed counter-clockwise."""
    if a_axis <= 0 or b_axis <= 0:
        raise ValueError("axes must be positive")
    if n_points < 8:
        raise ValueError("n_points >= 8")
    phi = np.linspace(0.0, 2 * np.pi, n_points, endpoint=False)
    x = a_axis * np.cos(phi)
    y = b_axis * np.sin(phi)
    theta = np.arctan2(b_axis * np.cos(phi), -a_axis * np.sin(phi))
    return _finalize(x, y, theta, closed=True)


def make_sine(length: float, amplitude: float, wavelength: float, n_points: int = 600) -> ReferencePath:
    """Sine wave (s, A sin(2 pi s / wavelength)) over s in [0, length]."""
    if length <= 0 or wavelength <= 0 or amplitude < 0:
        raise ValueError("length and wavelength must be positive, amplitude >= 0")
    s = np.linspace(0.0, length, n_points)
    k = 2 * np.pi / wavelength
    x = s
    y = amplitude * np.sin(k * s)
    theta = np.arctan2(amplitude * k * np.cos(k * s), np.ones_like(s))
    return _finalize(x, y, theta, closed=False)


def make_figure8(scale: float, n_points: int = 600) -> ReferencePath:
    """Gerono lemniscate (c sin(phi), c sin(phi) cos(phi)); self-intersects at the origin."""
    if scale <= 0:
        raise ValueError("scale > 0")
    phi = np.linspace(0.0, 2 * np.pi, n_points, endpoint=False)
    x = scale * np.sin(phi)
    y = scale * np.sin(phi) * np.cos(phi)
    dx = scale * np.cos(phi)
    dy = scale * np.cos(2 * phi)
    theta = np.arctan2(dy, dx)
    return _finalize(x, y, theta, closed=True)


def window_indices(path: ReferencePath, start: int, size: int | None = None) -> np.ndarray:
    """Indices of the forward search window beginning at ``start``.

    Wraps around on closed paths; truncates at the final point on open ones.
    """
    n = len(path)
    size = path.window_size() if size is None else size
    idx = start + np.arange(size + 1)
    if path.closed:
        return idx % n
    return np.minimum(idx, n - 1)


def nearest_reference(path: ReferencePath, query, prev_index: int) -> tuple[int, np.ndarray]:
    """Match a query position to the closest path point ahead of ``prev_index``.

    Returns (index, reference point).  Progress is monotone: the returned
    index never precedes ``prev_index`` within the forward window (modulo the
    wrap on closed paths).
    """
    query = np.asarray(query, dtype=float)
    idx = window_indices(path, prev_index)
    d2 = np.sum((path.points[idx, :2] - query[:2]) ** 2, axis=-1)
    best = int(idx[np.argmin(d2)])
    return best, path.points[best]


def match_series(path: ReferencePath, xy, start_index: int = 0) -> np.ndarray:
    """Monotonely match a whole trajectory; returns the per-sample indices."""
    xy = np.asarray(xy, dtype=float)
    out = np.empty(len(xy), dtype=int)
    prev = start_index
    for i, q in enumerate(xy):
        prev, _ = nearest_reference(path, q, prev)
        out[i] = prev
    return out
