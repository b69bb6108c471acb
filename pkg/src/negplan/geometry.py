"""Planar geometry helpers: polylines, oriented rectangles, headings."""

from __future__ import annotations

import numpy as np

# Boundary contact counts as overlap; absorbs float noise at exact touching.
OVERLAP_TOL = 1e-9


class Polyline:
    """Piecewise-linear curve with cumulative arc length.

    Queries beyond either end extrapolate along the first/last segment.
    """

    def __init__(self, points):
        pts = np.asarray(points, dtype=float)
        if pts.ndim != 2 or pts.shape[1] != 2 or len(pts) < 2:
            raise ValueError("polyline needs at least two (x, y) points")
        seg = np.diff(pts, axis=0)
        seg_len = np.hypot(seg[:, 0], seg[:, 1])
        if np.any(seg_len <= 0.0):
            raise ValueError("polyline has repeated points")
        self.points = pts
        self.seg = seg
        self.seg_len = seg_len
        self.seg_dir = seg / seg_len[:, None]
        self.s = np.concatenate([[0.0], np.cumsum(seg_len)])

    @property
    def length(self) -> float:
        return float(self.s[-1])

    def _segment_index(self, s):
        idx = np.searchsorted(self.s, s, side="right") - 1
        return np.clip(idx, 0, len(self.seg) - 1)

    def point_at(self, s):
        """Point(s) at arc length ``s``."""
        s = np.asarray(s, dtype=float)
        i = self._segment_index(s)
        return self.points[i] + self.seg_dir[i] * (s - self.s[i])[..., None]

    def heading_at(self, s):
        s = np.asarray(s, dtype=float)
        d = self.seg_dir[self._segment_index(s)]
        return np.arctan2(d[..., 1], d[..., 0])

    def project(self, xy):
        """Arc length and signed lateral offset (left positive) of each point."""
        p = np.atleast_2d(np.asarray(xy, dtype=float))
        rel = p[:, None, :] - self.points[None, :-1, :]
        along = np.einsum("mnk,nk->mn", rel, self.seg_dir)
        n_seg = len(self.seg)
        lo = np.zeros(n_seg)
        hi = self.seg_len.copy()
        lo[0] = -np.inf
        hi[-1] = np.inf
        t = np.clip(along, lo, hi)
        foot = self.points[None, :-1, :] + t[..., None] * self.seg_dir[None]
        dist = np.hypot(p[:, None, 0] - foot[..., 0], p[:, None, 1] - foot[..., 1])
        best = np.argmin(dist, axis=1)
        rows = np.arange(len(p))
        s = self.s[best] + t[rows, best]
        d = self.seg_dir[best]
        r = p - foot[rows, best]
        lateral = d[:, 0] * r[:, 1] - d[:, 1] * r[:, 0]
        return s, lateral


def wrap_angle(a):
    return (np.asarray(a) + np.pi) % (2.0 * np.pi) - np.pi


def rect_corners(center, heading, length, width):
    """Corners (..., 4, 2) of rectangles ordered rear-right, front-right, front-left, rear-left."""
    c = np.asarray(center, dtype=float)
    h = np.asarray(heading, dtype=float)
    u = np.stack([np.cos(h), np.sin(h)], axis=-1)
    v = np.stack([-np.sin(h), np.cos(h)], axis=-1)
    hl, hw = 0.5 * length, 0.5 * width
    signs = np.array([[-1.0, -1.0], [1.0, -1.0], [1.0, 1.0], [-1.0, 1.0]])
    return (
        c[..., None, :]
        + signs[:, 0, None] * hl * u[..., None, :]
        + signs[:, 1, None] * hw * v[..., None, :]
    )


def rects_overlap(c1, h1, size1, c2, h2, size2, tol=OVERLAP_TOL):
    """Separating-axis test for oriented rectangles, broadcast over leading dims.

    ``size`` is (length, width). Touching boundaries count as overlap.
    """
    c1 = np.asarray(c1, dtype=float)
    c2 = np.asarray(c2, dtype=float)
    h1 = np.asarray(h1, dtype=float)
    h2 = np.asarray(h2, dtype=float)
    l1, w1 = 0.5 * size1[0], 0.5 * size1[1]
    l2, w2 = 0.5 * size2[0], 0.5 * size2[1]
    cos1, sin1 = np.cos(h1), np.sin(h1)
    cos2, sin2 = np.cos(h2), np.sin(h2)
    dx = c2[..., 0] - c1[..., 0]
    dy = c2[..., 1] - c1[..., 1]
    result = None
    # axes: box1 long/short, box2 long/short
    for ax, ay in ((cos1, sin1), (-sin1, cos1), (cos2, sin2), (-sin2, cos2)):
        r1 = l1 * np.abs(cos1 * ax + sin1 * ay) + w1 * np.abs(-sin1 * ax + cos1 * ay)
        r2 = l2 * np.abs(cos2 * ax + sin2 * ay) + w2 * np.abs(-sin2 * ax + cos2 * ay)
        ok = np.abs(dx * ax + dy * ay) <= r1 + r2 + tol
        result = ok if result is None else (result & ok)
    return result


def motion_headings(xy, initial_heading=0.0, min_step=1e-6):
    """Heading of each sample from its forward displacement.

    The last sample reuses the previous heading; samples with no motion carry
    the last known heading (``initial_heading`` before any motion).
    """
    xy = np.asarray(xy, dtype=float)
    n = len(xy)
    out = np.empty(n)
    step = np.diff(xy, axis=0)
    norms = np.hypot(step[:, 0], step[:, 1])
    raw = np.arctan2(step[:, 1], step[:, 0])
    current = float(initial_heading)
    for i in range(n - 1):
        if norms[i] > min_step:
            current = raw[i]
        out[i] = current
    if n:
        out[n - 1] = current
    return out
