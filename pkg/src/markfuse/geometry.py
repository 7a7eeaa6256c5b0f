"""Polyline helpers shared by the pipeline, simulator and evaluator.

Polylines are ``(n, 3)`` float arrays.  Planar operations (clipping,
projection, turn angles used for lane geometry) work on the x/y columns
and carry z along by linear interpolation.
"""

from __future__ import annotations

import numpy as np


def as_polyline(points) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] not in (2, 3):
        raise ValueError(f"expected (n, 3) points, got shape {arr.shape}")
    if arr.shape[1] == 2:
        arr = np.column_stack([arr, np.zeros(len(arr))])
    return arr


def segment_lengths(line: np.ndarray) -> np.ndarray:
    return np.linalg.norm(np.diff(line, axis=0), axis=1)


def cumulative_length(line: np.ndarray) -> np.ndarray:
    """Arclength at every vertex, starting at 0."""
    return np.concatenate([[0.0], np.cumsum(segment_lengths(line))])


def polyline_length(line: np.ndarray) -> float:
    return float(segment_lengths(line).sum()) if len(line) > 1 else 0.0


def dedupe_consecutive(line: np.ndarray, tol: float = 1e-6) -> np.ndarray:
    """Drop vertices closer than ``tol`` to their predecessor."""
    if len(line) < 2:
        return line
    keep = [0]
    for i in range(1, len(line)):
        if np.linalg.norm(line[i] - line[keep[-1]]) > tol:
            keep.append(i)
    return line[keep]


def turn_angles(line: np.ndarray) -> np.ndarray:
    """Angle in radians between consecutive segment directions at each interior vertex."""
    if len(line) < 3:
        return np.zeros(0)
    d = np.diff(line, axis=0)
    a, b = d[:-1], d[1:]
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    cos = np.einsum("ij,ij->i", a, b) / np.maximum(na * nb, 1e-300)
    return np.arccos(np.clip(cos, -1.0, 1.0))


def interpolate_at(line: np.ndarray, s: np.ndarray, cum: np.ndarray | None = None) -> np.ndarray:
    """Points at arclengths ``s`` (clamped to the polyline extent)."""
    if cum is None:
        cum = cumulative_length(line)
    s = np.clip(np.asarray(s, dtype=float), 0.0, cum[-1])
    idx = np.searchsorted(cum, s, side="right") - 1
    idx = np.clip(idx, 0, len(line) - 2)
    seg = cum[idx + 1] - cum[idx]
    t = np.where(seg > 0, (s - cum[idx]) / np.where(seg > 0, seg, 1.0), 0.0)
    return line[idx] + t[:, None] * (line[idx + 1] - line[idx])


def resample(line: np.ndarray, step: float) -> np.ndarray:
    """Points at arclength 0, step, 2*step, ... plus the final endpoint."""
    if step <= 0:
        raise ValueError("step must be positive")
    cum = cumulative_length(line)
    total = cum[-1]
    s = np.arange(0.0, total, step)
    if len(s) == 0 or total - s[-1] > 1e-9:
        s = np.append(s, total)
    if len(s) < 2:
        s = np.array([0.0, total])
    return interpolate_at(line, s, cum)


def densify(line: np.ndarray, max_spacing: float) -> np.ndarray:
    """Insert vertices so no segment is longer than ``max_spacing``; keeps original vertices."""
    out = [line[:1]]
    for a, b in zip(line[:-1], line[1:]):
        n = max(1, int(np.ceil(np.linalg.norm(b - a) / max_spacing - 1e-9)))
        t = np.arange(1, n + 1)[:, None] / n
        out.append(a + t * (b - a))
    return np.concatenate(out)


def _clip_segment(a: np.ndarray, b: np.ndarray, lo: np.ndarray, hi: np.ndarray) -> tuple[float, float] | None:
    # Liang-Barsky on x/y
    t0, t1 = 0.0, 1.0
    d = b - a
    for k in range(2):
        if abs(d[k]) < 1e-15:
            if a[k] < lo[k] or a[k] > hi[k]:
                return None
            continue
        ta = (lo[k] - a[k]) / d[k]
        tb = (hi[k] - a[k]) / d[k]
        if ta > tb:
            ta, tb = tb, ta
        t0, t1 = max(t0, ta), min(t1, tb)
        if t0 > t1:
            return None
    return t0, t1


def clip_to_rect(line: np.ndarray, lo, hi, min_length: float = 0.0) -> list[np.ndarray]:
    """Clip a polyline to the axis-aligned x/y rectangle ``[lo, hi]``.

    Returns the inside pieces in order; pieces not longer than ``min_length``
    are discarded.
    """
    lo = np.asarray(lo, dtype=float)
    hi = np.asarray(hi, dtype=float)
    pieces: list[np.ndarray] = []
    current: list[np.ndarray] = []
    for a, b in zip(line[:-1], line[1:]):
        span = _clip_segment(a, b, lo, hi)
        if span is None:
            if current:
                pieces.append(np.array(current))
                current = []
            continue
        t0, t1 = span
        pa = a + t0 * (b - a)
        pb = a + t1 * (b - a)
        if current and (t0 > 0.0 or np.linalg.norm(current[-1] - pa) > 1e-9):
            pieces.append(np.array(current))
            current = []
        if not current:
            current.append(pa)
        if np.linalg.norm(pb - current[-1]) > 1e-9:
            current.append(pb)
        if t1 < 1.0:
            pieces.append(np.array(current))
            current = []
    if current:
        pieces.append(np.array(current))
    return [p for p in pieces if len(p) >= 2 and polyline_length(p) > min_length]


def project_to_polyline(points: np.ndarray, line: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray, np.ndarray]:
    """Orthogonal projection of points onto the segments of ``line`` in the x/y plane.

    Only projections whose foot falls inside a segment count.  Returns
    ``(valid, distance, arclength_of_foot, foot)``; entries with no valid
    segment have ``valid`` False and NaN distance.
    """
    p = np.asarray(points, dtype=float)[:, :2]
    a = line[:-1, :2]
    d = np.diff(line[:, :2], axis=0)
    seg2 = np.einsum("ij,ij->i", d, d)
    seg2 = np.where(seg2 > 0, seg2, np.inf)
    rel = p[:, None, :] - a[None, :, :]
    t = np.einsum("ijk,jk->ij", rel, d) / seg2[None, :]
    inside = (t >= -1e-9) & (t <= 1.0 + 1e-9)
    foot = a[None, :, :] + np.clip(t, 0.0, 1.0)[:, :, None] * d[None, :, :]
    dist = np.linalg.norm(p[:, None, :] - foot, axis=2)
    dist = np.where(inside, dist, np.inf)
    best = np.argmin(dist, axis=1)
    rows = np.arange(len(p))
    bd = dist[rows, best]
    valid = np.isfinite(bd)
    cum = cumulative_length(line)
    tb = np.clip(t[rows, best], 0.0, 1.0)
    s = cum[best] + tb * (cum[best + 1] - cum[best])
    foot3 = line[best] + tb[:, None] * (line[best + 1] - line[best])
    bd = np.where(valid, bd, np.nan)
    return valid, bd, s, foot3


def unit(v: np.ndarray) -> np.ndarray:
    n = np.linalg.norm(v)
    return v / n if n > 0 else v


def end_direction(line: np.ndarray, at_start: bool) -> np.ndarray:
    """Planar unit direction of the first (or last) segment, pointing along the line."""
    seg = line[1] - line[0] if at_start else line[-1] - line[-2]
    return unit(seg[:2])


def angle_between(u: np.ndarray, v: np.ndarray) -> float:
    c = float(np.dot(unit(u), unit(v)))
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


class OrientedRect:
    """Rectangle in the x/y plane given by an origin, two orthonormal axes and local bounds.

    A point ``p`` maps to local coordinates ``(u, v) = axes @ (p - origin)``
    and is inside when ``lo <= (u, v) <= hi``.  z is unbounded.
    """

    def __init__(self, origin, axes, lo, hi):
        self.origin = np.asarray(origin, dtype=float)[:2]
        self.axes = np.asarray(axes, dtype=float).reshape(2, 2)
        self.lo = np.asarray(lo, dtype=float)
        self.hi = np.asarray(hi, dtype=float)

    @classmethod
    def axis_aligned(cls, lo, hi) -> "OrientedRect":
        return cls((0.0, 0.0), np.eye(2), np.asarray(lo, float)[:2], np.asarray(hi, float)[:2])

    @property
    def is_empty(self) -> bool:
        return bool(np.any(self.hi < self.lo))

    def to_local(self, points: np.ndarray) -> np.ndarray:
        pts = np.asarray(points, dtype=float)
        out = pts.copy()
        out[:, :2] = (pts[:, :2] - self.origin) @ self.axes.T
        return out

    def to_world(self, local: np.ndarray) -> np.ndarray:
        out = np.asarray(local, dtype=float).copy()
        out[:, :2] = local[:, :2] @ self.axes + self.origin
        return out

    def corners(self) -> np.ndarray:
        u = [self.lo[0], self.hi[0], self.hi[0], self.lo[0]]
        v = [self.lo[1], self.lo[1], self.hi[1], self.hi[1]]
        return np.column_stack([u, v]) @ self.axes + self.origin

    def grown(self, margin: float) -> "OrientedRect":
        return OrientedRect(self.origin, self.axes, self.lo - margin, self.hi + margin)

    def contains(self, points: np.ndarray, margin: float = 0.0) -> np.ndarray:
        loc = self.to_local(points)[:, :2]
        return np.all((loc >= self.lo - margin) & (loc <= self.hi + margin), axis=1)

    def clip(self, line: np.ndarray, min_length: float = 0.0) -> list[np.ndarray]:
        if self.is_empty:
            return []
        pieces = clip_to_rect(self.to_local(line), self.lo, self.hi, min_length)
        return [self.to_world(p) for p in pieces]

    def boxes_outside(self, box_lo: np.ndarray, box_hi: np.ndarray) -> np.ndarray:
        """For axis-aligned x/y boxes ``[box_lo, box_hi]`` (rows), True where fully outside.

        Separating-axis test over the two world axes and the two rectangle axes.
        """
        box_lo = np.asarray(box_lo, dtype=float)[:, :2]
        box_hi = np.asarray(box_hi, dtype=float)[:, :2]
        if self.is_empty:
            return np.ones(len(box_lo), dtype=bool)
        rc = self.corners()
        out = (box_hi[:, 0] < rc[:, 0].min()) | (box_lo[:, 0] > rc[:, 0].max())
        out |= (box_hi[:, 1] < rc[:, 1].min()) | (box_lo[:, 1] > rc[:, 1].max())
        xs = np.stack([box_lo[:, 0], box_hi[:, 0], box_hi[:, 0], box_lo[:, 0]], axis=1)
        ys = np.stack([box_lo[:, 1], box_lo[:, 1], box_hi[:, 1], box_hi[:, 1]], axis=1)
        for k in range(2):
            proj = (xs - self.origin[0]) * self.axes[k, 0] + (ys - self.origin[1]) * self.axes[k, 1]
            out |= (proj.max(axis=1) < self.lo[k]) | (proj.min(axis=1) > self.hi[k])
        return out
