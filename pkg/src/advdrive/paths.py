"""Reference polylines and cross-track error."""

from __future__ import annotations

from dataclasses import dataclass
from typing import Tuple

import numpy as np


@dataclass(frozen=True)
class ReferencePath:
    waypoints: np.ndarray
    closed: bool = False

    def __post_init__(self):
        w = np.asarray(self.waypoints, dtype=np.float64).reshape(-1, 2)
        if w.shape[0] < 2:
            raise ValueError("a reference path needs at least 2 waypoints")
        if np.any(np.all(np.diff(w, axis=0) == 0.0, axis=1)):
            raise ValueError("consecutive waypoints must be distinct")
        object.__setattr__(self, "waypoints", w)

    @property
    def segments(self) -> Tuple[np.ndarray, np.ndarray]:
        """Segment start points and vectors, shape ``(S, 2)`` each."""
        pts = self.waypoints
        if self.closed and not np.array_equal(pts[0], pts[-1]):
            pts = np.vstack([pts, pts[:1]])
        return pts[:-1], np.diff(pts, axis=0)

    @property
    def cumulative_length(self) -> np.ndarray:
        _, vec = self.segments
        return np.concatenate([[0.0], np.cumsum(np.linalg.norm(vec, axis=1))])

    @property
    def length(self) -> float:
        return float(self.cumulative_length[-1])

    def project(self, p) -> Tuple[np.ndarray, float, int]:
        """Nearest point on the polyline, its arc length and segment index.

        Ties go to the segment with the smaller index.
        """
        p = np.asarray(p, dtype=np.float64)[:2]
        start, vec = self.segments
        denom = np.einsum("ij,ij->i", vec, vec)
        s = np.clip(np.einsum("ij,ij->i", p - start, vec) / denom, 0.0, 1.0)
        foot = start + s[:, None] * vec
        d2 = np.einsum("ij,ij->i", p - foot, p - foot)
        k = int(np.argmin(d2))
        arc = self.cumulative_length[k] + s[k] * np.sqrt(denom[k])
        return foot[k], float(arc), k

    def point_at(self, arc: float) -> np.ndarray:
        cum = self.cumulative_length
        total = cum[-1]
        arc = arc % total if self.closed else float(np.clip(arc, 0.0, total))
        k = int(np.clip(np.searchsorted(cum, arc, side="right") - 1, 0, len(cum) - 2))
        start, vec = self.segments
        return start[k] + (arc - cum[k]) / (cum[k + 1] - cum[k]) * vec[k]

    def tangent_at(self, arc: float) -> np.ndarray:
        cum = self.cumulative_length
        total = cum[-1]
        arc = arc % total if self.closed else float(np.clip(arc, 0.0, total))
        k = int(np.clip(np.searchsorted(cum, arc, side="right") - 1, 0, len(cum) - 2))
        _, vec = self.segments
        return vec[k] / np.linalg.norm(vec[k])

    def densify(self, spacing: float) -> np.ndarray:
        n = max(int(np.ceil(self.length / spacing)), 1)
        return np.array([self.point_at(a) for a in np.linspace(0.0, self.length, n + 1)])


def cte(state, path: ReferencePath):
    """Unsigned distance from ``(x, y)`` to the path and its gradient.

    Returns ``(distance, grad)`` where ``grad`` is d/d(x, y, heading); the
    heading component is zero and the gradient is zero on the path itself.
    """
    p = np.asarray(state, dtype=np.float64)[:2]
    foot, _, k = path.project(p)
    start, vec = path.segments
    s = float((p - start[k]) @ vec[k]) / float(vec[k] @ vec[k])
    grad = np.zeros(3)
    if 0.0 < s < 1.0:
        # interior foot: perpendicular distance, exact for points on the line
        n = np.array([-vec[k][1], vec[k][0]]) / np.linalg.norm(vec[k])
        side = float((p - start[k]) @ n)
        dist = abs(side)
        if dist > 0.0:
            grad[:2] = np.sign(side) * n
        return dist, grad
    diff = p - foot
    dist = float(np.hypot(diff[0], diff[1]))
    if dist > 0.0:
        grad[:2] = diff / dist
    return dist, grad


def straight_path(length: float = 6.0) -> ReferencePath:
    return ReferencePath(np.array([[0.0, 0.0], [length, 0.0]]))


def l_turn_path(leg: float = 3.0, radius: float = 1.5, arc_points: int = 24) -> ReferencePath:
    """Drive along +x, turn left through a circular arc, continue along +y."""
    a = np.linspace(-np.pi / 2, 0.0, arc_points + 1)
    cx, cy = leg, radius
    arc = np.stack([cx + radius * np.cos(a), cy + radius * np.sin(a)], axis=1)
    pts = np.vstack([[[0.0, 0.0]], arc, [[leg + radius, radius + leg]]])
    return ReferencePath(pts)


def square_loop_path(side: float = 4.0, radius: float = 1.0, arc_points: int = 12) -> ReferencePath:
    """Counter-clockwise square with rounded corners, starting mid-bottom."""
    pts = []
    h = side / 2
    corners = [(h - radius, -h + radius, -np.pi / 2), (h - radius, h - radius, 0.0),
               (-h + radius, h - radius, np.pi / 2), (-h + radius, -h + radius, np.pi)]
    pts.append([0.0, -h])
    for cx, cy, a0 in corners:
        a = np.linspace(a0, a0 + np.pi / 2, arc_points + 1)
        pts.extend(np.stack([cx + radius * np.cos(a), cy + radius * np.sin(a)], axis=1).tolist())
    return ReferencePath(np.array(pts), closed=True)
