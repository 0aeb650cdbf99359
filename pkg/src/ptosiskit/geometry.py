"""Planar geometry used by the eyelid measurements.

Coordinates follow the image convention: x to the right, y downward.
"""

from __future__ import annotations

import math
from typing import NamedTuple, Sequence

import numpy as np


class GeometryError(ValueError):
    pass


class Point2(NamedTuple):
    x: float
    y: float


class Circle(NamedTuple):
    center: Point2
    radius: float


def _as_points(points, min_count: int, what: str) -> np.ndarray:
    arr = np.asarray(points, dtype=float)
    if arr.ndim != 2 or arr.shape[1] != 2:
        raise GeometryError(f"{what}: expected an (n, 2) point array, got shape {arr.shape}")
    if arr.shape[0] < min_count:
        raise GeometryError(f"{what}: need at least {min_count} points, got {arr.shape[0]}")
    if not np.all(np.isfinite(arr)):
        raise GeometryError(f"{what}: non-finite coordinates")
    return arr


def _signed_area(poly: np.ndarray) -> float:
    x, y = poly[:, 0], poly[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(np.roll(x, -1), y))


def polygon_area(poly) -> float:
    """Absolute shoelace area of a simple polygon."""
    return abs(_signed_area(_as_points(poly, 3, "polygon")))


def _edge_disc_area(ax: float, ay: float, bx: float, by: float, r: float) -> float:
    """Signed area of disc(0, r) intersected with triangle (origin, a, b)."""
    dx, dy = bx - ax, by - ay
    qa = dx * dx + dy * dy
    if qa == 0.0:
        return 0.0
    qb = ax * dx + ay * dy
    qc = ax * ax + ay * ay - r * r
    cuts = [0.0]
    disc = qb * qb - qa * qc
    if disc > 0.0:
        root = math.sqrt(disc)
        for t in sorted(((-qb - root) / qa, (-qb + root) / qa)):
            if 0.0 < t < 1.0:
                cuts.append(t)
    cuts.append(1.0)

    total = 0.0
    r2 = r * r
    for t0, t1 in zip(cuts[:-1], cuts[1:]):
        px, py = ax + t0 * dx, ay + t0 * dy
        qx, qy = ax + t1 * dx, ay + t1 * dy
        tm = 0.5 * (t0 + t1)
        mx, my = ax + tm * dx, ay + tm * dy
        cross = px * qy - py * qx
        if mx * mx + my * my <= r2:
            total += 0.5 * cross
        else:
            total += 0.5 * r2 * math.atan2(cross, px * qx + py * qy)
    return total


def circle_polygon_intersection_area(circle: Circle, poly) -> float:
    """Area shared by a disc and a simple polygon.

    Walks the polygon edges, and for each edge adds the signed area of the
    disc clipped to the triangle fanned from the circle centre: straight
    pieces inside the disc contribute triangles, pieces outside contribute
    exact circular sectors. The signed sum is the intersection area.
    """
    pts = _as_points(poly, 3, "polygon")
    r = float(circle.radius)
    if not r > 0:
        raise GeometryError("circle radius must be positive")
    if abs(_signed_area(pts)) == 0.0:
        raise GeometryError("degenerate polygon (zero area)")
    cx, cy = float(circle.center[0]), float(circle.center[1])
    rel = pts - (cx, cy)
    nxt = np.roll(rel, -1, axis=0)
    total = 0.0
    for (ax, ay), (bx, by) in zip(rel.tolist(), nxt.tolist()):
        total += _edge_disc_area(ax, ay, bx, by, r)
    area = abs(total)
    return min(area, math.pi * r * r)


def point_to_segment(p, a, b) -> tuple[float, Point2]:
    px, py = float(p[0]), float(p[1])
    ax, ay = float(a[0]), float(a[1])
    bx, by = float(b[0]), float(b[1])
    dx, dy = bx - ax, by - ay
    seg2 = dx * dx + dy * dy
    t = 0.0 if seg2 == 0.0 else ((px - ax) * dx + (py - ay) * dy) / seg2
    if t <= 0.0:
        return math.hypot(px - ax, py - ay), Point2(ax, ay)
    if t >= 1.0:
        return math.hypot(px - bx, py - by), Point2(bx, by)
    # perpendicular distance from the cross product: exact zero on the line
    dist = abs((px - ax) * dy - (py - ay) * dx) / math.sqrt(seg2)
    return dist, Point2(ax + t * dx, ay + t * dy)


def point_to_polyline_distance(p, chain: Sequence, mode: str = "segment") -> tuple[float, Point2]:
    """Distance from ``p`` to an open polyline and the point realising it.

    ``mode="segment"`` measures to the segments; ``mode="vertex"`` only to
    the chain's vertices. On ties the earliest segment/vertex wins.
    """
    pts = _as_points(chain, 2, "polyline")
    if mode == "vertex":
        d = np.hypot(pts[:, 0] - p[0], pts[:, 1] - p[1])
        i = int(np.argmin(d))
        return float(d[i]), Point2(float(pts[i, 0]), float(pts[i, 1]))
    if mode != "segment":
        raise GeometryError(f"unknown distance mode {mode!r}")
    best = (math.inf, Point2(math.nan, math.nan))
    for a, b in zip(pts[:-1], pts[1:]):
        cand = point_to_segment(p, a, b)
        if cand[0] < best[0]:
            best = cand
    return best


# iris landmark order: centre, temporal rim, superior rim, nasal rim, inferior rim
IRIS_CENTER, IRIS_TEMPORAL, IRIS_SUPERIOR, IRIS_NASAL, IRIS_INFERIOR = range(5)


def circle_from_iris_landmarks(iris) -> Circle:
    """Iris disc from the 5-point iris set.

    The radius comes from the horizontal rim pair only, since the mm
    calibration is defined on the horizontal iris diameter.
    """
    pts = _as_points(iris, 5, "iris")
    if pts.shape[0] != 5:
        raise GeometryError(f"iris: expected 5 points, got {pts.shape[0]}")
    t, n = pts[IRIS_TEMPORAL], pts[IRIS_NASAL]
    diameter = math.hypot(n[0] - t[0], n[1] - t[1])
    if diameter == 0.0:
        raise GeometryError("degenerate iris: temporal and nasal rim points coincide")
    return Circle(Point2(float(pts[0, 0]), float(pts[0, 1])), 0.5 * diameter)
