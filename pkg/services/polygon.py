"""Convex polygon helpers: hull, half-plane form, membership, clipping."""

import math
from typing import Iterable, List, Sequence, Tuple

Point = Tuple[float, float]
HalfPlane = Tuple[float, float, float]  # a·p + b·q ≤ c

EPS = 1e-12
MERGE_TOL = 1e-10


def _cross(o: Point, a: Point, b: Point) -> float:
    return (a[0] - o[0]) * (b[1] - o[1]) - (a[1] - o[1]) * (b[0] - o[0])


def _merge_close(points: Sequence[Point]) -> List[Point]:
    merged: List[Point] = []
    for pt in points:
        if not any(math.hypot(pt[0] - m[0], pt[1] - m[1]) <= MERGE_TOL for m in merged):
            merged.append(pt)
    return merged


def convex_hull(points: Iterable[Point]) -> List[Point]:
    """Monotone-chain hull, counter-clockwise, collinear points dropped.

    Returns one point for a degenerate cloud, two for a collinear one.
    """
    pts = sorted(set((float(p), float(q)) for p, q in points))
    pts = _merge_close(pts)
    if len(pts) <= 1:
        return pts

    lower: List[Point] = []
    for pt in pts:
        while len(lower) >= 2 and _cross(lower[-2], lower[-1], pt) <= EPS:
            lower.pop()
        lower.append(pt)
    upper: List[Point] = []
    for pt in reversed(pts):
        while len(upper) >= 2 and _cross(upper[-2], upper[-1], pt) <= EPS:
            upper.pop()
        upper.append(pt)

    hull = lower[:-1] + upper[:-1]
    hull = _merge_close(hull)
    if len(hull) == 2 or (len(hull) > 2 and abs(polygon_area(hull)) <= EPS):
        # collinear cloud: keep the extreme endpoints
        return [pts[0], pts[-1]]
    return hull


def polygon_area(vertices: Sequence[Point]) -> float:
    """Shoelace area; zero for points and segments."""
    n = len(vertices)
    if n < 3:
        return 0.0
    total = 0.0
    for k in range(n):
        p1, q1 = vertices[k]
        p2, q2 = vertices[(k + 1) % n]
        total += p1 * q2 - p2 * q1
    return 0.5 * total


def halfplanes(vertices: Sequence[Point]) -> List[HalfPlane]:
    """Outward-normalized inequalities describing the hull of vertices."""
    hull = convex_hull(vertices)
    if not hull:
        raise ValueError("cannot describe an empty polygon by half-planes")
    if len(hull) == 1:
        p0, q0 = hull[0]
        return [(1.0, 0.0, p0), (-1.0, 0.0, -p0), (0.0, 1.0, q0), (0.0, -1.0, -q0)]
    if len(hull) == 2:
        (p1, q1), (p2, q2) = hull
        length = math.hypot(p2 - p1, q2 - q1)
        dp, dq = (p2 - p1) / length, (q2 - q1) / length
        na, nb = dq, -dp
        line = na * p1 + nb * q1
        return [
            (na, nb, line),
            (-na, -nb, -line),
            (dp, dq, dp * p2 + dq * q2),
            (-dp, -dq, -(dp * p1 + dq * q1)),
        ]

    planes: List[HalfPlane] = []
    n = len(hull)
    for k in range(n):
        p1, q1 = hull[k]
        p2, q2 = hull[(k + 1) % n]
        length = math.hypot(p2 - p1, q2 - q1)
        a, b = (q2 - q1) / length, -(p2 - p1) / length
        planes.append((a, b, a * p1 + b * q1))
    return planes


def contains(planes: Sequence[HalfPlane], point: Point, tol: float = 1e-9) -> bool:
    p, q = point
    return all(a * p + b * q - c <= tol for a, b, c in planes)


def max_violation(planes: Sequence[HalfPlane], point: Point) -> float:
    p, q = point
    return max(a * p + b * q - c for a, b, c in planes)


def _clip(vertices: List[Point], plane: HalfPlane, tol: float) -> List[Point]:
    a, b, c = plane
    n = len(vertices)
    clipped: List[Point] = []
    for k in range(n):
        cur = vertices[k]
        nxt = vertices[(k + 1) % n]
        s_cur = a * cur[0] + b * cur[1] - c
        s_nxt = a * nxt[0] + b * nxt[1] - c
        if s_cur <= tol:
            clipped.append(cur)
        if (s_cur > tol) != (s_nxt > tol) and s_cur != s_nxt:
            ratio = s_cur / (s_cur - s_nxt)
            clipped.append((cur[0] + ratio * (nxt[0] - cur[0]), cur[1] + ratio * (nxt[1] - cur[1])))
    return clipped


def intersect(first: Sequence[Point], second: Sequence[Point], tol: float = 1e-9) -> List[Point]:
    """Intersection of two convex polygons (possibly points or segments)."""
    result = convex_hull(first)
    if not result or not second:
        return []
    for plane in halfplanes(second):
        result = _clip(result, plane, tol)
        if not result:
            return []
    return convex_hull(result)


def support(vertices: Sequence[Point], direction: Point) -> float:
    """Largest value of direction·x over the polygon."""
    return max(direction[0] * p + direction[1] * q for p, q in vertices)
