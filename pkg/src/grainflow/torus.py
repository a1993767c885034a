"""Flat-torus geometry kernel.

Point arithmetic on [0, Lx) x [0, Ly) with periodic identification,
minimal-image lifting of polylines, triangle circumradii, and a uniform
grid index over polyline segments.  Everything downstream (generators,
flow, window sampling) sits on top of these primitives.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np

__all__ = [
    "TorusDomain",
    "wrap",
    "min_image",
    "lift",
    "torus_distance",
    "circumradius",
    "circumcenters",
    "polyline_length",
    "resample_polyline",
    "SpatialIndex",
]


@dataclass(frozen=True)
class TorusDomain:
    """Flat torus [0, lx) x [0, ly).

    A single positive argument gives the square torus; a second side
    length is accepted so that lattices whose periods involve sqrt(3)
    can be made exactly periodic.
    """

    lx: float
    ly: float = None  # type: ignore[assignment]

    def __post_init__(self):
        if self.ly is None:
            object.__setattr__(self, "ly", self.lx)
        if not (math.isfinite(self.lx) and math.isfinite(self.ly)):
            raise ValueError("domain sides must be finite")
        if self.lx <= 0 or self.ly <= 0:
            raise ValueError("domain sides must be positive")

    @property
    def sides(self) -> np.ndarray:
        return np.array([self.lx, self.ly])

    @property
    def area(self) -> float:
        return self.lx * self.ly

    def min_side(self) -> float:
        return min(self.lx, self.ly)


def wrap(p, dom: TorusDomain) -> np.ndarray:
    """Canonical representative of ``p`` in [0, lx) x [0, ly).

    Accepts a point or an (n, 2) array.  Raises on non-finite input.
    """
    p = np.asarray(p, dtype=float)
    if not np.all(np.isfinite(p)):
        raise ValueError("non-finite coordinates")
    sides = dom.sides
    out = np.mod(p, sides)
    # np.mod can return the modulus itself when p is a tiny negative number
    out = np.where(out >= sides, out - sides, out)
    return out


def min_image(delta, dom: TorusDomain) -> np.ndarray:
    """Shift a displacement (or array of them) to the minimal image."""
    delta = np.asarray(delta, dtype=float)
    sides = dom.sides
    return delta - sides * np.round(delta / sides)


def lift(points, dom: TorusDomain, anchor=None) -> np.ndarray:
    """Lift a wrapped polyline to a continuous chart.

    Consecutive gaps are interpreted with minimal-image continuity; the
    first point is placed at its wrapped position (or relative to
    ``anchor`` when given, itself minimal-imaged around the anchor).
    """
    pts = np.asarray(points, dtype=float)
    if pts.ndim == 1:
        pts = pts[None, :]
    d = min_image(np.diff(pts, axis=0), dom)
    start = pts[0]
    if anchor is not None:
        anchor = np.asarray(anchor, dtype=float)
        start = anchor + min_image(pts[0] - anchor, dom)
    return np.vstack([start, start + np.cumsum(d, axis=0)])


def torus_distance(p, q, dom: TorusDomain):
    """Distance on the torus (minimum over periodic images).

    Vectorizes over leading dimensions of ``p``/``q``.
    """
    p = np.asarray(p, dtype=float)
    q = np.asarray(q, dtype=float)
    if not (np.all(np.isfinite(p)) and np.all(np.isfinite(q))):
        raise ValueError("non-finite coordinates")
    d = min_image(p - q, dom)
    return np.linalg.norm(d, axis=-1)


def circumradius(a, b, c) -> float:
    """Circumradius of the triangle a, b, c (planar coordinates).

    Collinear triples give +inf (the degenerate circle is a line); a
    coincident pair is a domain error.
    """
    a = np.asarray(a, dtype=float)
    b = np.asarray(b, dtype=float)
    c = np.asarray(c, dtype=float)
    ab = np.linalg.norm(b - a)
    bc = np.linalg.norm(c - b)
    ca = np.linalg.norm(a - c)
    if ab == 0.0 or bc == 0.0 or ca == 0.0:
        raise ValueError("coincident points have no circumradius")
    cross = (b[0] - a[0]) * (c[1] - a[1]) - (b[1] - a[1]) * (c[0] - a[0])
    if cross == 0.0:
        return math.inf
    return (ab * bc * ca) / (2.0 * abs(cross))


def circumcenters(a: np.ndarray, b: np.ndarray, c: np.ndarray):
    """Vectorized circumcenters for stacked triples.

    Returns (centers, valid) where ``valid`` is False for (near-)
    collinear triples; the corresponding center rows are unusable.
    """
    ax, ay = a[:, 0], a[:, 1]
    bx, by = b[:, 0], b[:, 1]
    cx, cy = c[:, 0], c[:, 1]
    d = 2.0 * (ax * (by - cy) + bx * (cy - ay) + cx * (ay - by))
    valid = d != 0.0
    dsafe = np.where(valid, d, 1.0)
    a2 = ax * ax + ay * ay
    b2 = bx * bx + by * by
    c2 = cx * cx + cy * cy
    ux = (a2 * (by - cy) + b2 * (cy - ay) + c2 * (ay - by)) / dsafe
    uy = (a2 * (cx - bx) + b2 * (ax - cx) + c2 * (bx - ax)) / dsafe
    return np.stack([ux, uy], axis=1), valid


def polyline_length(points, dom: TorusDomain = None) -> float:
    """Arclength of a polyline; minimal-image gaps when a domain is given."""
    pts = np.asarray(points, dtype=float)
    d = np.diff(pts, axis=0)
    if dom is not None:
        d = min_image(d, dom)
    return float(np.sum(np.hypot(d[:, 0], d[:, 1])))


def resample_polyline(points: np.ndarray, npts: int) -> np.ndarray:
    """Resample a lifted polyline to ``npts`` uniformly spaced (by
    arclength) points, keeping the endpoints exactly."""
    pts = np.asarray(points, dtype=float)
    seg = np.linalg.norm(np.diff(pts, axis=0), axis=1)
    s = np.concatenate([[0.0], np.cumsum(seg)])
    total = s[-1]
    if total == 0.0:
        return np.repeat(pts[:1], npts, axis=0)
    t = np.linspace(0.0, total, npts)
    x = np.interp(t, s, pts[:, 0])
    y = np.interp(t, s, pts[:, 1])
    out = np.stack([x, y], axis=1)
    out[0] = pts[0]
    out[-1] = pts[-1]
    return out


class SpatialIndex:
    """Uniform-grid index over polyline segments of an embedded graph.

    Buckets map grid cells to (edge id, segment index) pairs.  Queries
    return a superset of the segments meeting a ball (bounding boxes are
    used for insertion, so false positives are possible, false negatives
    are not).
    """

    def __init__(self, dom: TorusDomain, cell_size: float):
        if cell_size <= 0:
            raise ValueError("cell_size must be positive")
        self.dom = dom
        self.nx = max(1, int(math.floor(dom.lx / cell_size)))
        self.ny = max(1, int(math.floor(dom.ly / cell_size)))
        self.cx = dom.lx / self.nx
        self.cy = dom.ly / self.ny
        self.buckets: dict[tuple[int, int], list[tuple[int, int]]] = {}

    def insert_polyline(self, edge_id: int, points: np.ndarray):
        pts = lift(points, self.dom)
        p0 = pts[:-1]
        p1 = pts[1:]
        lo = np.minimum(p0, p1)
        hi = np.maximum(p0, p1)
        ix0 = np.floor(lo[:, 0] / self.cx).astype(int)
        ix1 = np.floor(hi[:, 0] / self.cx).astype(int)
        iy0 = np.floor(lo[:, 1] / self.cy).astype(int)
        iy1 = np.floor(hi[:, 1] / self.cy).astype(int)
        for k in range(len(p0)):
            for ix in range(ix0[k], ix1[k] + 1):
                for iy in range(iy0[k], iy1[k] + 1):
                    key = (ix % self.nx, iy % self.ny)
                    self.buckets.setdefault(key, []).append((edge_id, k))

    def query_segments_near(self, p, radius: float) -> list[tuple[int, int]]:
        """All (edge id, segment index) possibly within ``radius`` of p."""
        if radius >= 0.5 * self.dom.min_side():
            raise ValueError("query radius must be < half the domain side")
        p = np.asarray(p, dtype=float)
        ix0 = math.floor((p[0] - radius) / self.cx)
        ix1 = math.floor((p[0] + radius) / self.cx)
        iy0 = math.floor((p[1] - radius) / self.cy)
        iy1 = math.floor((p[1] + radius) / self.cy)
        seen: set[tuple[int, int]] = set()
        out: list[tuple[int, int]] = []
        for ix in range(ix0, ix1 + 1):
            for iy in range(iy0, iy1 + 1):
                for item in self.buckets.get((ix % self.nx, iy % self.ny), ()):
                    if item not in seen:
                        seen.add(item)
                        out.append(item)
        return out
