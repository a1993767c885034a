"""Embedded-graph data model on the flat torus.

A graph is a combinatorial map (vertices, edges, faces with half-edge
incidence) plus a polyline per edge.  Half-edge ids are 2*edge_id +
orientation bit: bit 0 runs v1 -> v2 in the stored point order, bit 1
the reverse.  Faces list their boundary half-edges cyclically with the
face on the left.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .torus import TorusDomain, lift, min_image, polyline_length, wrap

TWO_THIRDS_PI = 2.0 * math.pi / 3.0


@dataclass
class Edge:
    v1: int
    v2: int
    points: np.ndarray  # (k, 2) wrapped coordinates, k >= 2
    mult: int = 1


@dataclass
class EmbeddedGraph:
    domain: TorusDomain
    vertices: dict[int, np.ndarray] = field(default_factory=dict)
    edges: dict[int, Edge] = field(default_factory=dict)
    faces: dict[int, list[int]] = field(default_factory=dict)

    # -- half-edge helpers -------------------------------------------------

    def he_edge(self, he: int) -> int:
        return he >> 1

    def he_twin(self, he: int) -> int:
        return he ^ 1

    def he_origin(self, he: int) -> int:
        e = self.edges[he >> 1]
        return e.v1 if (he & 1) == 0 else e.v2

    def he_target(self, he: int) -> int:
        return self.he_origin(he ^ 1)

    def he_points(self, he: int) -> np.ndarray:
        pts = self.edges[he >> 1].points
        return pts if (he & 1) == 0 else pts[::-1]

    def vertex_out_halfedges(self) -> dict[int, list[int]]:
        out: dict[int, list[int]] = {v: [] for v in self.vertices}
        for eid, e in self.edges.items():
            out[e.v1].append(2 * eid)
            out[e.v2].append(2 * eid + 1)
        return out

    def he_tangent(self, he: int) -> np.ndarray:
        """Unit direction of the first polyline segment leaving origin."""
        pts = self.he_points(he)
        d = min_image(pts[1] - pts[0], self.domain)
        n = np.linalg.norm(d)
        if n == 0.0:
            raise ValueError(f"degenerate first segment on half-edge {he}")
        return d / n

    # -- measurements ------------------------------------------------------

    def edge_length(self, eid: int) -> float:
        return polyline_length(self.edges[eid].points, self.domain)

    def mean_edge_length(self) -> float:
        if not self.edges:
            raise ValueError("graph has no edges")
        return float(np.mean([self.edge_length(e) for e in self.edges]))

    def total_edge_length(self) -> float:
        return float(sum(self.edge_length(e) for e in self.edges))

    def face_boundary_points(self, fid: int) -> np.ndarray:
        """Boundary polygon of a face, lifted to a continuous chart."""
        chunks = []
        for he in self.faces[fid]:
            chunks.append(self.he_points(he)[:-1])
        loop = np.vstack(chunks)
        return lift(loop, self.domain)

    def face_area(self, fid: int) -> float:
        """Signed area (positive for CCW boundaries); nan if the face
        wraps around the torus (its lifted boundary does not close)."""
        pts = self.face_boundary_points(fid)
        closure = min_image(pts[0] - pts[-1], self.domain) + (pts[-1] - pts[0])
        # the lifted loop closes iff going back to the start is a lattice
        # translation of zero
        if np.linalg.norm(closure) > 1e-6 * self.domain.min_side():
            return math.nan
        x, y = pts[:, 0], pts[:, 1]
        xn, yn = np.roll(x, -1), np.roll(y, -1)
        return 0.5 * float(np.sum(x * yn - xn * y))

    def face_edge_count(self, fid: int) -> int:
        return len(self.faces[fid])

    def euler_characteristic(self) -> int:
        return len(self.vertices) - len(self.edges) + len(self.faces)

    def copy(self) -> "EmbeddedGraph":
        return EmbeddedGraph(
            self.domain,
            {v: p.copy() for v, p in self.vertices.items()},
            {e: Edge(ed.v1, ed.v2, ed.points.copy(), ed.mult) for e, ed in self.edges.items()},
            {f: list(hes) for f, hes in self.faces.items()},
        )


# -- face construction from the rotation system ----------------------------


def sorted_rotations(g: EmbeddedGraph) -> dict[int, list[int]]:
    """Outgoing half-edges at each vertex, sorted CCW by tangent angle."""
    rot = {}
    for v, hes in g.vertex_out_halfedges().items():
        ang = [(math.atan2(*g.he_tangent(h)[::-1]), h) for h in hes]
        ang.sort()
        rot[v] = [h for _, h in ang]
    return rot


def build_faces(g: EmbeddedGraph) -> dict[int, list[int]]:
    """Recompute faces from geometry (faces on the left, CCW cycles).

    next(h) is the half-edge before twin(h) in the CCW rotation at the
    head of h (equivalently, the CW-next one).
    """
    rot = sorted_rotations(g)
    pos = {}
    for v, hes in rot.items():
        for i, h in enumerate(hes):
            pos[h] = (v, i)
    faces: dict[int, list[int]] = {}
    seen: set[int] = set()
    fid = 0
    for eid in sorted(g.edges):
        for he in (2 * eid, 2 * eid + 1):
            if he in seen:
                continue
            cycle = []
            h = he
            while True:
                cycle.append(h)
                seen.add(h)
                v, i = pos[h ^ 1]
                h = rot[v][(i - 1) % len(rot[v])]
                if h == he:
                    break
                if h in seen:
                    raise ValueError("inconsistent rotation system")
            faces[fid] = cycle
            fid += 1
    return faces


# -- validation --------------------------------------------------------------


@dataclass
class ValidationReport:
    ok: bool
    violations: list[tuple[str, tuple, float]]

    def rules(self) -> set[str]:
        return {r for r, _, _ in self.violations}


def validate(g: EmbeddedGraph, tangent_tol: float = 1e-7,
             rebuild_faces: bool = False) -> ValidationReport:
    """Check every data-model invariant; returns all violations found."""
    v: list[tuple[str, tuple, float]] = []
    dom = g.domain
    half = 0.5 * dom.min_side()
    scale = dom.min_side()

    out = g.vertex_out_halfedges()
    for vid, hes in out.items():
        if len(hes) < 3:
            v.append(("vertex-degree", (vid,), float(len(hes))))

    for eid, e in g.edges.items():
        if e.v1 not in g.vertices or e.v2 not in g.vertices:
            v.append(("edge-endpoint-missing", (eid,), 0.0))
            continue
        pts = e.points
        if len(pts) < 2:
            v.append(("polyline-too-short", (eid,), float(len(pts))))
            continue
        d1 = np.linalg.norm(min_image(pts[0] - g.vertices[e.v1], dom))
        d2 = np.linalg.norm(min_image(pts[-1] - g.vertices[e.v2], dom))
        tol = 1e-9 * scale
        if d1 > tol:
            v.append(("endpoint-mismatch", (eid, e.v1), float(d1)))
        if d2 > tol:
            v.append(("endpoint-mismatch", (eid, e.v2), float(d2)))
        gaps = np.linalg.norm(min_image(np.diff(pts, axis=0), dom), axis=1)
        if np.any(gaps == 0.0):
            v.append(("repeated-point", (eid,), 0.0))
        if np.any(gaps >= half):
            v.append(("gap-too-wide", (eid,), float(np.max(gaps))))
        if e.mult < 1:
            v.append(("bad-multiplicity", (eid,), float(e.mult)))

    for vid, hes in out.items():
        try:
            tans = [g.he_tangent(h) for h in hes]
        except ValueError:
            continue  # reported as repeated-point above
        for i in range(len(tans)):
            for j in range(i + 1, len(tans)):
                c = abs(tans[i][0] * tans[j][1] - tans[i][1] * tans[j][0])
                dot = tans[i] @ tans[j]
                ang = math.atan2(c, dot)
                if ang <= tangent_tol:
                    v.append(("tangents-coincide", (vid, hes[i], hes[j]), ang))

    chi = g.euler_characteristic()
    if chi != 0:
        v.append(("euler", (), float(chi)))

    seen_he: dict[int, int] = {}
    for fid, cyc in g.faces.items():
        if len(cyc) < 1:
            v.append(("empty-face", (fid,), 0.0))
            continue
        for k, he in enumerate(cyc):
            if (he >> 1) not in g.edges:
                v.append(("face-bad-halfedge", (fid, he), 0.0))
                continue
            if he in seen_he:
                v.append(("halfedge-reused", (fid, he), float(seen_he[he])))
            seen_he[he] = fid
            nxt = cyc[(k + 1) % len(cyc)]
            if (nxt >> 1) in g.edges and g.he_target(he) != g.he_origin(nxt):
                v.append(("face-not-closed", (fid, he, nxt), 0.0))
    for eid in g.edges:
        for he in (2 * eid, 2 * eid + 1):
            if he not in seen_he:
                v.append(("halfedge-unused", (he,), 0.0))

    if rebuild_faces and not v:
        rebuilt = build_faces(g)
        want = {frozenset(c) for c in rebuilt.values()}
        have = {frozenset(c) for c in g.faces.values()}
        if want != have:
            v.append(("faces-disagree-with-rotation", (), float(len(want ^ have))))

    return ValidationReport(len(v) == 0, v)


@dataclass
class VertexRegularity:
    vertex: int
    degree: int
    max_angle_deviation: float


@dataclass
class RegularityReport:
    regular: bool
    max_deviation: float
    worst_vertex: int
    entries: list[VertexRegularity]


def regularity_report(g: EmbeddedGraph, angle_tol: float = 1e-3) -> RegularityReport:
    """Per-vertex Herring-condition check.

    A graph is regular when every vertex is trivalent and the gaps
    between consecutive outward tangents all sit within ``angle_tol``
    of 2*pi/3.
    """
    entries = []
    worst, worst_v = 0.0, -1
    regular = True
    for vid, hes in g.vertex_out_halfedges().items():
        angs = sorted(math.atan2(*g.he_tangent(h)[::-1]) for h in hes)
        dev = 0.0
        if len(angs) >= 2:
            gaps = [angs[i + 1] - angs[i] for i in range(len(angs) - 1)]
            gaps.append(2.0 * math.pi - (angs[-1] - angs[0]))
            dev = max(abs(gp - TWO_THIRDS_PI) for gp in gaps)
        entries.append(VertexRegularity(vid, len(hes), dev))
        if dev > worst:
            worst, worst_v = dev, vid
        if len(hes) != 3 or dev > angle_tol:
            regular = False
    return RegularityReport(regular, worst, worst_v, entries)


# -- snapshot I/O ------------------------------------------------------------


def _fmt(x: float) -> str:
    return format(float(x), ".17g")


def write_snapshot(g: EmbeddedGraph, path):
    """Line-oriented UTF-8 snapshot (.ntg); read_snapshot inverts it
    bit-exactly."""
    rep = validate(g)
    if not rep.ok:
        raise ValueError(f"refusing to write invalid graph: {rep.violations[:5]}")
    with open(path, "w", encoding="utf-8") as f:
        f.write("ntg 1\n")
        if g.domain.ly == g.domain.lx:
            f.write(f"domain {_fmt(g.domain.lx)}\n")
        else:
            f.write(f"domain {_fmt(g.domain.lx)} {_fmt(g.domain.ly)}\n")
        for vid in sorted(g.vertices):
            p = g.vertices[vid]
            f.write(f"v {vid} {_fmt(p[0])} {_fmt(p[1])}\n")
        for eid in sorted(g.edges):
            e = g.edges[eid]
            coords = " ".join(_fmt(c) for c in e.points.ravel())
            f.write(f"e {eid} {e.v1} {e.v2} {e.mult} {len(e.points)} {coords}\n")
        for fid in sorted(g.faces):
            hes = " ".join(str(h) for h in g.faces[fid])
            f.write(f"f {fid} {hes}\n")


class SnapshotError(ValueError):
    pass


def read_snapshot(path) -> EmbeddedGraph:
    with open(path, "r", encoding="utf-8") as f:
        lines = f.readlines()
    if not lines or lines[0].split() != ["ntg", "1"]:
        raise SnapshotError(f"{path}:1: missing 'ntg 1' header")

    dom = None
    vertices: dict[int, np.ndarray] = {}
    edges: dict[int, Edge] = {}
    faces: dict[int, list[int]] = {}

    def bad(ln, msg):
        return SnapshotError(f"{path}:{ln}: {msg}")

    for ln, line in enumerate(lines[1:], start=2):
        tok = line.split()
        if not tok:
            continue
        try:
            if tok[0] == "domain":
                if len(tok) == 2:
                    dom = TorusDomain(float(tok[1]))
                elif len(tok) == 3:
                    dom = TorusDomain(float(tok[1]), float(tok[2]))
                else:
                    raise bad(ln, "domain takes 1 or 2 values")
            elif tok[0] == "v":
                vertices[int(tok[1])] = np.array([float(tok[2]), float(tok[3])])
            elif tok[0] == "e":
                eid, v1, v2, mult, k = (int(t) for t in tok[1:6])
                coords = [float(t) for t in tok[6:]]
                if len(coords) != 2 * k:
                    raise bad(ln, f"edge {eid}: expected {2 * k} coordinates, got {len(coords)}")
                edges[eid] = Edge(v1, v2, np.array(coords).reshape(k, 2), mult)
            elif tok[0] == "f":
                faces[int(tok[1])] = [int(t) for t in tok[2:]]
            else:
                raise bad(ln, f"unknown record '{tok[0]}'")
        except (ValueError, IndexError) as exc:
            if isinstance(exc, SnapshotError):
                raise
            raise bad(ln, f"parse error: {exc}") from exc

    if dom is None:
        raise SnapshotError(f"{path}: missing domain record")
    g = EmbeddedGraph(dom, vertices, edges, faces)
    if g.euler_characteristic() != 0:
        raise SnapshotError(
            f"{path}: Euler characteristic {g.euler_characteristic()} != 0")
    rep = validate(g)
    if not rep.ok:
        raise SnapshotError(f"{path}: invalid snapshot: {rep.violations[:5]}")
    return g
