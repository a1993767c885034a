"""Random initial conditions: periodic Poisson-Voronoi graphs and
(perturbed) hexagonal lattices.

Periodic Voronoi diagrams are computed by tiling the point set 3x3,
triangulating, and identifying Delaunay triangles (= Voronoi vertices)
across periodic copies.  Each triangle class is represented by the copy
whose circumcenter lies in the fundamental domain.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.spatial import Delaunay, QhullError

from .graph import Edge, EmbeddedGraph, build_faces, validate
from .torus import TorusDomain, circumcenters, min_image, resample_polyline, wrap

SAMPLES_PER_EDGE = 8  # target mean polyline resolution: h = mean_edge / 8


class GeneratorError(RuntimeError):
    pass


@dataclass
class GeneratorConfig:
    kind: str  # "poisson_voronoi" | "perturbed_hex"
    intensity: float  # points per unit area (poisson) or lattice spacing (hex)
    perturbation_amplitude: float = 0.0  # hex only, absolute length
    seed: int = 0

    def __post_init__(self):
        if self.kind not in ("poisson_voronoi", "perturbed_hex"):
            raise ValueError(f"unknown generator kind {self.kind!r}")
        if self.intensity <= 0:
            raise ValueError("intensity/spacing must be positive")
        if self.kind == "perturbed_hex":
            if not (0.0 <= self.perturbation_amplitude < 0.5 * self.intensity):
                raise ValueError("amplitude must be in [0, spacing/2)")


def _tile(points: np.ndarray, dom: TorusDomain):
    """3x3 periodic tiling; returns coordinates, source ids and tiles."""
    n = len(points)
    offs = [(dx, dy) for dy in (-1, 0, 1) for dx in (-1, 0, 1)]
    coords = np.vstack([points + np.array([dx * dom.lx, dy * dom.ly]) for dx, dy in offs])
    orig = np.tile(np.arange(n), 9)
    tiles = np.repeat(np.array(offs, dtype=int), n, axis=0)
    return coords, orig, tiles


def _pair_key(ia, ta, ib, tb):
    """Translation-invariant key for a periodic point pair."""
    a = (int(ia), (int(ta[0]), int(ta[1])))
    b = (int(ib), (int(tb[0]), int(tb[1])))
    cands = []
    for first, second in ((a, b), (b, a)):
        sx, sy = first[1]
        cands.append((
            (first[0], (0, 0)),
            (second[0], (second[1][0] - sx, second[1][1] - sy)),
        ))
    return min(cands)


def periodic_voronoi(points: np.ndarray, dom: TorusDomain, seed: int = 0) -> EmbeddedGraph:
    """1-skeleton of the periodic Voronoi diagram of ``points``.

    Co-circular (or otherwise degenerate) inputs are retried once after a
    deterministic micro-perturbation of magnitude 1e-9 * min side.
    """
    points = wrap(np.asarray(points, dtype=float), dom)
    if len(points) < 3:
        raise GeneratorError("need at least 3 points for a periodic Voronoi diagram")
    try:
        g = _periodic_voronoi_once(points, dom)
        rep = validate(g)
        if rep.ok:
            return g
        reason = f"validation failed: {sorted(rep.rules())}"
    except (QhullError, GeneratorError, ValueError) as exc:
        reason = str(exc)
    # restore genericity deterministically and retry once
    rng = np.random.default_rng(np.random.SeedSequence([seed, 0x9E3779B9]))
    eps = 1e-9 * dom.min_side()
    jitter = rng.uniform(-eps, eps, size=points.shape)
    g = _periodic_voronoi_once(wrap(points + jitter, dom), dom)
    rep = validate(g)
    if not rep.ok:
        raise GeneratorError(
            f"degenerate point set even after micro-perturbation ({reason})")
    return g


def _periodic_voronoi_once(points: np.ndarray, dom: TorusDomain) -> EmbeddedGraph:
    n = len(points)
    coords, orig, tiles = _tile(points, dom)
    tri = Delaunay(coords)
    simp = tri.simplices
    cc, valid = circumcenters(coords[simp[:, 0]], coords[simp[:, 1]], coords[simp[:, 2]])
    sides = dom.sides
    shift = -np.floor(cc / sides).astype(int)  # tile shift into the fundamental domain
    central = valid & (shift[:, 0] == 0) & (shift[:, 1] == 0)
    central_ids = np.flatnonzero(central)
    if len(central_ids) != 2 * n:
        # a periodic triangulation of n generic points has exactly 2n triangles
        raise GeneratorError(
            f"expected {2 * n} central triangles, found {len(central_ids)}")
    rmax = np.max(np.linalg.norm(cc[central_ids] - coords[simp[central_ids, 0]], axis=1))
    if rmax >= 0.5 * dom.min_side():
        raise GeneratorError("point set too sparse: circumradius >= half the domain")

    def tri_key(t: int):
        s = shift[t]
        return tuple(sorted(
            (int(orig[p]), (int(tiles[p][0] + s[0]), int(tiles[p][1] + s[1])))
            for p in simp[t]))

    # Voronoi vertices: one per central triangle, ids in canonical-key order
    keys = {t: tri_key(t) for t in central_ids}
    order = sorted(central_ids, key=lambda t: keys[t])
    vid_of_key = {keys[t]: i for i, t in enumerate(order)}
    vpos_raw = {vid_of_key[keys[t]]: cc[t] for t in central_ids}

    # Voronoi edges: dual to periodic Delaunay edges
    raw_edges: dict[tuple, tuple[int, np.ndarray, np.ndarray]] = {}
    for t in central_ids:
        for k in range(3):
            t2 = tri.neighbors[t, k]
            if t2 == -1:
                raise GeneratorError("open triangulation near the fundamental domain")
            if not valid[t2]:
                raise GeneratorError("degenerate neighboring triangle")
            pa, pb = [p for j, p in enumerate(simp[t]) if j != k]
            key = _pair_key(orig[pa], tiles[pa], orig[pb], tiles[pb])
            if key in raw_edges:
                continue
            k2 = tri_key(t2)
            if k2 not in vid_of_key:
                raise GeneratorError("neighbor triangle has no canonical copy")
            raw_edges[key] = (vid_of_key[keys[t]], vid_of_key[k2], cc[t], cc[t2])

    vertices = {v: wrap(p, dom) for v, p in vpos_raw.items()}
    lengths = [np.linalg.norm(p1 - p0) for _, _, p0, p1 in raw_edges.values()]
    if min(lengths) < 1e-7 * dom.min_side():
        raise GeneratorError("near-degenerate Voronoi edge (co-circular quadruple)")
    h = np.mean(lengths) / SAMPLES_PER_EDGE

    edges: dict[int, Edge] = {}
    for eid, key in enumerate(sorted(raw_edges)):
        v1, v2, p0, p1 = raw_edges[key]
        npts = max(2, math.ceil(np.linalg.norm(p1 - p0) / h) + 1)
        seg = resample_polyline(np.vstack([p0, p1]), npts)
        pts = wrap(seg, dom)
        pts[0] = vertices[v1]
        pts[-1] = vertices[v2]
        edges[eid] = Edge(v1, v2, pts)

    g = EmbeddedGraph(dom, vertices, edges, {})
    g.faces = build_faces(g)
    if len(g.faces) != n:
        raise GeneratorError(f"expected {n} faces, built {len(g.faces)}")
    return g


def poisson_voronoi(dom: TorusDomain, intensity: float, seed: int,
                    on_few: str = "error") -> EmbeddedGraph:
    """Voronoi diagram of a Poisson point process on the torus."""
    if intensity * dom.area < 3:
        raise GeneratorError("expected point count must be at least 3")
    rng = np.random.default_rng(seed)
    for _ in range(100):
        count = rng.poisson(intensity * dom.area)
        if count >= 3:
            break
        if on_few == "error":
            raise GeneratorError(f"sampled only {count} points")
    else:
        raise GeneratorError("could not sample at least 3 points")
    pts = np.column_stack([
        rng.uniform(0.0, dom.lx, size=count),
        rng.uniform(0.0, dom.ly, size=count),
    ])
    return periodic_voronoi(pts, dom, seed=seed)


def hex_lattice_sites(dom: TorusDomain, spacing: float):
    """Torus-compatible triangular-lattice sites.

    Column and (even) row counts are rounded to fit the domain exactly;
    returns (sites, achieved x-spacing, achieved row spacing).
    """
    ncols = max(3, round(dom.lx / spacing))
    nrows = max(4, 2 * round(dom.ly / (spacing * math.sqrt(3.0))))
    ax = dom.lx / ncols
    dy = dom.ly / nrows
    cols = np.arange(ncols)
    rows = np.arange(nrows)
    x = (cols[None, :] + 0.5 * (rows[:, None] % 2)) * ax
    y = np.broadcast_to(rows[:, None] * dy, x.shape)
    sites = np.column_stack([x.ravel(), y.ravel()])
    return sites, ax, dy


def _honeycomb(dom: TorusDomain, ncols: int, nrows: int) -> EmbeddedGraph:
    """Honeycomb dual of an ncols x nrows triangular lattice, built
    directly on integer coordinate quanta so opposite tangents cancel to
    the ulp (the Voronoi route would leave ~1e-8 circumcenter noise).
    """
    qx = dom.lx / ncols / 2.0  # half the site x-spacing
    qy = dom.ly / nrows / 3.0  # a third of the site row spacing

    def up(i, j):
        return i % ncols, j % nrows, 0

    def down(i, j):
        return i % ncols, j % nrows, 1

    ids = {}
    vertices = {}
    for j in range(nrows):
        for i in range(ncols):
            for kind in (0, 1):
                vid = len(ids)
                ids[(i, j, kind)] = vid
                if kind == 0:
                    k = (2 * i + 1 + (j & 1), 3 * j + 1)
                else:
                    k = (2 * i + 2 - (j & 1), 3 * j + 2)
                vertices[vid] = wrap(np.array([k[0] * qx, k[1] * qy]), dom)

    npts = SAMPLES_PER_EDGE + 1  # h = edge_length / 8
    edges = {}
    eid = 0
    for j in range(nrows):
        for i in range(ncols):
            u = ids[up(i, j)]
            for nb in (down(i + (j & 1), j), down(i - 1 + (j & 1), j), down(i, j - 1)):
                d = ids[nb]
                p0 = vertices[u]
                p1 = p0 + min_image(vertices[d] - p0, dom)
                pts = wrap(resample_polyline(np.vstack([p0, p1]), npts), dom)
                pts[0] = vertices[u]
                pts[-1] = vertices[d]
                edges[eid] = Edge(u, d, pts)
                eid += 1

    g = EmbeddedGraph(dom, vertices, edges, {})
    g.faces = build_faces(g)
    if len(g.faces) != ncols * nrows:
        raise GeneratorError("honeycomb construction produced a bad face count")
    return g


def perturbed_hex(dom: TorusDomain, spacing: float, amplitude: float,
                  seed: int) -> EmbeddedGraph:
    """Voronoi diagram of a triangular lattice with vertices displaced
    uniformly in a disk of radius ``amplitude``.  Zero amplitude returns
    the exact honeycomb."""
    if not (0.0 <= amplitude < 0.5 * spacing):
        raise ValueError("amplitude must be in [0, spacing/2)")
    sites, ax, dy = hex_lattice_sites(dom, spacing)
    if abs(ax - spacing) > 0.25 * spacing or abs(2 * dy / math.sqrt(3) - spacing) > 0.25 * spacing:
        raise GeneratorError(
            f"domain incompatible with spacing {spacing}: achieved ({ax:.4g}, {2 * dy / math.sqrt(3):.4g})")
    ncols = max(3, round(dom.lx / spacing))
    nrows = max(4, 2 * round(dom.ly / (spacing * math.sqrt(3.0))))
    if amplitude == 0.0:
        return _honeycomb(dom, ncols, nrows)
    rng = np.random.default_rng(seed)
    theta = rng.uniform(0.0, 2.0 * math.pi, size=len(sites))
    rad = amplitude * np.sqrt(rng.uniform(0.0, 1.0, size=len(sites)))
    sites = sites + np.column_stack([rad * np.cos(theta), rad * np.sin(theta)])
    return periodic_voronoi(sites, dom, seed=seed)


def hexagonal_lattice(cells_x: int, cells_y: int, edge_length: float = 1.0) -> EmbeddedGraph:
    """Exact regular hexagonal lattice (a stationary state of the flow).

    The domain is rectangular so that the lattice periods fit exactly:
    lx = cells_x * sqrt(3) * a, ly = cells_y * 1.5 * a for hexagon edge a.
    """
    if cells_y % 2 != 0:
        raise ValueError("cells_y must be even for periodicity")
    a = edge_length
    spacing = a * math.sqrt(3.0)  # dual triangular-lattice spacing
    dom = TorusDomain(cells_x * spacing, cells_y * 1.5 * a)
    return _honeycomb(dom, cells_x, cells_y)


def domain_for_edge_target(kind: str, n_edges: int) -> tuple[TorusDomain, float]:
    """Square-ish domain such that the generated graph has about
    ``n_edges`` edges with mean edge length about 1.

    Returns (domain, intensity-or-spacing).  A trivalent tessellation has
    three edges per face, and a unit-intensity Poisson-Voronoi diagram
    has mean edge length 2/3; intensity 4/9 rescales that to 1.
    """
    n_faces = max(3, n_edges // 3)
    if kind == "poisson_voronoi":
        lam = 4.0 / 9.0
        side = math.sqrt(n_faces / lam)
        return TorusDomain(side), lam
    if kind == "perturbed_hex":
        spacing = math.sqrt(3.0)  # unit hexagon edges
        ncols = max(3, round(math.sqrt(n_faces * math.sqrt(3.0) / 2.0)))
        nrows = max(4, 2 * round(n_faces / (2 * ncols)))
        dom = TorusDomain(ncols * spacing, nrows * spacing * math.sqrt(3.0) / 2.0)
        return dom, spacing
    raise ValueError(f"unknown generator kind {kind!r}")


def generate(cfg: GeneratorConfig, dom: TorusDomain) -> EmbeddedGraph:
    if cfg.kind == "poisson_voronoi":
        return poisson_voronoi(dom, cfg.intensity, cfg.seed)
    return perturbed_hex(dom, cfg.intensity, cfg.perturbation_amplitude, cfg.seed)
