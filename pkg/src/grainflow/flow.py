"""Front-tracking integrator for curvature flow on trivalent networks.

Interior polyline samples move by kappa*n estimated from the circumcircle
of each point with its neighbors; vertices are relaxed toward the local
Fermat point of their three adjacent samples, which enforces the 2*pi/3
angle condition at the discretization scale.  Singular events are handled
by three surgeries: neighbor-switching edge collapse, triangle collapse,
and collapse of transient 2-gons.

Point storage is a single packed (n, 2) array with one contiguous slice
per edge, so the motion phase is fully vectorized; surgery mutates the
edge/face tables and marks the derived index caches dirty.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field, replace

import numpy as np
from scipy.spatial import cKDTree

from .graph import Edge, EmbeddedGraph, regularity_report, validate
from .torus import TorusDomain, circumcenters, min_image, resample_polyline, wrap

VNM_RATE = math.pi / 3.0  # dA/dt per (n - 6), mobility * surface tension = 1


class IntegratorError(RuntimeError):
    def __init__(self, msg, cells=()):
        super().__init__(msg)
        self.cells = tuple(cells)


@dataclass
class FlowConfig:
    dt_safety: float = 0.5
    resample_h: float = 0.125
    collapse_length: float = 0.3125
    collapse_area: float = 0.3125 ** 2
    max_steps: int = 10 ** 9
    stop_edge_count: int = 0
    adaptive_resample: bool = True  # retarget h to mean_edge/8 as the net coarsens
    relax_steps: int = 20  # pre-steps at dt/10, surgery off, for non-regular input
    velocity_cap: float = 0.3  # max point displacement per step, in units of h
    check_intersections: bool = True  # at snapshot times
    stats_every: int = 25
    record_faces: bool = False

    def __post_init__(self):
        if min(self.resample_h, self.collapse_length, self.collapse_area) <= 0:
            raise ValueError("thresholds must be positive")
        if self.collapse_length < 2.0 * self.resample_h:
            raise ValueError("collapse_length must be >= 2 * resample_h")
        if not (0.0 < self.dt_safety <= 1.0):
            raise ValueError("dt_safety must be in (0, 1]")

    @staticmethod
    def for_graph(g: EmbeddedGraph, samples_per_edge: int = 8, **overrides) -> "FlowConfig":
        h = g.mean_edge_length() / samples_per_edge
        kw = dict(resample_h=h, collapse_length=2.5 * h, collapse_area=(2.5 * h) ** 2)
        kw.update(overrides)
        return FlowConfig(**kw)


@dataclass
class StatsRecord:
    time: float
    step: int
    edge_count: int
    face_count: int
    mean_edge_length: float
    faces: dict[int, tuple[float, int]] | None  # fid -> (area, boundary edges)
    touched_since_prev: set[int]


@dataclass
class Trajectory:
    records: list[StatsRecord] = field(default_factory=list)
    snapshots: list[tuple[float, int, EmbeddedGraph]] = field(default_factory=list)
    events: list[tuple[float, str, tuple]] = field(default_factory=list)
    final: EmbeddedGraph | None = None
    aborted: bool = False
    abort_reason: str = ""


# ---------------------------------------------------------------------------


class FlowState:
    """Packed mutable state of one simulation."""

    def __init__(self, g: EmbeddedGraph, cfg: FlowConfig):
        self.cfg = cfg
        self.dom = g.domain
        for eid, e in g.edges.items():
            if e.mult != 1:
                raise IntegratorError(f"edge {eid} has multiplicity {e.mult}", (eid,))
        out = g.vertex_out_halfedges()
        for vid, hes in out.items():
            if len(hes) != 3:
                raise IntegratorError(f"vertex {vid} has degree {len(hes)}", (vid,))

        vids = sorted(g.vertices)
        eids = sorted(g.edges)
        self._vslot = {v: i for i, v in enumerate(vids)}
        self._eslot = {e: i for i, e in enumerate(eids)}

        nv, ne = len(vids), len(eids)
        self.v_alive = np.ones(nv, dtype=bool)
        self.v_pos = np.array([g.vertices[v] for v in vids], dtype=float)
        self.v_edges = np.zeros((nv, 3), dtype=np.int64)
        self.v_end = np.zeros((nv, 3), dtype=np.int64)
        slot_fill = np.zeros(nv, dtype=int)
        self.e_alive = np.ones(ne, dtype=bool)
        self.e_v1 = np.zeros(ne, dtype=np.int64)
        self.e_v2 = np.zeros(ne, dtype=np.int64)
        self.e_start = np.zeros(ne, dtype=np.int64)
        self.e_npts = np.zeros(ne, dtype=np.int64)

        total = sum(len(g.edges[e].points) for e in eids)
        cap = max(1024, int(total * 1.6))
        self.P = np.zeros((cap, 2), dtype=float)
        self.used = 0
        for eid in eids:
            s = self._eslot[eid]
            e = g.edges[eid]
            k = len(e.points)
            self.e_v1[s] = self._vslot[e.v1]
            self.e_v2[s] = self._vslot[e.v2]
            self.e_start[s] = self.used
            self.e_npts[s] = k
            self.P[self.used:self.used + k] = wrap(e.points, self.dom)
            self.used += k
            for vs, end in ((self.e_v1[s], 0), (self.e_v2[s], 1)):
                i = slot_fill[vs]
                self.v_edges[vs, i] = s
                self.v_end[vs, i] = end
                slot_fill[vs] += 1
        if np.any(slot_fill[self.v_alive] != 3):
            raise IntegratorError("inconsistent incidence")

        self.f_hes: dict[int, list[int]] = {}
        self.he_face: dict[int, int] = {}
        for fid, cyc in g.faces.items():
            hes = [2 * self._eslot[h >> 1] + (h & 1) for h in cyc]
            self.f_hes[fid] = hes
            for h in hes:
                self.he_face[h] = fid
        self._next_fid = max(self.f_hes, default=-1) + 1

        self.time = 0.0
        self.steps = 0
        self.touched: set[int] = set()
        self.events: list[tuple[float, str, tuple]] = []
        self.surgery_on = True
        self._dirty = True
        self._last_dt = 0.0
        # edge lengths one step ago; nan = no history (fresh or rewired
        # edges are immune to collapse until they are seen shrinking)
        self._prev_len = np.full(ne, np.nan)
        self._t1_ban: set[int] = set()

    # -- bookkeeping --------------------------------------------------------

    def edge_count(self) -> int:
        return int(np.count_nonzero(self.e_alive))

    def face_count(self) -> int:
        return len(self.f_hes)

    def _alloc(self, k: int) -> int:
        if self.used + k > len(self.P):
            self._compact(extra=k)
        s = self.used
        self.used += k
        return s

    def _compact(self, extra: int = 0):
        alive = np.flatnonzero(self.e_alive)
        counts = self.e_npts[alive]
        total = int(counts.sum())
        cap = max(1024, int((total + extra) * 1.8))
        newP = np.zeros((cap, 2), dtype=float)
        pos = 0
        for s in alive:
            k = int(self.e_npts[s])
            newP[pos:pos + k] = self.P[self.e_start[s]:self.e_start[s] + k]
            self.e_start[s] = pos
            pos += k
        self.P = newP
        self.used = pos
        self._dirty = True

    def _rebuild(self):
        """Derived index caches: interior triples, segments, face loops,
        vertex anchors."""
        alive = np.flatnonzero(self.e_alive)
        starts = self.e_start[alive]
        counts = self.e_npts[alive]
        total = int(counts.sum())
        base = np.repeat(starts, counts)
        csum = np.cumsum(counts)
        within = np.arange(total) - np.repeat(csum - counts, counts)
        flat = base + within
        last = within == np.repeat(counts - 1, counts)
        self._seg_a = flat[~last]
        self._seg_edge_off = np.concatenate([[0], np.cumsum(counts - 1)[:-1]])
        self._seg_alive = alive
        interior = (within >= 1) & (within <= np.repeat(counts - 2, counts))
        self._ii = flat[interior]

        va = np.flatnonzero(self.v_alive)
        e = self.v_edges[va]
        end = self.v_end[va]
        st = self.e_start[e]
        npts = self.e_npts[e]
        self._anchor_idx = np.where(end == 0, st + 1, st + npts - 2)
        self._endpoint_idx = np.where(end == 0, st, st + npts - 1)
        self._va = va

        # face boundary point indices (each half-edge contributes its
        # points minus the last, in traversal order)
        fids = sorted(self.f_hes)
        he_flat = []
        he_fid = []
        for fid in fids:
            he_flat.extend(self.f_hes[fid])
            he_fid.append(len(self.f_hes[fid]))
        he_flat = np.array(he_flat, dtype=np.int64) if he_flat else np.zeros(0, dtype=np.int64)
        eidx = he_flat >> 1
        bit = he_flat & 1
        n = self.e_npts[eidx]
        st = self.e_start[eidx]
        lens = n - 1
        basep = np.where(bit == 0, st, st + n - 1)
        step = np.where(bit == 0, 1, -1)
        tot = int(lens.sum())
        rep_base = np.repeat(basep, lens)
        rep_step = np.repeat(step, lens)
        cl = np.cumsum(lens)
        off_in = np.arange(tot) - np.repeat(cl - lens, lens)
        self._f_idx = rep_base + rep_step * off_in
        he_per_face = np.array(he_fid, dtype=np.int64) if he_fid else np.zeros(0, dtype=np.int64)
        pts_per_he = lens
        # points per face = sum over its half-edges
        fb = np.zeros(len(fids), dtype=np.int64)
        if len(fids):
            face_of_he = np.repeat(np.arange(len(fids)), he_per_face)
            np.add.at(fb, face_of_he, pts_per_he)
        self._f_counts = fb
        self._f_off = np.concatenate([[0], np.cumsum(fb)[:-1]]) if len(fids) else np.zeros(0, dtype=np.int64)
        self._f_ids = fids
        self._dirty = False

    def _ensure(self):
        if self._dirty:
            self._rebuild()

    # -- vectorized measurements --------------------------------------------

    def edge_lengths(self):
        """(alive edge slots, lengths) using the segment cache."""
        self._ensure()
        d = min_image(self.P[self._seg_a + 1] - self.P[self._seg_a], self.dom)
        seg = np.hypot(d[:, 0], d[:, 1])
        if len(self._seg_edge_off) == 0:
            return self._seg_alive, np.zeros(0)
        return self._seg_alive, np.add.reduceat(seg, self._seg_edge_off)

    def mean_edge_length(self) -> float:
        _, ln = self.edge_lengths()
        return float(ln.mean())

    def face_areas(self):
        """(face ids, signed areas, edge counts); nan for wrapping faces."""
        self._ensure()
        if not len(self._f_ids):
            return [], np.zeros(0), np.zeros(0, dtype=int)
        q = self.P[self._f_idx]
        nxt = np.empty_like(self._f_idx)
        ends = self._f_off + self._f_counts
        nxt[:-1] = self._f_idx[1:]
        nxt[ends - 1] = self._f_idx[self._f_off]
        d = min_image(self.P[nxt] - q, self.dom)
        # exclusive per-face cumulative sums of d
        cx = np.cumsum(d[:, 0])
        cy = np.cumsum(d[:, 1])
        c0x = np.concatenate([[0.0], cx[:-1]])
        c0y = np.concatenate([[0.0], cy[:-1]])
        offx = np.repeat(c0x[self._f_off], self._f_counts)
        offy = np.repeat(c0y[self._f_off], self._f_counts)
        Cx, Cy = c0x - offx, c0y - offy
        cross = Cx * d[:, 1] - Cy * d[:, 0]
        areas = 0.5 * np.add.reduceat(cross, self._f_off)
        closex = np.add.reduceat(d[:, 0], self._f_off)
        closey = np.add.reduceat(d[:, 1], self._f_off)
        bad = np.hypot(closex, closey) > 1e-6 * self.dom.min_side()
        areas = np.where(bad, np.nan, areas)
        ncounts = np.array([len(self.f_hes[f]) for f in self._f_ids], dtype=int)
        return self._f_ids, areas, ncounts

    def _face_area_scalar(self, fid: int) -> float:
        pts = []
        for he in self.f_hes[fid]:
            s = he >> 1
            sl = self.P[self.e_start[s]:self.e_start[s] + self.e_npts[s]]
            pts.append(sl[:-1] if (he & 1) == 0 else sl[::-1][:-1])
        q = np.vstack(pts)
        d = min_image(np.roll(q, -1, axis=0) - q, self.dom)
        C = np.cumsum(d, axis=0)
        C = np.vstack([[0.0, 0.0], C[:-1]])
        return 0.5 * float(np.sum(C[:, 0] * d[:, 1] - C[:, 1] * d[:, 0]))

    # -- one explicit step ---------------------------------------------------

    def step(self) -> float:
        self._ensure()
        cfg = self.cfg
        h = cfg.resample_h
        dt = cfg.dt_safety * h * h / 2.0

        # curvature motion of interior samples
        ii = self._ii
        if len(ii):
            b = self.P[ii]
            a = b + min_image(self.P[ii - 1] - b, self.dom)
            c = b + min_image(self.P[ii + 1] - b, self.dom)
            o, ok = circumcenters(a, b, c)
            d = o - b
            r2 = d[:, 0] ** 2 + d[:, 1] ** 2
            r2 = np.where(ok & (r2 > 0), r2, 1.0)
            vel = np.where((ok & (r2 > 0))[:, None], d / r2[:, None], 0.0)
            vmax = float(np.max(np.hypot(vel[:, 0], vel[:, 1]))) if len(vel) else 0.0
            if vmax * dt > cfg.velocity_cap * h:
                dt = cfg.velocity_cap * h / vmax
            if self._relaxing:
                dt /= 10.0
            self.P[ii] = wrap(b + vel * dt, self.dom)
        elif self._relaxing:
            dt /= 10.0

        self._relax_vertices(dt)
        self._resample_pass()
        if self.surgery_on and not self._relaxing:
            self._surgery_pass()
        alive, lens = self.edge_lengths()
        self._prev_len[alive] = lens
        self.time += dt
        self.steps += 1
        self._last_dt = dt
        return dt

    _relaxing = False

    def _relax_vertices(self, dt: float):
        """Move vertices toward the Fermat point of their three adjacent
        samples (Weiszfeld iteration, displacement-capped)."""
        self._ensure()
        x0 = self.v_pos[self._va]
        A = self.P[self._anchor_idx]  # (k, 3, 2)
        A = x0[:, None, :] + min_image(A - x0[:, None, :], self.dom)
        diff = A - x0[:, None, :]
        d0 = np.maximum(np.linalg.norm(diff, axis=2), 1e-300)
        F = (diff / d0[:, :, None]).sum(axis=1)
        act = np.hypot(F[:, 0], F[:, 1]) > 1e-12
        if not np.any(act):
            return
        x = x0[act].copy()
        Aa = A[act]
        for _ in range(8):
            diff = Aa - x[:, None, :]
            dd = np.maximum(np.linalg.norm(diff, axis=2), 1e-30)
            w = 1.0 / dd
            x = (Aa * w[:, :, None]).sum(axis=1) / w.sum(axis=1)[:, None]
        dx = x - x0[act]
        cap = np.minimum(self.cfg.resample_h, 0.3 * d0[act].min(axis=1))
        nrm = np.hypot(dx[:, 0], dx[:, 1])
        scale = np.where(nrm > cap, cap / np.maximum(nrm, 1e-300), 1.0)
        xnew = wrap(x0[act] + dx * scale[:, None], self.dom)
        self.v_pos[self._va[act]] = xnew
        # sync the three polyline endpoint copies
        ep = self._endpoint_idx[act]
        self.P[ep[:, 0]] = xnew
        self.P[ep[:, 1]] = xnew
        self.P[ep[:, 2]] = xnew

    def _resample_pass(self):
        self._ensure()
        h = self.cfg.resample_h
        d = min_image(self.P[self._seg_a + 1] - self.P[self._seg_a], self.dom)
        seg = np.hypot(d[:, 0], d[:, 1])
        if len(self._seg_edge_off) == 0:
            return
        mn = np.minimum.reduceat(seg, self._seg_edge_off)
        mx = np.maximum.reduceat(seg, self._seg_edge_off)
        need = np.flatnonzero((mn < 0.6 * h) | (mx > 1.6 * h))
        for k in need:
            self._resample_edge(int(self._seg_alive[k]))

    def _resample_edge(self, s: int):
        h = self.cfg.resample_h
        st, k = int(self.e_start[s]), int(self.e_npts[s])
        pts = self.P[st:st + k].copy()
        lifted = np.vstack([pts[0], pts[0] + np.cumsum(min_image(np.diff(pts, axis=0), self.dom), axis=0)])
        length = float(np.sum(np.linalg.norm(np.diff(lifted, axis=0), axis=1)))
        npts = max(2, int(round(length / h)) + 1)
        new = resample_polyline(lifted, npts)
        ns = self._alloc(npts)
        self.P[ns:ns + npts] = wrap(new, self.dom)
        self.P[ns] = self.v_pos[self.e_v1[s]]
        self.P[ns + npts - 1] = self.v_pos[self.e_v2[s]]
        self.e_start[s] = ns
        self.e_npts[s] = npts
        self._dirty = True

    # -- surgery --------------------------------------------------------------

    def _surgery_pass(self):
        cfg = self.cfg
        fids, areas, ncnt = self.face_areas()
        did = False

        order = np.argsort(areas, kind="stable")
        for k in order:
            fid = fids[k]
            if math.isnan(areas[k]) or areas[k] >= cfg.collapse_area:
                break
            if fid not in self.f_hes:
                continue
            n = len(self.f_hes[fid])
            area = self._face_area_scalar(fid)
            if area >= cfg.collapse_area:
                continue
            if n == 3:
                self.collapse_triangle(fid)
                did = True
            elif n == 2:
                self.collapse_bigon(fid)
                did = True
            else:
                # not one of the implemented singular events: abort only
                # if no edge of the face can collapse first
                elens = [self._edge_length_scalar(h >> 1) for h in self.f_hes[fid]]
                if min(elens) >= cfg.collapse_length:
                    raise IntegratorError(
                        f"face {fid} (n={n}) shrank below threshold with no "
                        "collapsible edge", (fid,))

        if did:
            self._ensure()
        alive, lens = self.edge_lengths()
        order = np.argsort(lens, kind="stable")
        for k in order:
            if lens[k] >= cfg.collapse_length:
                break
            s = int(alive[k])
            if not self.e_alive[s]:
                continue
            cur = self._edge_length_scalar(s)
            if cur >= cfg.collapse_length:
                continue
            # only collapse edges that are actively shrinking; stable
            # short edges would otherwise flip back and forth forever
            if not (cur < self._prev_len[s] * (1.0 - 1e-12)):
                continue
            fX = self.he_face[2 * s]
            fY = self.he_face[2 * s + 1]
            if len(self.f_hes[fX]) <= 3 or len(self.f_hes[fY]) <= 3:
                continue  # deferred to face collapse
            # neighbor switch only where the switched pairing opens the
            # junction wider than keeping it (Herring line tensions);
            # a freshly switched edge must regrow before switching back
            forced = cur < 0.3 * cfg.resample_h
            if s in self._t1_ban:
                if self._edge_length_scalar(s) > 1.3 * cfg.collapse_length:
                    self._t1_ban.discard(s)
                elif not forced:
                    continue
            if not forced and self._t1_benefit(s) <= 1e-9:
                continue
            self.collapse_edge(s)
            self._t1_ban.add(s)
            did = True

        if did:
            self._check_consistency()

    def _edge_length_scalar(self, s: int) -> float:
        st, k = int(self.e_start[s]), int(self.e_npts[s])
        d = min_image(np.diff(self.P[st:st + k], axis=0), self.dom)
        return float(np.sum(np.hypot(d[:, 0], d[:, 1])))

    def _out_dir(self, he: int) -> np.ndarray:
        s, bit = he >> 1, he & 1
        st, k = int(self.e_start[s]), int(self.e_npts[s])
        p0 = self.P[st] if bit == 0 else self.P[st + k - 1]
        p1 = self.P[st + 1] if bit == 0 else self.P[st + k - 2]
        d = min_image(p1 - p0, self.dom)
        return d / max(np.linalg.norm(d), 1e-300)

    def _t1_frame(self, s: int):
        """Local data of a potential T1: the four outer half-edges and
        the split direction."""
        hF, hB = 2 * s, 2 * s + 1
        X, Y = self.he_face[hF], self.he_face[hB]
        cx = self.f_hes[X]
        i = cx.index(hF)
        a_in, d_out = cx[i - 1], cx[(i + 1) % len(cx)]
        cy = self.f_hes[Y]
        j = cy.index(hB)
        c_in, b_out = cy[j - 1], cy[(j + 1) % len(cy)]
        U, V = int(self.e_v1[s]), int(self.e_v2[s])
        pu = self.v_pos[U]
        ev = min_image(self.v_pos[V] - pu, self.dom)
        nrm = np.linalg.norm(ev)
        ehat = ev / max(nrm, 1e-300)
        perp = np.array([-ehat[1], ehat[0]])
        da = self._out_dir(a_in ^ 1)
        db = self._out_dir(b_out)
        dc = self._out_dir(c_in ^ 1)
        dd = self._out_dir(d_out)
        sgn = float(np.sign((da + dd) @ perp)) or 1.0
        w = sgn * perp
        return X, Y, a_in, b_out, c_in, d_out, da, db, dc, dd, ehat, w

    def _t1_benefit(self, s: int) -> float:
        """Growth rate of the switched pairing minus that of the current
        one.  Both rates follow from the Herring line tensions: a vertex
        with outward unit tangents p, q, r moves along p + q + r, so the
        connecting edge of a pairing stretches at (sum of the four outer
        tangents, signed) minus 2.  A positive difference means the
        neighbor switch opens the junction wider than leaving it alone.
        """
        (_, _, _, _, _, _, da, db, dc, dd, ehat, w) = self._t1_frame(s)
        g_switch = float((da + dd - db - dc) @ w) - 2.0
        g_keep = float(-(da + db - dc - dd) @ ehat) - 2.0
        return g_switch - g_keep

    def _vertex_replace_edge(self, vs: int, old: int, new: int, end: int):
        for i in range(3):
            if self.v_edges[vs, i] == old:
                self.v_edges[vs, i] = new
                self.v_end[vs, i] = end
                return
        raise IntegratorError(f"vertex {vs} not incident to edge {old}")

    def _move_endpoint(self, s: int, end: int, new_pos: np.ndarray):
        """Displace one polyline endpoint, tapering the displacement
        along the arc so surgery jumps cannot fold the polyline back on
        itself."""
        st, k = int(self.e_start[s]), int(self.e_npts[s])
        pts = self.P[st:st + k]
        lifted = np.vstack([pts[0], pts[0] + np.cumsum(
            min_image(np.diff(pts, axis=0), self.dom), axis=0)])
        idx = 0 if end == 0 else k - 1
        delta = min_image(np.asarray(new_pos, dtype=float) - pts[idx], self.dom)
        seg = np.linalg.norm(np.diff(lifted, axis=0), axis=1)
        arc = np.concatenate([[0.0], np.cumsum(seg)])
        total = arc[-1]
        if total == 0.0:
            w = np.ones(k)
        else:
            w = 1.0 - arc / total if end == 0 else arc / total
        moved = lifted + delta[None, :] * w[:, None]
        out = wrap(moved, self.dom)
        out[idx] = wrap(np.asarray(new_pos, dtype=float), self.dom)
        self.P[st:st + k] = out

    def _reattach(self, s: int, old_v: int, new_v: int):
        """Move one endpoint of edge s from vertex old_v to new_v."""
        if self.e_v1[s] == old_v:
            self.e_v1[s] = new_v
            end = 0
        elif self.e_v2[s] == old_v:
            self.e_v2[s] = new_v
            end = 1
        else:
            raise IntegratorError(f"edge {s} not attached to vertex {old_v}")
        self._move_endpoint(s, end, self.v_pos[new_v])
        self._vertex_replace_edge(new_v, -1, s, end)

    def _vertex_drop_edge(self, vs: int, s: int):
        for i in range(3):
            if self.v_edges[vs, i] == s:
                self.v_edges[vs, i] = -1
                return
        raise IntegratorError(f"vertex {vs} not incident to edge {s}")

    def _set_edge_points(self, s: int, lifted: np.ndarray):
        h = self.cfg.resample_h
        length = float(np.sum(np.linalg.norm(np.diff(lifted, axis=0), axis=1)))
        npts = max(2, int(round(length / h)) + 1)
        new = resample_polyline(lifted, npts)
        ns = self._alloc(npts)
        self.P[ns:ns + npts] = wrap(new, self.dom)
        self.e_start[s] = ns
        self.e_npts[s] = npts
        self.P[ns] = self.v_pos[self.e_v1[s]]
        self.P[ns + npts - 1] = self.v_pos[self.e_v2[s]]

    def _he_into(self, fid: int, vs: int) -> int:
        """Half-edge of face fid whose target is vertex vs."""
        for he in self.f_hes[fid]:
            s, bit = he >> 1, he & 1
            tgt = self.e_v2[s] if bit == 0 else self.e_v1[s]
            if tgt == vs:
                return he
        raise IntegratorError(f"face {fid} does not reach vertex {vs}")

    def collapse_edge(self, s: int):
        """Neighbor-switching (T1) collapse of a short edge."""
        U, V = int(self.e_v1[s]), int(self.e_v2[s])
        hF, hB = 2 * s, 2 * s + 1
        X, Y = self.he_face[hF], self.he_face[hB]
        if X == Y or len(self.f_hes[X]) <= 3 or len(self.f_hes[Y]) <= 3:
            raise IntegratorError(f"edge {s} not collapsible (faces {X},{Y})", (s,))

        (X, Y, a_in, b_out, c_in, d_out, _, _, _, _, _, w) = self._t1_frame(s)
        cx, cy = self.f_hes[X], self.f_hes[Y]
        e_a, e_b, e_c, e_d = a_in >> 1, b_out >> 1, c_in >> 1, d_out >> 1
        if len({s, e_a, e_b, e_c, e_d}) != 5:
            raise IntegratorError(f"degenerate T1 neighborhood at edge {s}", (s,))
        A = self.he_face[a_in ^ 1]
        B = self.he_face[c_in ^ 1]

        pu = self.v_pos[U]
        pv = pu + min_image(self.v_pos[V] - pu, self.dom)
        m = 0.5 * (pu + pv)
        sep = 0.55 * self.cfg.collapse_length
        p_up = wrap(m + sep * w, self.dom)
        p_vp = wrap(m - sep * w, self.dom)

        # u' keeps edges (a, d), v' keeps (c, b); e reused for the new edge
        self.v_pos[U] = p_up
        self.v_pos[V] = p_vp
        self._vertex_drop_edge(U, e_b)
        self._vertex_drop_edge(V, e_d)
        self._reattach(e_d, V, U)
        self._reattach(e_b, U, V)
        for (vs, es) in ((U, e_a), (V, e_c)):
            if self.e_v1[es] == vs:
                self._move_endpoint(es, 0, self.v_pos[vs])
            if self.e_v2[es] == vs:
                self._move_endpoint(es, 1, self.v_pos[vs])

        lifted = np.vstack([p_vp, p_vp + min_image(p_up - p_vp, self.dom)])
        self.e_v1[s], self.e_v2[s] = V, U  # new edge runs v' -> u' as stored
        self._set_edge_points(s, lifted)

        cx.remove(hF)
        cy.remove(hB)
        # A gains the half-edge u' -> v' is... the stored edge runs v'->u',
        # so A (which passes v' then u') inserts the forward half-edge 2s
        ia = self.f_hes[A].index(a_in ^ 1)
        self.f_hes[A].insert(ia, hF)
        self.he_face[hF] = A
        ib = self.f_hes[B].index(c_in ^ 1)
        self.f_hes[B].insert(ib, hB)
        self.he_face[hB] = B

        self.touched.update((X, Y, A, B))
        self.events.append((self.time, "edge_collapse", (s,)))
        for es in (s, e_a, e_b, e_c, e_d):
            self._prev_len[es] = np.nan
        for es in (e_a, e_b, e_c, e_d):
            self._resample_edge(es)
        self._dirty = True

    def collapse_triangle(self, fid: int):
        cyc = self.f_hes[fid]
        if len(cyc) != 3:
            raise IntegratorError(f"face {fid} is not a triangle", (fid,))
        tri_edges = [h >> 1 for h in cyc]
        ws = [int(self.e_v1[h >> 1]) if (h & 1) == 0 else int(self.e_v2[h >> 1]) for h in cyc]
        if len(set(tri_edges)) != 3 or len(set(ws)) != 3:
            raise IntegratorError(f"degenerate triangle {fid}", (fid,))
        outer = []
        for w in ws:
            g = [int(e) for e in self.v_edges[w] if e not in tri_edges]
            if len(g) != 1:
                raise IntegratorError(f"vertex {w} not trivalent at triangle {fid}", (fid, w))
            outer.append(g[0])
        far = []
        for w, ge in zip(ws, outer):
            z = int(self.e_v2[ge]) if self.e_v1[ge] == w else int(self.e_v1[ge])
            far.append(z)
            if z in ws:
                raise IntegratorError(
                    f"triangle {fid} collapse would create a loop edge", (fid, ge))
        neighbors = [self.he_face[h ^ 1] for h in cyc]
        if fid in neighbors:
            raise IntegratorError(f"triangle {fid} borders itself", (fid,))

        # centroid of the lifted triangle polygon
        p0 = self.v_pos[ws[0]]
        lifted = [p0]
        for w in ws[1:]:
            lifted.append(p0 + min_image(self.v_pos[w] - p0, self.dom))
        wpos = wrap(np.mean(np.array(lifted), axis=0), self.dom)

        wnew = ws[0]
        self.v_pos[wnew] = wpos
        self.v_edges[wnew] = outer
        for i, (w, ge) in enumerate(zip(ws, outer)):
            end = 0 if self.e_v1[ge] == w else 1
            self.v_end[wnew, i] = end
            if w != wnew:
                if end == 0:
                    self.e_v1[ge] = wnew
                else:
                    self.e_v2[ge] = wnew
            self._move_endpoint(ge, end, wpos)
        for w in ws[1:]:
            self.v_alive[w] = False
        for es in tri_edges:
            self.e_alive[es] = False
            self.he_face.pop(2 * es, None)
            self.he_face.pop(2 * es + 1, None)
        del self.f_hes[fid]

        bigons = []
        for h, nb in zip(cyc, neighbors):
            if nb in self.f_hes:
                try:
                    self.f_hes[nb].remove(h ^ 1)
                except ValueError:
                    raise IntegratorError(f"face table inconsistent at {nb}", (nb,))
                if len(self.f_hes[nb]) == 2:
                    bigons.append(nb)
                elif len(self.f_hes[nb]) < 2:
                    raise IntegratorError(
                        f"triangle {fid} collapse left face {nb} degenerate", (nb,))
        self.touched.update(neighbors)
        self.touched.add(fid)
        self.events.append((self.time, "triangle_collapse", (fid,)))
        for ge in outer:
            self._prev_len[ge] = np.nan
            self._resample_edge(ge)
        self._dirty = True
        for nb in bigons:
            if nb in self.f_hes and len(self.f_hes[nb]) == 2:
                self.collapse_bigon(nb)

    def collapse_bigon(self, fid: int):
        cyc = self.f_hes[fid]
        if len(cyc) != 2:
            raise IntegratorError(f"face {fid} is not a 2-gon", (fid,))
        h1, h2 = cyc
        E1, E2 = h1 >> 1, h2 >> 1
        if E1 == E2:
            raise IntegratorError(f"2-gon {fid} is a doubled half-edge pair", (fid,))
        u = int(self.e_v1[E1]) if (h1 & 1) == 0 else int(self.e_v2[E1])
        v = int(self.e_v2[E1]) if (h1 & 1) == 0 else int(self.e_v1[E1])
        gu = [int(e) for e in self.v_edges[u] if e not in (E1, E2)]
        gv = [int(e) for e in self.v_edges[v] if e not in (E1, E2)]
        if len(gu) != 1 or len(gv) != 1:
            raise IntegratorError(f"2-gon {fid} vertices not trivalent", (fid,))
        gu, gv = gu[0], gv[0]
        if gu == gv:
            raise IntegratorError(f"2-gon {fid} hangs on a single edge", (fid,))
        a = int(self.e_v2[gu]) if self.e_v1[gu] == u else int(self.e_v1[gu])
        b = int(self.e_v2[gv]) if self.e_v1[gv] == v else int(self.e_v1[gv])
        if a in (u, v) or b in (u, v) or a == b:
            raise IntegratorError(f"2-gon {fid} collapse would create a loop", (fid,))
        X = self.he_face[h1 ^ 1]
        Y = self.he_face[h2 ^ 1]
        if X == fid or Y == fid:
            raise IntegratorError(f"2-gon {fid} borders itself", (fid,))

        # merged polyline a -> u -> v -> b, lifted around u
        pu = self.v_pos[u]

        def edge_pts_toward(s, frm):
            st, k = int(self.e_start[s]), int(self.e_npts[s])
            sl = self.P[st:st + k]
            return sl if self.e_v1[s] == frm else sl[::-1]

        pa_u = edge_pts_toward(gu, a)  # a .. u
        pv_b = edge_pts_toward(gv, v)  # v .. b
        chain = np.vstack([pa_u, pv_b])
        lifted = np.vstack([chain[0], chain[0] + np.cumsum(min_image(np.diff(chain, axis=0), self.dom), axis=0)])

        g_v_in = self._he_into(X, v)
        g_u_in = self._he_into(Y, u)
        gu_out = 2 * gu + (0 if self.e_v1[gu] == u else 1)
        gv_out = 2 * gv + (0 if self.e_v1[gv] == v else 1)
        cxl = self.f_hes[X]
        iv = cxl.index(g_v_in)
        if (cxl[(iv + 1) % len(cxl)] != (h1 ^ 1)
                or cxl[(iv + 2) % len(cxl)] != gu_out):
            raise IntegratorError(f"face {X} inconsistent at 2-gon {fid}", (fid, X))
        cyl = self.f_hes[Y]
        iu = cyl.index(g_u_in)
        if (cyl[(iu + 1) % len(cyl)] != (h2 ^ 1)
                or cyl[(iu + 2) % len(cyl)] != gv_out):
            raise IntegratorError(f"face {Y} inconsistent at 2-gon {fid}", (fid, Y))

        # the merged edge reuses slot E1, stored a -> b
        self._vertex_drop_edge(a, gu)
        self._vertex_drop_edge(b, gv)
        self.e_v1[E1], self.e_v2[E1] = a, b
        self._vertex_replace_edge(a, -1, E1, 0)
        self._vertex_replace_edge(b, -1, E1, 1)
        self._set_edge_points(E1, lifted)

        def splice(cycle, at_in, new_he):
            # rotate so the 3-half-edge detour leads, then replace it
            i = cycle.index(at_in)
            rot = cycle[i:] + cycle[:i]
            return [new_he] + rot[3:]

        self.f_hes[X] = splice(cxl, g_v_in, 2 * E1 + 1)  # X passes b -> a
        self.f_hes[Y] = splice(self.f_hes[Y], g_u_in, 2 * E1)  # Y passes a -> b
        self.he_face[2 * E1] = Y
        self.he_face[2 * E1 + 1] = X
        for dead in (2 * E2, 2 * E2 + 1, 2 * gu, 2 * gu + 1, 2 * gv, 2 * gv + 1):
            self.he_face.pop(dead, None)

        self.v_alive[u] = False
        self.v_alive[v] = False
        self.e_alive[E2] = False
        self.e_alive[gu] = False
        self.e_alive[gv] = False
        self._prev_len[E1] = np.nan
        del self.f_hes[fid]
        self.touched.update((fid, X, Y))
        self.events.append((self.time, "bigon_collapse", (fid,)))
        self._dirty = True
        for nb in (X, Y):
            if nb in self.f_hes and len(self.f_hes[nb]) == 2:
                self.collapse_bigon(nb)

    def _check_consistency(self):
        nv = int(np.count_nonzero(self.v_alive))
        ne = int(np.count_nonzero(self.e_alive))
        nf = len(self.f_hes)
        if nv - ne + nf != 0:
            raise IntegratorError(f"Euler characteristic broken: {nv}-{ne}+{nf}")
        alive = np.flatnonzero(self.v_alive)
        ee = self.v_edges[alive]
        if np.any(ee < 0) or not np.all(self.e_alive[np.clip(ee, 0, None)]):
            raise IntegratorError("vertex incidence references dead edge")
        cnt = 0
        for fid, cyc in self.f_hes.items():
            cnt += len(cyc)
            for he in cyc:
                if self.he_face.get(he) != fid:
                    raise IntegratorError(f"he_face mismatch at face {fid}")
        if cnt != 2 * ne:
            raise IntegratorError(f"face cycles cover {cnt} half-edges, expected {2 * ne}")

    # -- intersection scan -----------------------------------------------------

    def check_self_intersection(self):
        """Proper-crossing scan over all segments (grid-free, KD-tree on
        midpoints).  Raises IntegratorError with the offending edges."""
        self._ensure()
        a = self.P[self._seg_a]
        d = min_image(self.P[self._seg_a + 1] - a, self.dom)
        mid = a + 0.5 * d
        ln = np.hypot(d[:, 0], d[:, 1])
        r = float(np.max(ln)) if len(ln) else 0.0
        if r == 0.0:
            return
        # identify which edge each segment belongs to
        counts = self.e_npts[self._seg_alive] - 1
        seg_edge = np.repeat(self._seg_alive, counts)
        tree = cKDTree(np.mod(mid, self.dom.sides), boxsize=self.dom.sides)
        pairs = tree.query_pairs(r, output_type="ndarray")
        if len(pairs) == 0:
            return
        i, j = pairs[:, 0], pairs[:, 1]
        same_edge = seg_edge[i] == seg_edge[j]
        adjacent = same_edge & (np.abs(self._seg_a[i] - self._seg_a[j]) <= 1)
        p = a[i]
        pr = d[i]
        q = a[i] + min_image(a[j] - a[i], self.dom)
        qs = d[j]
        # exclude segment pairs that share an endpoint (vertex junctions)
        share = np.zeros(len(i), dtype=bool)
        for dq in (q - p, q + qs - p, q - (p + pr), q + qs - (p + pr)):
            share |= np.hypot(dq[:, 0], dq[:, 1]) < 1e-12
        cand = ~adjacent & ~share
        if not np.any(cand):
            return
        p, pr, q, qs = p[cand], pr[cand], q[cand], qs[cand]

        def cross(o, u, v):
            return (u[:, 0] - o[:, 0]) * (v[:, 1] - o[:, 1]) - (u[:, 1] - o[:, 1]) * (v[:, 0] - o[:, 0])

        d1 = cross(p, p + pr, q)
        d2 = cross(p, p + pr, q + qs)
        d3 = cross(q, q + qs, p)
        d4 = cross(q, q + qs, p + pr)
        hit = (d1 * d2 < 0) & (d3 * d4 < 0)
        if np.any(hit):
            ii = np.flatnonzero(cand)[np.flatnonzero(hit)[0]]
            e1 = int(seg_edge[i[ii]])
            e2 = int(seg_edge[j[ii]])
            raise IntegratorError(f"self-intersection between edges {e1} and {e2}",
                                  (e1, e2))

    # -- export -----------------------------------------------------------------

    def to_graph(self) -> EmbeddedGraph:
        vertices = {int(v): self.v_pos[v].copy() for v in np.flatnonzero(self.v_alive)}
        edges = {}
        for s in np.flatnonzero(self.e_alive):
            st, k = int(self.e_start[s]), int(self.e_npts[s])
            edges[int(s)] = Edge(int(self.e_v1[s]), int(self.e_v2[s]),
                                 self.P[st:st + k].copy())
        faces = {int(f): list(c) for f, c in self.f_hes.items()}
        return EmbeddedGraph(self.dom, vertices, edges, faces)


# -- public operations ---------------------------------------------------------


def step(g: EmbeddedGraph, cfg: FlowConfig) -> tuple[EmbeddedGraph, float]:
    """One explicit step on a copy of ``g``; returns (g', dt_used)."""
    st = FlowState(g, cfg)
    dt = st.step()
    return st.to_graph(), dt


def handle_edge_collapse(g: EmbeddedGraph, edge_id: int,
                         cfg: FlowConfig | None = None) -> EmbeddedGraph:
    cfg = cfg or FlowConfig.for_graph(g)
    if g.edge_length(edge_id) >= cfg.collapse_length:
        raise IntegratorError(f"edge {edge_id} is not short enough to collapse")
    st = FlowState(g, cfg)
    s = st._eslot[edge_id]
    fX, fY = st.he_face[2 * s], st.he_face[2 * s + 1]
    if len(st.f_hes[fX]) <= 3 or len(st.f_hes[fY]) <= 3:
        raise IntegratorError(
            f"edge {edge_id} lies on a face with <= 3 edges; face collapse applies first")
    st.collapse_edge(s)
    st._check_consistency()
    return st.to_graph()


def handle_face_collapse(g: EmbeddedGraph, face_id: int,
                         cfg: FlowConfig | None = None) -> EmbeddedGraph:
    cfg = cfg or FlowConfig.for_graph(g)
    n = g.face_edge_count(face_id)
    if n not in (2, 3):
        raise IntegratorError(f"face {face_id} has {n} edges; only 2- and 3-gons collapse")
    st = FlowState(g, cfg)
    if n == 3:
        st.collapse_triangle(face_id)
    else:
        st.collapse_bigon(face_id)
    st._check_consistency()
    return st.to_graph()


@dataclass
class SnapshotSchedule:
    """Emit snapshots when the edge count first drops to each threshold
    (descending), or every fixed number of steps."""
    edge_counts: list[int] | None = None
    every_steps: int | None = None

    def __post_init__(self):
        if self.edge_counts is not None:
            self.edge_counts = sorted(self.edge_counts, reverse=True)


def run(g0: EmbeddedGraph, cfg: FlowConfig,
        schedule: SnapshotSchedule | None = None) -> Trajectory:
    """Evolve until stop_edge_count or max_steps, recording stats and
    snapshots.  Aborts (with the last good snapshot kept) on integrator
    errors."""
    cfg = replace(cfg)  # adaptive retargeting must not mutate the caller's config
    traj = Trajectory()
    st = FlowState(g0, cfg)

    def record():
        fids, areas, ncnt = st.face_areas()
        faces = None
        if cfg.record_faces:
            faces = {int(f): (float(a), int(n)) for f, a, n in zip(fids, areas, ncnt)}
        _, lens = st.edge_lengths()
        traj.records.append(StatsRecord(
            st.time, st.steps, st.edge_count(), st.face_count(),
            float(lens.mean()), faces, set(st.touched)))
        st.touched.clear()

    def snapshot():
        g = st.to_graph()
        if cfg.check_intersections:
            st.check_self_intersection()
        traj.snapshots.append((st.time, st.edge_count(), g))

    pending = list(schedule.edge_counts) if (schedule and schedule.edge_counts) else []

    try:
        if not regularity_report(g0).regular and cfg.relax_steps > 0:
            st._relaxing = True
            for _ in range(cfg.relax_steps):
                st.step()
            st._relaxing = False

        record()
        snapshot()
        while st.steps < cfg.max_steps and st.edge_count() > cfg.stop_edge_count:
            if cfg.adaptive_resample:
                m = st.mean_edge_length()
                if m / 8.0 > 1.25 * cfg.resample_h:
                    cfg.resample_h = m / 8.0
                    cfg.collapse_length = 2.5 * cfg.resample_h
                    cfg.collapse_area = cfg.collapse_length ** 2
            st.step()
            if st.steps % cfg.stats_every == 0:
                record()
            hit = False
            while pending and st.edge_count() <= pending[0]:
                pending.pop(0)
                hit = True
            if hit:
                record()
                snapshot()
            if schedule and schedule.every_steps and st.steps % schedule.every_steps == 0:
                snapshot()
        record()
        snapshot()
        traj.final = traj.snapshots[-1][2]
        traj.events = list(st.events)
    except IntegratorError as exc:
        traj.aborted = True
        traj.abort_reason = str(exc)
        traj.events = list(st.events)
        if not traj.snapshots:
            traj.snapshots.append((st.time, st.edge_count(), g0))
        traj.final = traj.snapshots[-1][2]
    return traj


# -- von Neumann--Mullins residuals ---------------------------------------------


@dataclass
class VnmResiduals:
    residuals: np.ndarray  # absolute residuals |dA/dt - (pi/3)(n-6)|
    relative: np.ndarray  # residuals / (pi/3)
    sides: np.ndarray  # face side count n

    def median_relative(self) -> float:
        return float(np.median(self.relative)) if len(self.relative) else math.nan


def measure_vnm_residual(traj: Trajectory) -> VnmResiduals:
    """Residuals against dA/dt = (pi/3)(n - 6) for faces untouched by
    surgery between consecutive face-recording stats records."""
    recs = [r for r in traj.records if r.faces is not None]
    if len(recs) < 2:
        raise ValueError("trajectory has fewer than 2 face-recording stats records")
    res, rel, sides = [], [], []
    for r0, r1 in zip(recs[:-1], recs[1:]):
        dt = r1.time - r0.time
        if dt <= 0:
            continue
        touched = r1.touched_since_prev
        for fid, (a1, n1) in r1.faces.items():
            if fid in touched or fid not in r0.faces:
                continue
            a0, n0 = r0.faces[fid]
            if n0 != n1 or math.isnan(a0) or math.isnan(a1):
                continue
            r = (a1 - a0) / dt - VNM_RATE * (n1 - 6)
            res.append(abs(r))
            rel.append(abs(r) / VNM_RATE)
            sides.append(n1)
    return VnmResiduals(np.array(res), np.array(rel), np.array(sides, dtype=int))
