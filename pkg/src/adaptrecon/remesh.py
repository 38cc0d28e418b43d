"""Curvature-driven refinement: Loop edge splits and valence-balancing flips."""
from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .mesh import TriangleMesh, midpoint_uv

E_MIN = 0.01875
E_MAX = 0.375
REMESH_INTERVAL = 25


@dataclass
class EdgeIndicatorField:
    """Per-vertex target edge length."""

    values: np.ndarray
    smoothed: bool = False

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64).reshape(-1)
        if np.any(~(self.values > 0)):
            raise ValueError("edge indicator values must be positive")

    @classmethod
    def constant(cls, n: int, value: float = E_MAX) -> "EdgeIndicatorField":
        return cls(np.full(n, float(value)))

    def __len__(self):
        return len(self.values)

    def extended(self, parents: np.ndarray) -> "EdgeIndicatorField":
        """Append values for new vertices as the mean of their parent edge endpoints."""
        if len(parents) == 0:
            return self
        new = self.values[parents].mean(axis=1)
        return EdgeIndicatorField(np.concatenate([self.values, new]), self.smoothed)


@dataclass
class SplitReport:
    n_candidates: int = 0
    n_split: int = 0
    n_skipped: int = 0
    split_edges: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))
    # parents[k] is the original edge of new vertex ``n_old + k``
    parents: np.ndarray = field(default_factory=lambda: np.zeros((0, 2), dtype=np.int64))


@dataclass
class FlipReport:
    n_flips: int = 0
    passes: int = 0
    converged: bool = True


@dataclass
class RemeshReport:
    split: SplitReport
    flip: FlipReport
    laplacian_stale: bool = True


def _edge_map(mesh: TriangleMesh) -> dict:
    emap = {}
    for (a, b), (f0, f1) in zip(mesh.edges.tolist(), mesh.edge_faces.tolist()):
        emap[(a, b)] = [f0] if f1 < 0 else [f0, f1]
    return emap


def _oriented(face, a, b):
    """Rotate ``face`` so that it reads ``(p, q, r)`` with ``{p, q} == {a, b}``."""
    x, y, z = face
    if {x, y} == {a, b}:
        return x, y, z
    if {y, z} == {a, b}:
        return y, z, x
    return z, x, y


def _tri_area(p, q, r):
    return 0.5 * np.linalg.norm(np.cross(q - p, r - p))


def loop_beta(n: int) -> float:
    """Loop's even-vertex neighbor weight for valence ``n``."""
    return (5.0 / 8.0 - (3.0 / 8.0 + 0.25 * np.cos(2 * np.pi / n)) ** 2) / n


def split_long_edges(mesh: TriangleMesh, e, *, smooth: bool = True, area_eps: float = 1e-14):
    """Split every edge longer than the mean indicator of its endpoints, longest first.

    New vertices take the Loop odd-vertex position of the original mesh and
    the seam-aware UV midpoint of the edge; the endpoints of split edges are
    then relaxed with the Loop even-vertex rule over their original one-ring.
    One pass only: edges created here are not reconsidered.

    Returns ``(new_mesh, SplitReport)``.
    """
    ev = e.values if isinstance(e, EdgeIndicatorField) else np.asarray(e, dtype=np.float64)
    if len(ev) != mesh.n_vertices:
        raise ValueError("edge indicator field must be per-vertex")
    V = mesh.vertices
    edges = mesh.edges
    ef = mesh.edge_faces
    length = np.linalg.norm(V[edges[:, 1]] - V[edges[:, 0]], axis=1)
    thr = 0.5 * (ev[edges[:, 0]] + ev[edges[:, 1]])
    cand = np.flatnonzero(length > thr)
    report = SplitReport(n_candidates=len(cand))
    if len(cand) == 0:
        return mesh, report
    order = cand[np.lexsort((cand, -length[cand]))]

    faces = mesh.faces.tolist()
    emap = _edge_map(mesh)
    n_old = mesh.n_vertices
    new_pos, new_uv, parents, done = [], [], [], []
    uvs = mesh.uvs

    def pos(i):
        return V[i] if i < n_old else new_pos[i - n_old]

    for ei in order:
        a, b = (int(x) for x in edges[ei])
        # odd rule on the original stencil
        opp = []
        for f in ef[ei]:
            if f >= 0:
                opp.append(_oriented(mesh.faces[f].tolist(), a, b)[2])
        if len(opp) == 2:
            m_pos = 0.375 * (V[a] + V[b]) + 0.125 * (V[opp[0]] + V[opp[1]])
        else:
            m_pos = 0.5 * (V[a] + V[b])
        cur = emap[(a, b)]
        m = n_old + len(new_pos)
        oriented = [_oriented(faces[f], a, b) for f in cur]
        if any(_tri_area(pos(p), m_pos, pos(r)) <= area_eps or _tri_area(m_pos, pos(q), pos(r)) <= area_eps
               for p, q, r in oriented):
            report.n_skipped += 1
            continue
        new_pos.append(m_pos)
        if uvs is not None:
            new_uv.append(midpoint_uv(uvs[a], uvs[b]))
        parents.append((a, b))
        done.append((a, b))
        del emap[(a, b)]
        emap[(min(a, m), max(a, m))] = []
        emap[(min(b, m), max(b, m))] = []
        for f, (p, q, r) in zip(cur, oriented):
            nf = len(faces)
            faces[f] = [p, m, r]
            faces.append([m, q, r])
            emap[(min(p, m), max(p, m))].append(f)
            emap[(min(q, m), max(q, m))].append(nf)
            emap[(min(m, r), max(m, r))] = [f, nf]
            qr = emap[(min(q, r), max(q, r))]
            qr[qr.index(f)] = nf

    report.n_split = len(done)
    if not done:
        return mesh, report
    report.split_edges = np.array(done, dtype=np.int64)
    report.parents = np.array(parents, dtype=np.int64)

    V_new = V.copy()
    if smooth:
        boundary = np.zeros(n_old, dtype=bool)
        boundary[edges[ef[:, 1] < 0].ravel()] = True
        A = mesh.neighbors
        for v in np.unique(report.split_edges):
            if boundary[v]:
                continue
            nb = A.indices[A.indptr[v]:A.indptr[v + 1]]
            beta = loop_beta(len(nb))
            V_new[v] = (1 - len(nb) * beta) * V[v] + beta * V[nb].sum(axis=0)
    verts = np.concatenate([V_new, np.array(new_pos)])
    out_uv = None if uvs is None else np.concatenate([uvs, np.array(new_uv)])
    return TriangleMesh(verts, np.array(faces, dtype=np.int64), out_uv), report


def _valence_cost(d, target):
    return (d - target) ** 2


def flip_for_valence(mesh: TriangleMesh, max_passes: int = 10):
    """Flip edges whenever that strictly lowers the valence deviation of the four involved vertices.

    Target valence is 6 (4 on an open boundary). Flips that would duplicate
    an existing edge, drop a valence below 3, create a degenerate face or
    turn a face against either old normal are skipped. Sweeps edges in
    lexicographic order until a pass makes no flip or ``max_passes`` is hit.

    Returns ``(new_mesh, FlipReport)``.
    """
    V = mesh.vertices
    faces = mesh.faces.copy()
    emap = _edge_map(mesh)
    deg = mesh.degree.astype(np.int64).copy()
    target = np.full(mesh.n_vertices, 6)
    ef = mesh.edge_faces
    target[mesh.edges[ef[:, 1] < 0].ravel()] = 4
    report = FlipReport(converged=False)

    for _ in range(max_passes):
        report.passes += 1
        flips = 0
        for key in sorted(emap):
            fl = emap.get(key)
            if fl is None or len(fl) != 2:
                continue
            a, b = key
            f1, f2 = fl
            p, q, c = _oriented(faces[f1].tolist(), a, b)
            if (p, q) != (a, b):
                f1, f2 = f2, f1
                p, q, c = _oriented(faces[f1].tolist(), a, b)
            _, _, d = _oriented(faces[f2].tolist(), a, b)
            if c == d or (min(c, d), max(c, d)) in emap or deg[a] <= 3 or deg[b] <= 3:
                continue
            before = (_valence_cost(deg[a], target[a]) + _valence_cost(deg[b], target[b])
                      + _valence_cost(deg[c], target[c]) + _valence_cost(deg[d], target[d]))
            after = (_valence_cost(deg[a] - 1, target[a]) + _valence_cost(deg[b] - 1, target[b])
                     + _valence_cost(deg[c] + 1, target[c]) + _valence_cost(deg[d] + 1, target[d]))
            if not after < before:
                continue
            # f1 = (a, b, c), f2 = (b, a, d)  ->  (a, d, c), (d, b, c)
            n_old1 = np.cross(V[b] - V[a], V[c] - V[a])
            n_old2 = np.cross(V[a] - V[b], V[d] - V[b])
            n_new1 = np.cross(V[d] - V[a], V[c] - V[a])
            n_new2 = np.cross(V[b] - V[d], V[c] - V[d])
            if (np.linalg.norm(n_new1) <= 1e-14 or np.linalg.norm(n_new2) <= 1e-14
                    or min(n_new1 @ n_old1, n_new1 @ n_old2, n_new2 @ n_old1, n_new2 @ n_old2) <= 0):
                continue
            faces[f1] = (a, d, c)
            faces[f2] = (d, b, c)
            del emap[key]
            emap[(min(c, d), max(c, d))] = [f1, f2]
            # edge (b, c) moves from f1 to f2, edge (a, d) from f2 to f1
            bc = emap[(min(b, c), max(b, c))]
            bc[bc.index(f1)] = f2
            ad = emap[(min(a, d), max(a, d))]
            ad[ad.index(f2)] = f1
            deg[a] -= 1
            deg[b] -= 1
            deg[c] += 1
            deg[d] += 1
            flips += 1
        report.n_flips += flips
        if flips == 0:
            report.converged = True
            break
    if report.n_flips == 0:
        return mesh, report
    return TriangleMesh(mesh.vertices, faces, mesh.uvs), report


def remesh_step(mesh: TriangleMesh, e: EdgeIndicatorField, *, max_flip_passes: int = 10):
    """One remesh event: a split pass followed by valence flips.

    Returns ``(new_mesh, RemeshReport)``; ``report.split.parents`` tells the
    caller how to interpolate per-vertex state onto the appended vertices.
    """
    split_mesh, split_report = split_long_edges(mesh, e)
    flipped, flip_report = flip_for_valence(split_mesh, max_passes=max_flip_passes)
    return flipped, RemeshReport(split_report, flip_report, laplacian_stale=True)
