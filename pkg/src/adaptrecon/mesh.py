"""Indexed triangle mesh, uniform Laplacian, curvature and OBJ I/O."""
from __future__ import annotations

from dataclasses import dataclass, replace
from functools import cached_property
from pathlib import Path

import numpy as np
import scipy.sparse as sp

from .camera import Camera


class NonManifoldError(ValueError):
    """Raised when the mesh violates the closed 2-manifold contract."""

    def __init__(self, message, edge=None):
        super().__init__(message)
        self.edge = edge


@dataclass(eq=False)
class TriangleMesh:
    """Vertices, counter-clockwise faces and per-vertex UV coordinates.

    Derived connectivity (edge table, neighbors) is cached on first use, so
    treat instances as immutable: operations that change geometry or
    connectivity return a new mesh.
    """

    vertices: np.ndarray
    faces: np.ndarray
    uvs: np.ndarray | None = None

    def __post_init__(self):
        self.vertices = np.ascontiguousarray(self.vertices, dtype=np.float64).reshape(-1, 3)
        self.faces = np.ascontiguousarray(self.faces, dtype=np.int64).reshape(-1, 3)
        if self.uvs is not None:
            self.uvs = np.ascontiguousarray(self.uvs, dtype=np.float64).reshape(-1, 2)
            if len(self.uvs) != len(self.vertices):
                raise ValueError("uvs must be per-vertex")
        if len(self.faces):
            if self.faces.min() < 0 or self.faces.max() >= len(self.vertices):
                raise ValueError("face index out of range")
            f = self.faces
            if np.any((f[:, 0] == f[:, 1]) | (f[:, 1] == f[:, 2]) | (f[:, 0] == f[:, 2])):
                raise ValueError("face references a vertex twice")

    @property
    def n_vertices(self) -> int:
        return len(self.vertices)

    @property
    def n_faces(self) -> int:
        return len(self.faces)

    def copy(self) -> "TriangleMesh":
        return TriangleMesh(self.vertices.copy(), self.faces.copy(),
                            None if self.uvs is None else self.uvs.copy())

    def with_vertices(self, vertices: np.ndarray) -> "TriangleMesh":
        """Same connectivity and UVs, new positions (keeps cached topology)."""
        new = replace(self, vertices=vertices)
        for key in ("_edge_data", "neighbors", "degree"):
            if key in self.__dict__:
                new.__dict__[key] = self.__dict__[key]
        return new

    @cached_property
    def _edge_data(self):
        f = self.faces
        half = np.stack([f, np.roll(f, -1, axis=1)], axis=2).reshape(-1, 2)
        key = np.sort(half, axis=1)
        edges, inverse, counts = np.unique(key, axis=0, return_inverse=True, return_counts=True)
        return edges, inverse.reshape(-1), counts, half

    @property
    def edges(self) -> np.ndarray:
        """Unique undirected edges ``(E, 2)`` sorted lexicographically, ``e[0] < e[1]``."""
        return self._edge_data[0]

    @property
    def face_edges(self) -> np.ndarray:
        """``(F, 3)`` edge index of face corners ``(0,1), (1,2), (2,0)``."""
        return self._edge_data[1].reshape(-1, 3)

    @cached_property
    def edge_faces(self) -> np.ndarray:
        """``(E, 2)`` incident faces per edge (``-1`` when fewer than two)."""
        edges, inverse, counts, _ = self._edge_data
        ef = np.full((len(edges), 2), -1, dtype=np.int64)
        face_of = np.repeat(np.arange(self.n_faces), 3)
        order = np.argsort(inverse, kind="stable")
        starts = np.concatenate([[0], np.cumsum(counts)[:-1]])
        first = order[starts]
        ef[:, 0] = face_of[first]
        two = counts >= 2
        ef[two, 1] = face_of[order[starts[two] + 1]]
        return ef

    @cached_property
    def neighbors(self) -> sp.csr_matrix:
        """Symmetric vertex adjacency as a boolean CSR matrix."""
        e = self.edges
        n = self.n_vertices
        A = sp.coo_matrix((np.ones(2 * len(e)), (np.r_[e[:, 0], e[:, 1]], np.r_[e[:, 1], e[:, 0]])),
                          shape=(n, n)).tocsr()
        A.sort_indices()
        return A

    @cached_property
    def degree(self) -> np.ndarray:
        return np.diff(self.neighbors.indptr)

    def neighbor_list(self, i: int) -> np.ndarray:
        A = self.neighbors
        return A.indices[A.indptr[i]:A.indptr[i + 1]]

    def face_normals(self, normalize: bool = True) -> np.ndarray:
        v = self.vertices[self.faces]
        n = np.cross(v[:, 1] - v[:, 0], v[:, 2] - v[:, 0])
        if normalize:
            n = n / np.maximum(np.linalg.norm(n, axis=1, keepdims=True), 1e-300)
        return n

    def face_areas(self) -> np.ndarray:
        return 0.5 * np.linalg.norm(self.face_normals(normalize=False), axis=1)

    def euler_characteristic(self) -> int:
        return self.n_vertices - len(self.edges) + self.n_faces


def check_manifold(mesh: TriangleMesh, *, vertex_fans: bool = False) -> None:
    """Raise :class:`NonManifoldError` unless ``mesh`` is a closed, consistently oriented 2-manifold.

    ``vertex_fans=True`` additionally checks that every vertex one-ring forms
    a single cycle (slower, python loop over vertices).
    """
    if mesh.n_faces == 0:
        raise NonManifoldError("mesh has no faces")
    edges, inverse, counts, half = mesh._edge_data
    bad = np.flatnonzero(counts != 2)
    if len(bad):
        a, b = edges[bad[0]]
        raise NonManifoldError(f"edge ({a}, {b}) has {counts[bad[0]]} incident faces", edge=(int(a), int(b)))
    # consistent orientation: each directed half-edge occurs once
    _, dcounts = np.unique(half, axis=0, return_counts=True)
    if np.any(dcounts != 1):
        dup = np.unique(half, axis=0)[np.flatnonzero(dcounts != 1)[0]]
        raise NonManifoldError(f"edge ({dup[0]}, {dup[1]}) is inconsistently oriented",
                               edge=(int(min(dup)), int(max(dup))))
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.faces.ravel()] = True
    if not used.all():
        raise NonManifoldError(f"vertex {np.flatnonzero(~used)[0]} is isolated")
    if vertex_fans:
        nxt = {}
        for f in mesh.faces:
            for k in range(3):
                nxt[(int(f[k]), int(f[(k + 1) % 3]))] = int(f[(k + 2) % 3])
        ring = [dict() for _ in range(mesh.n_vertices)]
        for (a, b), c in nxt.items():
            ring[a][b] = c
        for v, links in enumerate(ring):
            start = next(iter(links))
            cur, steps = start, 0
            while True:
                cur = links[cur]
                steps += 1
                if cur == start or cur not in links:
                    break
            if cur != start or steps != len(links):
                raise NonManifoldError(f"vertex {v} has a non-disk neighborhood")


def is_manifold(mesh: TriangleMesh, vertex_fans: bool = True) -> bool:
    try:
        check_manifold(mesh, vertex_fans=vertex_fans)
    except NonManifoldError:
        return False
    return True


def build_laplacian(mesh: TriangleMesh) -> sp.csr_matrix:
    """Row-normalized uniform Laplacian ``L = I - D^-1 A``.

    Every row has diagonal 1 and ``-1/deg(i)`` at each neighbor, so rows sum
    to zero and constant fields are annihilated.
    """
    check_manifold(mesh)
    if mesh.n_vertices < 4:
        raise NonManifoldError("a closed manifold needs at least 4 vertices")
    A = mesh.neighbors
    deg = np.diff(A.indptr).astype(np.float64)
    n = mesh.n_vertices
    L = sp.identity(n, format="csr") - sp.diags(1.0 / deg) @ A.astype(np.float64)
    L = sp.csr_matrix(L)
    L.sort_indices()
    L.eliminate_zeros()
    return L


def mesh_curvature(mesh: TriangleMesh, L: sp.spmatrix) -> np.ndarray:
    """Per-vertex curvature proxy ``0.5 * ||(L V)_i||``."""
    if L.shape != (mesh.n_vertices, mesh.n_vertices):
        raise ValueError(f"Laplacian shape {L.shape} does not match {mesh.n_vertices} vertices")
    return 0.5 * np.linalg.norm(L @ mesh.vertices, axis=1)


def vertex_normals(mesh: TriangleMesh) -> np.ndarray:
    """Area-weighted vertex normals (unit length)."""
    fn = mesh.face_normals(normalize=False)  # length = 2 * area
    n = np.zeros_like(mesh.vertices)
    for k in range(3):
        np.add.at(n, mesh.faces[:, k], fn)
    length = np.linalg.norm(n, axis=1)
    used = np.zeros(mesh.n_vertices, dtype=bool)
    used[mesh.faces.ravel()] = True
    if not used.all():
        raise ValueError(f"vertex {np.flatnonzero(~used)[0]} is isolated")
    return n / np.maximum(length, 1e-300)[:, None]


@dataclass
class UnitBoxTransform:
    """``normalized = scale * (original - center)``."""

    center: np.ndarray
    scale: float

    def to_normalized(self, points: np.ndarray) -> np.ndarray:
        return (np.asarray(points) - self.center) * self.scale

    def to_original(self, points: np.ndarray) -> np.ndarray:
        return np.asarray(points) / self.scale + self.center

    def camera_to_normalized(self, cam: Camera) -> Camera:
        # camera-space coordinates scale uniformly; projection is unchanged and
        # the light intensity compensates the 1/r^2 falloff
        M = cam.world_to_camera.copy()
        M[:3, 3] = self.scale * (cam.rotation @ self.center + cam.translation)
        return Camera(M, cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
                      cam.light_intensity * self.scale**2)

    def camera_to_original(self, cam: Camera) -> Camera:
        M = cam.world_to_camera.copy()
        M[:3, 3] = cam.translation / self.scale - cam.rotation @ self.center
        return Camera(M, cam.fx, cam.fy, cam.cx, cam.cy, cam.width, cam.height,
                      cam.light_intensity / self.scale**2)


def normalize_to_unit_box(mesh: TriangleMesh, cameras=()):
    """Uniformly scale and translate so the bounding box fits ``[-1, 1]^3``.

    Returns the normalized mesh, the matching cameras and the transform.
    """
    if mesh.n_vertices == 0:
        raise ValueError("cannot normalize an empty mesh")
    lo, hi = mesh.vertices.min(axis=0), mesh.vertices.max(axis=0)
    extent = float(np.max(hi - lo))
    if not extent > 0:
        raise ValueError("mesh has zero extent")
    tf = UnitBoxTransform(center=(lo + hi) / 2, scale=2.0 / extent)
    out = mesh.with_vertices(tf.to_normalized(mesh.vertices))
    return out, [tf.camera_to_normalized(c) for c in cameras], tf


def spherical_uvs(vertices: np.ndarray, center: np.ndarray | None = None) -> np.ndarray:
    """Spherical projection about ``center`` (default: centroid) into ``[0, 1]^2``.

    ``u`` follows the azimuth around z and wraps at the seam, ``v`` the polar angle.
    """
    c = vertices.mean(axis=0) if center is None else center
    d = vertices - c
    r = np.maximum(np.linalg.norm(d, axis=1), 1e-12)
    u = (np.arctan2(d[:, 1], d[:, 0]) / (2 * np.pi)) % 1.0
    v = np.arccos(np.clip(d[:, 2] / r, -1.0, 1.0)) / np.pi
    return np.stack([u, v], axis=1)


def unwrap_face_uvs(uvs: np.ndarray, faces: np.ndarray) -> np.ndarray:
    """Per-corner UVs ``(F, 3, 2)`` with ``u`` unwrapped across the seam.

    A face whose ``u`` span exceeds one half straddles the seam; its small
    ``u`` values are shifted by one so interpolation stays local. Texture
    lookups wrap in ``u``.
    """
    fu = uvs[faces].copy()
    u = fu[..., 0]
    straddle = (u.max(axis=1) - u.min(axis=1)) > 0.5
    shift = straddle[:, None] & (u < 0.5)
    u[shift] += 1.0
    return fu


def midpoint_uv(uv_a: np.ndarray, uv_b: np.ndarray) -> np.ndarray:
    """UV midpoint, taking the short way around the ``u`` seam."""
    ua, ub = uv_a[..., 0], uv_b[..., 0]
    ub = np.where(ub - ua > 0.5, ub - 1.0, np.where(ua - ub > 0.5, ub + 1.0, ub))
    u = ((ua + ub) / 2) % 1.0
    return np.stack([u, (uv_a[..., 1] + uv_b[..., 1]) / 2], axis=-1)


def icosahedron() -> TriangleMesh:
    t = (1 + 5**0.5) / 2
    v = np.array([[-1, t, 0], [1, t, 0], [-1, -t, 0], [1, -t, 0],
                  [0, -1, t], [0, 1, t], [0, -1, -t], [0, 1, -t],
                  [t, 0, -1], [t, 0, 1], [-t, 0, -1], [-t, 0, 1]], dtype=np.float64)
    v /= np.linalg.norm(v, axis=1, keepdims=True)
    f = np.array([[0, 11, 5], [0, 5, 1], [0, 1, 7], [0, 7, 10], [0, 10, 11],
                  [1, 5, 9], [5, 11, 4], [11, 10, 2], [10, 7, 6], [7, 1, 8],
                  [3, 9, 4], [3, 4, 2], [3, 2, 6], [3, 6, 8], [3, 8, 9],
                  [4, 9, 5], [2, 4, 11], [6, 2, 10], [8, 6, 7], [9, 8, 1]])
    return TriangleMesh(v, f, spherical_uvs(v, np.zeros(3)))


def icosphere(subdivisions: int = 1, radius: float = 1.0) -> TriangleMesh:
    """Icosahedron with ``subdivisions`` rounds of 1-to-4 midpoint splits, projected to a sphere.

    Vertex counts: 12, 42, 162, 642, 2562, ...
    """
    mesh = icosahedron()
    v, f = mesh.vertices, mesh.faces
    for _ in range(subdivisions):
        m = TriangleMesh(v, f)
        e = m.edges
        mid = v[e].mean(axis=1)
        mid /= np.linalg.norm(mid, axis=1, keepdims=True)
        base = len(v)
        fe = m.face_edges + base  # edges (0,1), (1,2), (2,0)
        a, b, c = f[:, 0], f[:, 1], f[:, 2]
        ab, bc, ca = fe[:, 0], fe[:, 1], fe[:, 2]
        f = np.concatenate([np.stack([a, ab, ca], 1), np.stack([b, bc, ab], 1),
                            np.stack([c, ca, bc], 1), np.stack([ab, bc, ca], 1)])
        v = np.concatenate([v, mid])
    v = radius * v
    return TriangleMesh(v, f, spherical_uvs(v, np.zeros(3)))


def tetrahedron() -> TriangleMesh:
    v = np.array([[1, 1, 1], [1, -1, -1], [-1, 1, -1], [-1, -1, 1]], dtype=np.float64) / np.sqrt(3)
    f = np.array([[0, 1, 2], [0, 3, 1], [0, 2, 3], [1, 3, 2]])
    return TriangleMesh(v, f, spherical_uvs(v, np.zeros(3)))


def save_obj(mesh: TriangleMesh, path, normals: bool = True) -> None:
    """Write ``v``/``vt``/``vn``/``f`` records; UV and normal indices equal vertex indices."""
    lines = ["# adaptrecon mesh"]
    lines += [f"v {x:.9g} {y:.9g} {z:.9g}" for x, y, z in mesh.vertices]
    has_uv = mesh.uvs is not None
    if has_uv:
        lines += [f"vt {u:.9g} {1.0 - v:.9g}" for u, v in mesh.uvs]
    if normals and mesh.n_faces:
        lines += [f"vn {x:.6g} {y:.6g} {z:.6g}" for x, y, z in vertex_normals(mesh)]
    for a, b, c in mesh.faces + 1:
        if has_uv and normals:
            lines.append(f"f {a}/{a}/{a} {b}/{b}/{b} {c}/{c}/{c}")
        elif has_uv:
            lines.append(f"f {a}/{a} {b}/{b} {c}/{c}")
        elif normals:
            lines.append(f"f {a}//{a} {b}//{b} {c}//{c}")
        else:
            lines.append(f"f {a} {b} {c}")
    Path(path).write_text("\n".join(lines) + "\n")


def load_obj(path) -> TriangleMesh:
    """Read a triangle OBJ; polygon faces are fan-triangulated.

    OBJ ``vt`` has v pointing up; it is flipped to the image-row convention
    used by the atlas. When UV indices differ from vertex indices the last
    referenced UV of each vertex wins.
    """
    verts, tex, faces, corner_uv = [], [], [], []
    for line in Path(path).read_text().splitlines():
        parts = line.split()
        if not parts:
            continue
        if parts[0] == "v":
            verts.append([float(x) for x in parts[1:4]])
        elif parts[0] == "vt":
            tex.append([float(parts[1]), 1.0 - float(parts[2])])
        elif parts[0] == "f":
            idx = [p.split("/") for p in parts[1:]]
            vi = [int(p[0]) - 1 for p in idx]
            ti = [int(p[1]) - 1 if len(p) > 1 and p[1] else None for p in idx]
            for k in range(1, len(vi) - 1):
                faces.append([vi[0], vi[k], vi[k + 1]])
                corner_uv.append([ti[0], ti[k], ti[k + 1]])
    verts = np.array(verts, dtype=np.float64).reshape(-1, 3)
    faces = np.array(faces, dtype=np.int64).reshape(-1, 3)
    uvs = None
    if tex:
        tex = np.array(tex)
        uvs = np.zeros((len(verts), 2))
        for f, t in zip(faces, corner_uv):
            for v, ti in zip(f, t):
                if ti is not None:
                    uvs[v] = tex[ti]
    return TriangleMesh(verts, faces, uvs)
