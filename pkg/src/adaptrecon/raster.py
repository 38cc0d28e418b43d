"""Deterministic software rasterizer with adjoints.

Visibility (which triangle covers which pixel, and which contour edge
bounds each silhouette pixel) is resolved on the CPU with a z-buffer and
treated as fixed. Everything downstream of that assignment (ray/triangle
barycentrics, interpolation, tangent frames, texture lookups, shading,
silhouette distances) is evaluated in torch so the adjoint is the exact
chain rule through those steps.

Shading model: Cook-Torrance with a GGX distribution (``alpha = roughness^2``),
Schlick Fresnel with ``F0 = specular albedo`` and the height-correlated Smith
masking term, lit by a point light at the camera center (half vector equals
the view vector).
"""
from __future__ import annotations

import math
from dataclasses import dataclass

import numba
import numpy as np
import torch

from .atlas import MaterialAtlas, sample_bilinear, split_material
from .camera import Camera
from .mesh import TriangleMesh, unwrap_face_uvs

DTYPE = torch.float64
NEAR = 1e-6


class MissingIntermediates(RuntimeError):
    """The bundle was rendered without an autograd graph."""


# --------------------------------------------------------------------------- visibility kernels

@numba.njit(cache=True)
def _zbuffer(sx, sy, invz, faces, H, W):
    face_id = -np.ones((H, W), dtype=np.int32)
    depth = np.zeros((H, W))  # stores 1/z, larger is nearer
    for f in range(faces.shape[0]):
        a, b, c = faces[f, 0], faces[f, 1], faces[f, 2]
        if invz[a] <= 0 or invz[b] <= 0 or invz[c] <= 0:
            continue
        x0, y0, x1, y1, x2, y2 = sx[a], sy[a], sx[b], sy[b], sx[c], sy[c]
        area = (x1 - x0) * (y2 - y0) - (x2 - x0) * (y1 - y0)
        if abs(area) < 1e-12:
            continue
        xmin = max(int(math.floor(min(x0, x1, x2) - 0.5)), 0)
        xmax = min(int(math.ceil(max(x0, x1, x2) - 0.5)), W - 1)
        ymin = max(int(math.floor(min(y0, y1, y2) - 0.5)), 0)
        ymax = min(int(math.ceil(max(y0, y1, y2) - 0.5)), H - 1)
        for j in range(ymin, ymax + 1):
            py = j + 0.5
            for i in range(xmin, xmax + 1):
                px = i + 0.5
                w0 = ((x2 - x1) * (py - y1) - (px - x1) * (y2 - y1)) / area
                w1 = ((x0 - x2) * (py - y2) - (px - x2) * (y0 - y2)) / area
                w2 = 1.0 - w0 - w1
                if w0 < 0 or w1 < 0 or w2 < 0:
                    continue
                iz = w0 * invz[a] + w1 * invz[b] + w2 * invz[c]
                if iz > depth[j, i]:
                    depth[j, i] = iz
                    face_id[j, i] = f
    return face_id, depth


@numba.njit(cache=True)
def _nearest_contour(sx, sy, edges, boundary, H, W, max_dist):
    best = np.full((H, W), np.inf)
    best_edge = -np.ones((H, W), dtype=np.int64)
    for k in range(edges.shape[0]):
        a, b = edges[k, 0], edges[k, 1]
        ax, ay, bx, by = sx[a], sy[a], sx[b], sy[b]
        dx, dy = bx - ax, by - ay
        ll = dx * dx + dy * dy
        xmin = max(int(math.floor(min(ax, bx) - max_dist - 0.5)), 0)
        xmax = min(int(math.ceil(max(ax, bx) + max_dist - 0.5)), W - 1)
        ymin = max(int(math.floor(min(ay, by) - max_dist - 0.5)), 0)
        ymax = min(int(math.ceil(max(ay, by) + max_dist - 0.5)), H - 1)
        for j in range(ymin, ymax + 1):
            for i in range(xmin, xmax + 1):
                if not boundary[j, i]:
                    continue
                px, py = i + 0.5, j + 0.5
                t = 0.0
                if ll > 0:
                    t = ((px - ax) * dx + (py - ay) * dy) / ll
                    t = min(max(t, 0.0), 1.0)
                qx, qy = ax + t * dx - px, ay + t * dy - py
                d = math.sqrt(qx * qx + qy * qy)
                if d < best[j, i]:
                    best[j, i] = d
                    best_edge[j, i] = k
    return best, best_edge


@dataclass
class Visibility:
    """Fixed pixel assignment reused by the differentiable pass."""

    face_id: np.ndarray  # (H, W) int, -1 where empty
    band_pixels: np.ndarray  # flat indices of silhouette-band pixels
    band_edges: np.ndarray  # (K, 2) vertex ids of the nearest contour edge
    band_sign: np.ndarray  # +1 covered, -1 uncovered

    @property
    def covered(self) -> np.ndarray:
        return self.face_id >= 0


def contour_edges(mesh: TriangleMesh, camera: Camera) -> np.ndarray:
    """Edges between a front- and a back-facing face, plus open boundary edges."""
    if mesh.n_faces == 0:
        return np.zeros((0, 2), dtype=np.int64)
    fn = mesh.face_normals(normalize=False)
    to_cam = camera.center - mesh.vertices[mesh.faces[:, 0]]
    front = np.einsum("ij,ij->i", fn, to_cam) > 0
    ef = mesh.edge_faces
    single = ef[:, 1] < 0
    f1 = np.where(single, ef[:, 0], ef[:, 1])
    sil = single | (front[ef[:, 0]] != front[f1])
    return mesh.edges[sil]


def boundary_pixels(covered: np.ndarray) -> np.ndarray:
    c = covered
    diff = np.zeros_like(c)
    diff[:, 1:] |= c[:, 1:] != c[:, :-1]
    diff[:, :-1] |= c[:, 1:] != c[:, :-1]
    diff[1:, :] |= c[1:, :] != c[:-1, :]
    diff[:-1, :] |= c[1:, :] != c[:-1, :]
    return diff


def compute_visibility(mesh: TriangleMesh, camera: Camera, band: float = 1.0) -> Visibility:
    """Z-buffer face ids and the silhouette band for one view."""
    H, W = camera.height, camera.width
    if mesh.n_faces == 0:
        empty = np.zeros(0, dtype=np.int64)
        return Visibility(-np.ones((H, W), dtype=np.int32), empty, np.zeros((0, 2), np.int64), empty)
    p = camera.project(mesh.vertices)
    z = p[:, 2]
    invz = np.where(z > NEAR, 1.0 / np.where(z > NEAR, z, 1.0), -1.0)
    face_id, _ = _zbuffer(p[:, 0].copy(), p[:, 1].copy(), invz, mesh.faces, H, W)
    covered = face_id >= 0
    edges = contour_edges(mesh, camera)
    bnd = boundary_pixels(covered)
    front_edges = edges[(z[edges[:, 0]] > NEAR) & (z[edges[:, 1]] > NEAR)]
    dist, which = _nearest_contour(p[:, 0].copy(), p[:, 1].copy(), front_edges, bnd, H, W, 0.5 * band + 1.0)
    in_band = (dist < 0.5 * band).ravel()
    pix = np.flatnonzero(in_band)
    sign = np.where(covered.ravel()[pix], 1.0, -1.0)
    return Visibility(face_id, pix, front_edges[which.ravel()[pix]], sign)


# --------------------------------------------------------------------------- shading

def shade_brdf(n, v, kd, ks, rough, r, intensity):
    """Outgoing radiance for a collocated point light.

    ``Phi / r^2 * max(n.v, 0) * (kd / pi + F D G / (4 (n.v)^2))`` with the
    product rearranged so grazing angles stay finite. ``n`` and ``v`` are
    unit vectors (``(N, 3)``), ``kd``/``ks`` ``(N, 3)``, ``rough`` and ``r``
    ``(N,)``. Accepts torch tensors or numpy arrays.
    """
    lib = torch if torch.is_tensor(n) else np
    if lib is torch:
        c = (n * v).sum(-1)
        rough = rough.clamp(0.01, 1.0)
        cc = c.clamp(1e-6, 1.0)
    else:
        c = np.einsum("...i,...i->...", n, v)
        rough = np.clip(rough, 0.01, 1.0)
        cc = np.clip(c, 1e-6, 1.0)
    alpha2 = rough**4
    denom = cc * cc * (alpha2 - 1.0) + 1.0
    D = alpha2 / (math.pi * denom * denom)
    # cos * G / (4 cos^2) with height-correlated Smith G = cos / sqrt(cos^2 + alpha^2 sin^2)
    spec = D / (4.0 * lib.sqrt(cc * cc + alpha2 * (1.0 - cc * cc)))
    front = (c > 0)
    front = front.to(n.dtype) if lib is torch else front.astype(np.float64)
    scale = (intensity / (r * r)) * front
    return scale[..., None] * (cc[..., None] * kd / math.pi + ks * spec[..., None])


def ggx_reference(n_dot_v, kd, ks, rough, r, intensity):
    """Scalar textbook evaluation (separate F, D, G terms) used to cross-check :func:`shade_brdf`."""
    if n_dot_v <= 0:
        return np.zeros(3)
    alpha = max(min(rough, 1.0), 0.01) ** 2
    cos = n_dot_v
    D = alpha**2 / (math.pi * (cos**2 * (alpha**2 - 1) + 1) ** 2)
    tan2 = (1 - cos**2) / cos**2
    lam = (-1 + math.sqrt(1 + alpha**2 * tan2)) / 2
    G = 1 / (1 + lam + lam)
    F = np.asarray(ks) + (1 - np.asarray(ks)) * (1 - 1.0) ** 5
    f = np.asarray(kd) / math.pi + F * D * G / (4 * cos * cos)
    return intensity / r**2 * cos * f


# --------------------------------------------------------------------------- geometry in torch

def torch_vertex_normals(V: torch.Tensor, faces: torch.Tensor) -> torch.Tensor:
    fn = torch.cross(V[faces[:, 1]] - V[faces[:, 0]], V[faces[:, 2]] - V[faces[:, 0]], dim=1)
    n = torch.zeros_like(V)
    for k in range(3):
        n = n.index_add(0, faces[:, k], fn)
    return n / torch.sqrt((n * n).sum(1, keepdim=True) + 1e-30)


def torch_vertex_tangents(V: torch.Tensor, faces: torch.Tensor, face_uv: torch.Tensor):
    """Area-weighted per-vertex tangents from UV derivatives, plus per-vertex handedness."""
    P0, P1, P2 = V[faces[:, 0]], V[faces[:, 1]], V[faces[:, 2]]
    e1, e2 = P1 - P0, P2 - P0
    duv1 = face_uv[:, 1] - face_uv[:, 0]
    duv2 = face_uv[:, 2] - face_uv[:, 0]
    det = duv1[:, 0] * duv2[:, 1] - duv2[:, 0] * duv1[:, 1]
    ok = det.abs() > 1e-12
    inv = torch.where(ok, 1.0 / torch.where(ok, det, torch.ones_like(det)), torch.zeros_like(det))
    T = (e1 * duv2[:, 1:2] - e2 * duv1[:, 1:2]) * inv[:, None]
    B = (e2 * duv1[:, 0:1] - e1 * duv2[:, 0:1]) * inv[:, None]
    fn = torch.cross(e1, e2, dim=1)
    area = 0.5 * torch.sqrt((fn * fn).sum(1) + 1e-30)
    Tn = T / torch.sqrt((T * T).sum(1, keepdim=True) + 1e-30)
    t = torch.zeros_like(V)
    for k in range(3):
        t = t.index_add(0, faces[:, k], Tn * area[:, None])
    with torch.no_grad():
        hand_f = torch.sign((torch.cross(fn, T, dim=1) * B).sum(1)) * area
        hand = torch.zeros(V.shape[0], dtype=V.dtype)
        for k in range(3):
            hand = hand.index_add(0, faces[:, k], hand_f)
        hand = torch.where(hand < 0, -torch.ones_like(hand), torch.ones_like(hand))
    return t, hand


@dataclass
class MeshTensors:
    """View-independent per-vertex quantities shared by all views of one pass."""

    vertices: torch.Tensor
    faces: torch.Tensor
    face_uv: torch.Tensor
    normals: torch.Tensor
    tangents: torch.Tensor
    handedness: torch.Tensor

    @classmethod
    def build(cls, vertices: torch.Tensor, mesh: TriangleMesh) -> "MeshTensors":
        faces = torch.as_tensor(mesh.faces, dtype=torch.long)
        if mesh.uvs is None:
            raise ValueError("mesh needs per-vertex UVs for rendering")
        face_uv = torch.as_tensor(unwrap_face_uvs(mesh.uvs, mesh.faces), dtype=vertices.dtype)
        if len(faces) == 0:
            z = torch.zeros_like(vertices)
            return cls(vertices, faces, face_uv, z, z, torch.ones(len(vertices), dtype=vertices.dtype))
        normals = torch_vertex_normals(vertices, faces)
        tangents, hand = torch_vertex_tangents(vertices, faces, face_uv)
        return cls(vertices, faces, face_uv, normals, tangents, hand)


def _normalize(x, eps=1e-30):
    return x / torch.sqrt((x * x).sum(-1, keepdim=True) + eps)


@dataclass
class RenderBundle:
    """Forward outputs of one view plus what the adjoint pass needs.

    ``image`` is shaded with texture normals, ``image_geo`` with geometric
    normals only, ``coverage`` is the soft silhouette, ``normals_geo`` the
    interpolated geometric normal and ``normal_delta`` the world-space
    difference between shading and geometric normal. ``normal_delta`` does
    not depend on the vertices in the autograd graph (geometry enters it as a
    constant); ``normals_geo`` does not depend on appearance.
    """

    image: torch.Tensor
    image_geo: torch.Tensor
    coverage: torch.Tensor
    normals_geo: torch.Tensor
    normal_delta: torch.Tensor
    visibility: Visibility
    barycentrics: torch.Tensor
    vertices: torch.Tensor | None = None
    texture: torch.Tensor | None = None
    camera: Camera | None = None

    @property
    def face_id(self) -> np.ndarray:
        return self.visibility.face_id

    @property
    def hard_mask(self) -> np.ndarray:
        return self.visibility.covered


def render_view(mt: MeshTensors, texture: torch.Tensor, camera: Camera, vis: Visibility) -> RenderBundle:
    """Differentiable pass for one camera given a fixed visibility."""
    H, W = camera.height, camera.width
    dtype = mt.vertices.dtype
    R = torch.as_tensor(camera.rotation, dtype=dtype)
    tr = torch.as_tensor(camera.translation, dtype=dtype)
    center = torch.as_tensor(camera.center, dtype=dtype)
    V = mt.vertices

    pix = np.flatnonzero(vis.face_id.ravel() >= 0)
    n_pix = len(pix)
    pix_t = torch.as_tensor(pix, dtype=torch.long)
    zeros3 = torch.zeros(H * W, 3, dtype=dtype)

    # silhouette coverage
    cov = torch.as_tensor(vis.covered.ravel().astype(np.float64), dtype=dtype)
    if len(vis.band_pixels):
        ends = torch.as_tensor(vis.band_edges, dtype=torch.long)
        Vc = V[ends.reshape(-1)] @ R.T + tr
        sx = camera.fx * Vc[:, 0] / Vc[:, 2] + camera.cx
        sy = camera.fy * Vc[:, 1] / Vc[:, 2] + camera.cy
        a = torch.stack([sx[0::2], sy[0::2]], 1)
        b = torch.stack([sx[1::2], sy[1::2]], 1)
        bp = vis.band_pixels
        p = torch.as_tensor(np.stack([bp % W + 0.5, bp // W + 0.5], 1), dtype=dtype)
        ab = b - a
        ll = (ab * ab).sum(1)
        t = (((p - a) * ab).sum(1) / ll.clamp(min=1e-30)).clamp(0.0, 1.0)
        q = a + t[:, None] * ab - p
        d = torch.sqrt((q * q).sum(1) + 1e-30)
        sign = torch.as_tensor(vis.band_sign, dtype=dtype)
        soft = (0.5 + sign * d).clamp(0.0, 1.0)
        cov = cov.index_put((torch.as_tensor(bp, dtype=torch.long),), soft)
    coverage = cov.reshape(H, W)

    if n_pix == 0:
        z = zeros3.reshape(H, W, 3)
        return RenderBundle(z, z, coverage, z, z, vis, torch.zeros(0, 3, dtype=dtype), V, texture, camera)

    fid = torch.as_tensor(vis.face_id.ravel()[pix], dtype=torch.long)
    tri = mt.faces[fid]
    Vcam = V @ R.T + tr
    A, B, C = Vcam[tri[:, 0]], Vcam[tri[:, 1]], Vcam[tri[:, 2]]
    px = torch.as_tensor(pix % W + 0.5, dtype=dtype)
    py = torch.as_tensor(pix // W + 0.5, dtype=dtype)
    ray = torch.stack([(px - camera.cx) / camera.fx, (py - camera.cy) / camera.fy, torch.ones_like(px)], 1)
    # ray/triangle intersection from the camera origin (perspective-correct barycentrics)
    e1, e2 = B - A, C - A
    pvec = torch.cross(ray, e2, dim=1)
    det = (e1 * pvec).sum(1)
    tvec = -A
    bu = (tvec * pvec).sum(1) / det
    qvec = torch.cross(tvec, e1, dim=1)
    bv = (ray * qvec).sum(1) / det
    bary = torch.stack([1.0 - bu - bv, bu, bv], 1)

    def interp(attr):
        return (bary[:, :, None] * attr[tri]).sum(1)

    P = interp(V)
    to_cam = center - P
    r = torch.sqrt((to_cam * to_cam).sum(1))
    view = to_cam / r[:, None]
    N = _normalize(interp(mt.normals))
    Tv = interp(mt.tangents)
    hand = torch.sign(interp(mt.handedness[:, None])[:, 0])
    hand = torch.where(hand == 0, torch.ones_like(hand), hand)
    uv = (bary[:, :, None] * mt.face_uv[fid]).sum(1)

    mat = split_material(sample_bilinear(texture, uv))

    def shading_normal(N_, T_, n_t):
        Tp = _normalize(T_ - (T_ * N_).sum(1, keepdim=True) * N_)
        Bp = hand[:, None] * torch.cross(N_, Tp, dim=1)
        return _normalize(Tp * n_t[:, 0:1] + Bp * n_t[:, 1:2] + N_ * n_t[:, 2:3])

    S = shading_normal(N, Tv, mat["normal"])
    phi = camera.light_intensity
    rad = shade_brdf(S, view, mat["kd"], mat["ks"], mat["rough"], r, phi)
    rad_geo = shade_brdf(N, view, mat["kd"], mat["ks"], mat["rough"], r, phi)

    # texture-normal delta with geometry held constant
    n_t_det = split_material(sample_bilinear(texture, uv.detach()))["normal"]
    S_det = shading_normal(N.detach(), Tv.detach(), n_t_det)
    delta = S_det - N.detach()

    def scatter(vals):
        return zeros3.index_put((pix_t,), vals).reshape(H, W, 3)

    return RenderBundle(scatter(rad), scatter(rad_geo), coverage, scatter(N), scatter(delta), vis, bary,
                        V, texture, camera)


def _texture_of(atlas):
    if isinstance(atlas, MaterialAtlas):
        return atlas.texture()
    return torch.as_tensor(atlas, dtype=DTYPE) if not torch.is_tensor(atlas) else atlas


def rasterize(mesh: TriangleMesh, atlas, camera: Camera, mode: str = "train",
              visibility: Visibility | None = None, vertices: torch.Tensor | None = None) -> RenderBundle:
    """Render one view.

    ``mode='train'`` keeps the autograd graph (vertex positions become a
    leaf tensor that :func:`backward` differentiates against); ``'eval'``
    renders without it. ``atlas`` is a :class:`MaterialAtlas` or a stitched
    ``(H, W, 10)`` texture. A precomputed ``visibility`` freezes the pixel
    assignment.
    """
    if mode not in ("train", "eval"):
        raise ValueError(f"unknown mode {mode!r}")
    vis = visibility if visibility is not None else compute_visibility(mesh, camera)
    with torch.set_grad_enabled(mode == "train"):
        if vertices is None:
            vertices = torch.tensor(mesh.vertices, dtype=DTYPE, requires_grad=(mode == "train"))
        texture = _texture_of(atlas)
        mt = MeshTensors.build(vertices, mesh)
        bundle = render_view(mt, texture, camera, vis)
    return bundle


def render_numpy(mesh: TriangleMesh, atlas, camera: Camera) -> dict:
    """Convenience forward render returning numpy arrays."""
    b = rasterize(mesh, atlas, camera, mode="eval")
    return {
        "image": b.image.numpy(),
        "image_geo": b.image_geo.numpy(),
        "coverage": b.coverage.numpy(),
        "mask": b.hard_mask,
        "normals_geo": b.normals_geo.numpy(),
        "normal_delta": b.normal_delta.numpy(),
    }


OUTPUTS = ("image", "image_geo", "coverage", "normals_geo", "normal_delta")


def backward(bundle: RenderBundle, adjoints: dict):
    """Vector-Jacobian product of the bundle outputs.

    ``adjoints`` maps output names (see ``OUTPUTS``) to arrays of the same
    shape. Returns ``(vertex_grad (n, 3), texel_grad (H, W, 10))`` as numpy
    arrays; missing dependencies yield zeros.
    """
    v_is_input = bundle.vertices is not None and bundle.vertices.requires_grad
    tex_is_input = bundle.texture is not None and bundle.texture.requires_grad
    if not (v_is_input or tex_is_input):
        raise MissingIntermediates("bundle was rendered in eval mode; re-render with mode='train'")
    outs, grads = [], []
    for name, adj in adjoints.items():
        if name not in OUTPUTS:
            raise KeyError(f"unknown render output {name!r}")
        out = getattr(bundle, name)
        if not out.requires_grad:
            continue
        outs.append(out)
        grads.append(torch.as_tensor(np.asarray(adj), dtype=out.dtype).reshape(out.shape))
    inputs = ([bundle.vertices] if v_is_input else []) + ([bundle.texture] if tex_is_input else [])
    if not outs:
        g = [None] * len(inputs)
    else:
        g = list(torch.autograd.grad(outs, inputs, grads, retain_graph=True, allow_unused=True))
    gv_t = g.pop(0) if v_is_input else None
    gt_t = g.pop(0) if tex_is_input else None
    gv = np.zeros(tuple(bundle.vertices.shape)) if gv_t is None else gv_t.detach().numpy()
    if gt_t is not None:
        gt = gt_t.detach().numpy()
    elif bundle.texture is not None:
        gt = np.zeros(tuple(bundle.texture.shape))
    else:
        gt = None
    return gv, gt
