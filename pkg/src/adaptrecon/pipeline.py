"""Reconstruction driver: visual-hull start, epoch loop, remesh events and checkpoints."""
from __future__ import annotations

import csv
import dataclasses
import json
import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import scipy.sparse as sp
import torch
from scipy import ndimage
from scipy.sparse.csgraph import connected_components
from skimage.measure import marching_cubes

from .atlas import MaterialAtlas, TileDecoder
from .mesh import (TriangleMesh, UnitBoxTransform, build_laplacian, check_manifold, mesh_curvature,
                   normalize_to_unit_box, spherical_uvs)
from .objectives import (W_MESH_CURV, W_NORMAL_CURV, LossParts, LossWeights, ScheduleClock, control_damping,
                         edge_field, effective_mask, image_loss, lambda_field, loss_damping, normal_loss, one_ring_mean,
                         silhouette_loss, total_loss)
from .raster import MeshTensors, compute_visibility, render_view
from .remesh import E_MAX, REMESH_INTERVAL, EdgeIndicatorField, remesh_step
from .scene import CaptureSet
from .solver import LAMBDA_MAX, LambdaField, SolverConfig, SolverError, preconditioned_step

log = logging.getLogger(__name__)

SCHEMA_VERSION = 1
LOG_COLUMNS = ("epoch", "t", "loss", "loss_img", "loss_sil", "loss_normal", "n_vertices", "s_loss", "s_control")
ALL_VIEWS_LIMIT = 30
EVENT_ARRAYS = ("curvature", "splits", "faces", "vertices")


class HullError(ValueError):
    """The masks carve away the whole volume."""


class CheckpointError(ValueError):
    pass


class ReconstructionError(RuntimeError):
    def __init__(self, message, checkpoint=None):
        super().__init__(message)
        self.checkpoint = checkpoint


# --------------------------------------------------------------------------- visual hull

def _largest_component(verts, faces):
    n = len(verts)
    rows = np.concatenate([faces[:, 0], faces[:, 1], faces[:, 2]])
    cols = np.concatenate([faces[:, 1], faces[:, 2], faces[:, 0]])
    A = sp.coo_matrix((np.ones(len(rows)), (rows, cols)), shape=(n, n))
    _, label = connected_components(A, directed=False)
    face_label = label[faces[:, 0]]
    best = np.bincount(face_label).argmax()
    faces = faces[face_label == best]
    used = np.unique(faces)
    remap = -np.ones(n, dtype=np.int64)
    remap[used] = np.arange(len(used))
    return verts[used], remap[faces]


def _signed_distance_px(mask: np.ndarray) -> np.ndarray:
    """Signed distance (pixels, positive inside) to the boundary between pixel centers."""
    inside = ndimage.distance_transform_edt(mask)
    outside = ndimage.distance_transform_edt(~mask)
    return np.where(mask, inside - 0.5, 0.5 - outside)


def visual_hull(masks, cameras, resolution: int = 32) -> TriangleMesh:
    """Carve a voxel grid over ``[-1, 1]^3`` with the silhouettes and extract its surface.

    Each voxel center gets the minimum over the views that see it of its
    signed distance to the silhouette boundary, converted from pixels to
    world units at the center's depth; a center is kept (value > 0) when it
    lands inside every such mask. Marching cubes on this field places the
    surface between voxel centers, which avoids the voxel staircase. The
    largest connected component is kept, oriented outward, with spherical
    UVs about its centroid.
    """
    if len(masks) != len(cameras) or not masks:
        raise ValueError("need one mask per camera and at least one view")
    R = int(resolution)
    if R < 2:
        raise ValueError("resolution must be at least 2")
    h = 2.0 / R
    c = -1.0 + (np.arange(R) + 0.5) * h
    P = np.stack(np.meshgrid(c, c, c, indexing="ij"), -1).reshape(-1, 3)
    field = np.full(len(P), 2.0 * h)
    for mask, cam in zip(masks, cameras):
        mask = np.asarray(mask) > 0.5
        p = cam.project(P)
        seen = (p[:, 2] > 0) & (p[:, 0] >= 0) & (p[:, 0] < cam.width) & (p[:, 1] >= 0) & (p[:, 1] < cam.height)
        sd = ndimage.map_coordinates(_signed_distance_px(mask), [p[seen, 1] - 0.5, p[seen, 0] - 0.5],
                                     order=1, mode="nearest")
        field[seen] = np.minimum(field[seen], sd * p[seen, 2] / cam.fx)
    vol = np.clip(field.reshape(R, R, R), -2.0 * h, 2.0 * h)
    if not (vol > 0).any():
        raise HullError("visual hull is empty; masks are inconsistent with the cameras")
    vol = np.pad(vol, 1, constant_values=-2.0 * h)
    verts, faces, _, _ = marching_cubes(vol, 0.0, spacing=(h, h, h), allow_degenerate=False)
    verts = verts - 1.0 - 0.5 * h
    verts, faces = _largest_component(verts, faces.astype(np.int64))
    a, b, cc = (verts[faces[:, k]] for k in range(3))
    if np.einsum("ij,ij->i", a, np.cross(b, cc)).sum() < 0:  # orient outward
        faces = faces[:, ::-1].copy()
    mesh = TriangleMesh(verts, faces, spherical_uvs(verts))
    check_manifold(mesh)
    return mesh


# --------------------------------------------------------------------------- config and state

@dataclass
class ReconstructionConfig:
    epochs: int = 600
    step_size: float = 10.0
    step_decay: float = 1.0
    solver_tol: float = 1e-8
    solver_max_iter: int | None = None
    grid: tuple = (4, 4)
    profile: str = "synthetic"
    hull_resolution: int = 6
    views_per_epoch: int = 16
    seed: int = 0
    texel_lr: float = 1e-2
    remesh_interval: int = REMESH_INTERVAL
    remesh: bool = True
    local_lambda: bool = True
    backend: str = "direct"

    def __post_init__(self):
        self.grid = tuple(int(g) for g in self.grid)
        positive = {"epochs": self.epochs, "step_size": self.step_size, "solver_tol": self.solver_tol,
                    "hull_resolution": self.hull_resolution, "views_per_epoch": self.views_per_epoch,
                    "texel_lr": self.texel_lr, "remesh_interval": self.remesh_interval}
        for name, val in positive.items():
            if not val > 0:
                raise ValueError(f"{name} must be positive, got {val}")
        if not 0 < self.step_decay <= 1:
            raise ValueError("step_decay must lie in (0, 1]")
        if self.seed < 0:
            raise ValueError("seed must be nonnegative")
        if self.solver_max_iter is not None and self.solver_max_iter < 1:
            raise ValueError("solver_max_iter must be >= 1")
        if len(self.grid) != 2 or min(self.grid) < 1:
            raise ValueError("grid must be two positive tile counts")
        if self.profile not in ("synthetic", "real"):
            raise ValueError(f"profile must be 'synthetic' or 'real', got {self.profile!r}")
        if self.backend not in ("direct", "decoder"):
            raise ValueError(f"backend must be 'direct' or 'decoder', got {self.backend!r}")

    def to_dict(self) -> dict:
        d = dataclasses.asdict(self)
        d["grid"] = list(self.grid)
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "ReconstructionConfig":
        known = {f.name for f in dataclasses.fields(cls)}
        unknown = set(d) - known
        if unknown:
            raise ValueError(f"unknown config keys: {sorted(unknown)}")
        return cls(**d)

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2))

    @classmethod
    def load(cls, path) -> "ReconstructionConfig":
        return cls.from_dict(json.loads(Path(path).read_text()))

    def step_at(self, t: float) -> float:
        """Vertex step size: cosine decay from ``step_size`` to ``step_decay * step_size``."""
        return self.step_size * (self.step_decay + (1 - self.step_decay) * 0.5 * (1 + math.cos(math.pi * t)))

    def solver_at(self, t: float) -> SolverConfig:
        return SolverConfig(tol=self.solver_tol, max_iter=self.solver_max_iter, step_size=self.step_at(t))


@dataclass
class OptimizerState:
    """Everything besides mesh and atlas that the epoch loop carries forward."""

    clock: ScheduleClock
    lam: LambdaField
    edge: EdgeIndicatorField
    acc_cn: np.ndarray
    acc_cv: np.ndarray
    acc_count: int = 0
    remesh_interval: int = REMESH_INTERVAL
    rng: np.random.Generator = field(default_factory=np.random.default_rng)

    @classmethod
    def initial(cls, n_vertices: int, cfg: ReconstructionConfig) -> "OptimizerState":
        return cls(ScheduleClock(0, cfg.epochs), lambda_field(np.zeros(n_vertices), 0.0),
                   EdgeIndicatorField.constant(n_vertices, E_MAX), np.zeros(n_vertices), np.zeros(n_vertices),
                   0, cfg.remesh_interval, np.random.default_rng(cfg.seed))

    def reset_window(self, n_vertices: int) -> None:
        self.acc_cn = np.zeros(n_vertices)
        self.acc_cv = np.zeros(n_vertices)
        self.acc_count = 0


def _extend_by_ring(values: np.ndarray, mesh: TriangleMesh, n_old: int, parents: np.ndarray) -> np.ndarray:
    """Values for appended vertices: mean over their pre-existing one-ring neighbors."""
    out = np.concatenate([values, np.zeros(mesh.n_vertices - n_old)])
    A = mesh.neighbors
    for k in range(n_old, mesh.n_vertices):
        nb = A.indices[A.indptr[k]:A.indptr[k + 1]]
        nb = nb[nb < n_old]
        out[k] = values[nb].mean() if len(nb) else values[parents[k - n_old]].mean()
    return out


# --------------------------------------------------------------------------- driver

def _make_atlas(cfg: ReconstructionConfig) -> MaterialAtlas:
    if cfg.backend == "direct":
        return MaterialAtlas.direct(cfg.grid)
    return MaterialAtlas(TileDecoder(cfg.grid, seed=cfg.seed))


class Reconstructor:
    """Stateful epoch loop; :meth:`step` runs one epoch.

    Geometry is optimized in the unit-box frame of the initial mesh;
    :meth:`export_mesh` maps it back to scene units.
    """

    def __init__(self, capture: CaptureSet, cfg: ReconstructionConfig, *, mesh: TriangleMesh | None = None,
                 atlas: MaterialAtlas | None = None, _restore: dict | None = None):
        self.capture = capture
        self.cfg = cfg
        self.weights = LossWeights.from_profile(cfg.profile)
        if _restore is not None:
            self.transform = _restore["transform"]
            self.mesh = _restore["mesh"]
        else:
            if mesh is None:
                mesh = visual_hull(capture.masks, capture.cameras, cfg.hull_resolution)
            self.mesh, _, self.transform = normalize_to_unit_box(mesh)
            if self.mesh.uvs is None:
                self.mesh = TriangleMesh(self.mesh.vertices, self.mesh.faces, spherical_uvs(self.mesh.vertices))
        self.cameras = [self.transform.camera_to_normalized(c) for c in capture.cameras]
        self.images = [torch.as_tensor(np.asarray(i, dtype=np.float64)) for i in capture.images]
        self.masks = [torch.as_tensor(np.asarray(m, dtype=np.float64)) for m in capture.masks]
        self.atlas = atlas if atlas is not None else _make_atlas(cfg)
        self.optimizer = torch.optim.Adam(self.atlas.parameters(), lr=cfg.texel_lr)
        self.L = build_laplacian(self.mesh)
        self.state = OptimizerState.initial(self.mesh.n_vertices, cfg)
        if cfg.local_lambda is False:
            self.state.lam = LambdaField.constant(self.mesh.n_vertices, LAMBDA_MAX)
        self.history: list[dict] = []
        self.remesh_events: list[dict] = []

    # -- one epoch -------------------------------------------------------

    def _views(self) -> np.ndarray:
        n = len(self.cameras)
        if n <= ALL_VIEWS_LIMIT:
            return np.arange(n)
        return np.sort(self.state.rng.choice(n, size=min(self.cfg.views_per_epoch, n), replace=False))

    def _loss(self, V: torch.Tensor, views):
        t = self.state.clock.t
        tex = self.atlas.texture()
        mt = MeshTensors.build(V, self.mesh)
        total = 0.0
        parts_sum = np.zeros(3)
        delta_sum, delta_count = 0.0, 0
        for k in views:
            cam = self.cameras[k]
            b = render_view(mt, tex, cam, compute_visibility(self.mesh, cam))
            M = self.masks[k]
            m = effective_mask(M, b.coverage)
            parts = LossParts(image_loss(b.image, b.image_geo, self.images[k], m),
                              silhouette_loss(b.coverage, M),
                              normal_loss(b.normal_delta, b.normals_geo, m))
            total = total + total_loss(parts, self.weights, t)
            parts_sum += [float(parts.img.detach()), float(parts.sil.detach()), float(parts.normal.detach())]
            with torch.no_grad():
                sel = m > 0
                delta_sum += float(b.normal_delta[sel].norm(dim=-1).sum())
                delta_count += int(sel.sum())
        n = len(views)
        return total / n, parts_sum / n, delta_sum / max(delta_count, 1)

    def step(self) -> dict:
        st = self.state
        epoch, t = st.clock.epoch, st.clock.t
        V = torch.tensor(self.mesh.vertices, dtype=torch.float64, requires_grad=True)
        loss, parts, delta = self._loss(V, self._views())
        if not torch.isfinite(loss):
            raise ReconstructionError(f"loss became {float(loss)} at epoch {epoch}")
        self.optimizer.zero_grad()
        loss.backward()
        grad = V.grad.numpy()
        new_vertices = preconditioned_step(self.mesh, grad, st.lam, self.L, self.cfg.solver_at(t))
        self.optimizer.step()
        self.atlas.project_()
        self.mesh = self.mesh.with_vertices(new_vertices)

        st.acc_cn += self.atlas.curvature(self.mesh.uvs)
        st.acc_cv += mesh_curvature(self.mesh, self.L)
        st.acc_count += 1
        st.clock.advance()
        record = {"epoch": epoch, "t": t, "loss": float(loss.detach()), "loss_img": parts[0],
                  "loss_sil": parts[1], "loss_normal": parts[2], "n_vertices": self.mesh.n_vertices,
                  "s_loss": float(loss_damping(t)), "s_control": float(control_damping(t)), "delta": delta}
        self.history.append(record)
        if st.clock.epoch % st.remesh_interval == 0 and st.clock.epoch < st.clock.total:
            self._remesh_event()
        return record

    def _remesh_event(self) -> None:
        st = self.state
        t = st.clock.t
        cn = st.acc_cn / st.acc_count
        cv = st.acc_cv / st.acc_count
        n_old = self.mesh.n_vertices
        lam = lambda_field(cn, t) if self.cfg.local_lambda else LambdaField.constant(n_old, LAMBDA_MAX, t)
        edge = edge_field(cn, cv, t, self.mesh)
        event = {"epoch": st.clock.epoch, "t": t, "n_split": 0, "n_flips": 0,
                 "curvature": W_MESH_CURV * cv + W_NORMAL_CURV * cn, "splits": np.zeros(n_old, dtype=np.int64),
                 "faces": self.mesh.faces.copy(), "vertices": self.mesh.vertices.copy()}
        if self.cfg.remesh:
            mesh, rep = remesh_step(self.mesh, edge)
            event["n_split"] = rep.split.n_split
            event["n_flips"] = rep.flip.n_flips
            np.add.at(event["splits"], rep.split.split_edges.ravel(), 1)
            parents = rep.split.parents
            if mesh.n_vertices > n_old:
                lam = LambdaField(_extend_by_ring(lam.values, mesh, n_old, parents), t)
                edge = EdgeIndicatorField(_extend_by_ring(edge.values, mesh, n_old, parents), edge.smoothed)
            if mesh is not self.mesh:
                self.mesh = mesh
                self.L = build_laplacian(mesh)
            log.info("epoch %d: %d splits, %d flips, %d vertices", st.clock.epoch, rep.split.n_split,
                     rep.flip.n_flips, mesh.n_vertices)
        st.lam, st.edge = lam, edge
        st.reset_window(self.mesh.n_vertices)
        self.remesh_events.append(event)

    # -- driving ----------------------------------------------------------

    def run(self, epochs: int | None = None, *, checkpoint_path=None, callback=None) -> list:
        """Run ``epochs`` more epochs (default: until the clock finishes)."""
        remaining = self.state.clock.total - self.state.clock.epoch
        n = remaining if epochs is None else min(epochs, remaining)
        for _ in range(n):
            snapshot = self.snapshot() if checkpoint_path is not None else None
            try:
                rec = self.step()
            except (ReconstructionError, SolverError) as err:
                path = None
                if snapshot is not None:
                    path = Path(checkpoint_path)
                    _write_archive(path, *snapshot)
                raise ReconstructionError(f"reconstruction aborted: {err}", checkpoint=path) from err
            if callback is not None:
                callback(self, rec)
        return self.history

    # -- results ----------------------------------------------------------

    def export_mesh(self) -> TriangleMesh:
        return self.mesh.with_vertices(self.transform.to_original(self.mesh.vertices))

    def texture(self) -> np.ndarray:
        with torch.no_grad():
            return self.atlas.texture().numpy().copy()

    def write_log(self, path) -> None:
        write_log(self.history, path)

    # -- checkpointing ----------------------------------------------------

    def snapshot(self):
        st = self.state
        opt_sd = self.optimizer.state_dict()
        header = {
            "schema_version": SCHEMA_VERSION,
            "config": self.cfg.to_dict(),
            "epoch": st.clock.epoch,
            "total": st.clock.total,
            "acc_count": st.acc_count,
            "remesh_interval": st.remesh_interval,
            "lam_t": st.lam.t,
            "edge_smoothed": st.edge.smoothed,
            "transform": {"center": self.transform.center.tolist(), "scale": self.transform.scale},
            "atlas": {"kind": self.atlas.kind, "overlap": self.atlas.overlap},
            "rng": st.rng.bit_generator.state,
            "optimizer": {"param_groups": opt_sd["param_groups"],
                          "state_keys": {str(k): sorted(v) for k, v in opt_sd["state"].items()}},
            "history": self.history,
            "remesh_events": [{k: v for k, v in e.items() if k not in EVENT_ARRAYS} for e in self.remesh_events],
        }
        arrays = {
            "vertices": self.mesh.vertices, "faces": self.mesh.faces, "uvs": self.mesh.uvs,
            "lam": st.lam.values, "edge": st.edge.values, "acc_cn": st.acc_cn, "acc_cv": st.acc_cv,
        }
        for name, tensor in self.atlas.backend.state_dict().items():
            arrays[f"atlas/{name}"] = tensor.detach().numpy()
        for k, v in opt_sd["state"].items():
            for name, tensor in v.items():
                arrays[f"opt/{k}/{name}"] = tensor.detach().numpy() if torch.is_tensor(tensor) else np.asarray(tensor)
        for i, e in enumerate(self.remesh_events):
            for name in EVENT_ARRAYS:
                arrays[f"event/{i}/{name}"] = e[name]
        return header, {k: np.array(v, copy=True) for k, v in arrays.items()}

    def checkpoint(self, path) -> Path:
        path = Path(path)
        _write_archive(path, *self.snapshot())
        return path

    @classmethod
    def restore(cls, path, capture: CaptureSet) -> "Reconstructor":
        with np.load(Path(path), allow_pickle=False) as z:
            header = json.loads(str(z["header"]))
            if header.get("schema_version") != SCHEMA_VERSION:
                raise CheckpointError(f"checkpoint schema {header.get('schema_version')} != {SCHEMA_VERSION}")
            arrays = {k: z[k] for k in z.files if k != "header"}
        cfg = ReconstructionConfig.from_dict(header["config"])
        mesh = TriangleMesh(arrays["vertices"], arrays["faces"], arrays["uvs"])
        tf = UnitBoxTransform(np.asarray(header["transform"]["center"]), float(header["transform"]["scale"]))
        atlas = _make_atlas(cfg)
        atlas.overlap = header["atlas"]["overlap"]
        sd = {k[len("atlas/"):]: torch.as_tensor(v) for k, v in arrays.items() if k.startswith("atlas/")}
        atlas.backend.load_state_dict(sd)
        obj = cls(capture, cfg, atlas=atlas, _restore={"mesh": mesh, "transform": tf})
        opt_state = {}
        for k, names in header["optimizer"]["state_keys"].items():
            opt_state[int(k)] = {n: torch.as_tensor(arrays[f"opt/{k}/{n}"]) for n in names}
        groups = [{k: tuple(v) if isinstance(v, list) and k != "params" else v for k, v in g.items()}
                  for g in header["optimizer"]["param_groups"]]
        obj.optimizer.load_state_dict({"state": opt_state, "param_groups": groups})
        st = obj.state
        st.clock = ScheduleClock(header["epoch"], header["total"])
        st.lam = LambdaField(arrays["lam"], header["lam_t"])
        st.edge = EdgeIndicatorField(arrays["edge"], header["edge_smoothed"])
        st.acc_cn, st.acc_cv = arrays["acc_cn"].copy(), arrays["acc_cv"].copy()
        st.acc_count = header["acc_count"]
        st.remesh_interval = header["remesh_interval"]
        st.rng.bit_generator.state = header["rng"]
        obj.history = header["history"]
        obj.remesh_events = []
        for i, e in enumerate(header["remesh_events"]):
            e = dict(e)
            for name in EVENT_ARRAYS:
                e[name] = arrays[f"event/{i}/{name}"]
            obj.remesh_events.append(e)
        return obj


def _write_archive(path: Path, header: dict, arrays: dict) -> None:
    path.parent.mkdir(parents=True, exist_ok=True)
    with open(path, "wb") as fh:
        np.savez_compressed(fh, header=np.array(json.dumps(header)), **arrays)


def write_log(history: list, path) -> None:
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(LOG_COLUMNS)
        for rec in history:
            w.writerow([rec[c] if isinstance(rec[c], int) else f"{rec[c]:.10g}" for c in LOG_COLUMNS])


def _vertex_areas(mesh: TriangleMesh) -> np.ndarray:
    area = np.zeros(mesh.n_vertices)
    np.add.at(area, mesh.faces.ravel(), np.repeat(mesh.face_areas() / 3.0, 3))
    return area


def split_curvature_correlation(events: list, t_min: float = 0.3) -> float:
    """Pearson correlation between local split density and windowed curvature.

    Per vertex of the mesh before each remesh event, split density is the
    number of split edges touching its one-ring divided by the one-ring area,
    and curvature is the one-ring mean of ``w_V c_V + w_n c_n``. Vertices of
    all events at ``t >= t_min`` that performed splits are pooled.
    """
    xs, ys = [], []
    for e in events:
        if e["t"] < t_min or e["n_split"] == 0:
            continue
        mesh = TriangleMesh(e["vertices"], e["faces"])
        xs.append(one_ring_mean(mesh, e["curvature"]))
        ys.append(one_ring_mean(mesh, e["splits"].astype(np.float64)) / one_ring_mean(mesh, _vertex_areas(mesh)))
    if not xs:
        return float("nan")
    x, y = np.concatenate(xs), np.concatenate(ys)
    if x.std() == 0 or y.std() == 0:
        return float("nan")
    return float(np.corrcoef(x, y)[0, 1])


def reconstruct(capture: CaptureSet, cfg: ReconstructionConfig, *, mesh: TriangleMesh | None = None,
                atlas: MaterialAtlas | None = None, out_dir=None, callback=None):
    """Run a full reconstruction.

    Returns ``(mesh in scene units, atlas, history)``. With ``out_dir`` the
    mesh, texture maps, progress log and (on failure) a checkpoint are written there.
    """
    rec = Reconstructor(capture, cfg, mesh=mesh, atlas=atlas)
    ckpt = None if out_dir is None else Path(out_dir) / "checkpoint.npz"
    rec.run(checkpoint_path=ckpt, callback=callback)
    if out_dir is not None:
        write_outputs(rec, out_dir)
    return rec.export_mesh(), rec.atlas, rec.history


def write_outputs(rec: Reconstructor, out_dir) -> Path:
    from .atlas import save_texture
    from .mesh import save_obj

    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_obj(rec.export_mesh(), out / "mesh.obj")
    save_texture(rec.texture(), out / "texture")
    rec.write_log(out / "log.csv")
    return out



__all__ = [
    "CheckpointError", "HullError", "OptimizerState", "ReconstructionConfig", "ReconstructionError",
    "Reconstructor", "reconstruct", "split_curvature_correlation", "visual_hull", "write_log", "write_outputs",
]
