"""Procedural truth objects, synthetic capture generation and scene bundles on disk.

Bundle layout::

    images/NNN.exr   linear radiance
    images/NNN.png   sRGB preview
    masks/NNN.png    binary coverage
    cameras.json     per-view camera records
    truth/           mesh.obj + texture maps (optional)
"""
from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .atlas import DEFAULT_MATERIAL, load_texture, save_texture, stitched_size
from .camera import Camera, fibonacci_sphere, look_at
from .imageio import read_exr, read_png, write_exr, write_png
from .mesh import TriangleMesh, icosphere, load_obj, save_obj, spherical_uvs
from .raster import render_numpy

CAMERA_DISTANCE = 3.2
FOV_DEG = 50.0
LIGHT_INTENSITY = 13.0
HELDOUT_SEED_OFFSET = 7919


@dataclass
class CaptureSet:
    images: list
    masks: list
    cameras: list

    def __post_init__(self):
        if not (len(self.images) == len(self.masks) == len(self.cameras)):
            raise ValueError("images, masks and cameras must have equal counts")

    def __len__(self):
        return len(self.cameras)


@dataclass
class Truth:
    mesh: TriangleMesh
    texture: np.ndarray  # stitched (H, W, 10)


def bumpy_sphere(radius: float = 0.8, n_bumps: int = 40, amplitude=(0.04, 0.08), width=(0.12, 0.22),
                 subdivisions: int = 5, seed: int = 0) -> TriangleMesh:
    """Sphere with Gaussian bumps and dents displaced along the radius."""
    rng = np.random.default_rng(seed)
    base = icosphere(subdivisions)
    d = base.vertices
    centers = fibonacci_sphere(n_bumps, rng=rng)
    amp = rng.uniform(*amplitude, n_bumps) * rng.choice([-1.0, 1.0], n_bumps)
    sig = rng.uniform(*width, n_bumps)
    r = radius + (amp * np.exp(-(1.0 - d @ centers.T) / sig**2)).sum(1)
    V = d * r[:, None]
    return TriangleMesh(V, base.faces, spherical_uvs(V, np.zeros(3)))


def truth_texture(grid=(2, 2), seed: int = 0) -> np.ndarray:
    """Smooth two-color diffuse pattern, constant specular/roughness, flat normals."""
    rng = np.random.default_rng(seed)
    H, W = stitched_size(grid[0]), stitched_size(grid[1])
    v = (np.arange(H) + 0.5)[:, None] / H
    u = (np.arange(W) + 0.5)[None, :] / W
    k = rng.integers(2, 4)
    pattern = 0.5 + 0.5 * np.sin(2 * np.pi * k * u + rng.uniform(0, 2 * np.pi)) * np.sin(np.pi * 2 * v)
    c0, c1 = rng.uniform(0.25, 0.8, 3), rng.uniform(0.25, 0.8, 3)
    tex = np.empty((H, W, 10))
    tex[..., 0:3] = pattern[..., None] * c0 + (1 - pattern[..., None]) * c1
    tex[..., 3:6] = 0.08
    tex[..., 6] = 0.45
    tex[..., 7:] = DEFAULT_MATERIAL[7:]
    return tex


def default_truth(seed: int = 0) -> Truth:
    return Truth(bumpy_sphere(seed=seed), truth_texture(seed=seed))


def view_cameras(n: int, resolution: int, seed: int, distance: float = CAMERA_DISTANCE, fov_deg: float = FOV_DEG,
                 light_intensity: float = LIGHT_INTENSITY) -> list:
    eyes = fibonacci_sphere(n, distance, np.random.default_rng(seed))
    return [look_at(e, width=resolution, height=resolution, fov_deg=fov_deg, light_intensity=light_intensity)
            for e in eyes]


def heldout_cameras(n: int, resolution: int, seed: int, **kw) -> list:
    """Views disjoint from the training set (different Fibonacci rotation)."""
    return view_cameras(n, resolution, seed + HELDOUT_SEED_OFFSET, **kw)


def render_views(mesh: TriangleMesh, texture, cameras) -> tuple[list, list]:
    tex = torch.as_tensor(np.asarray(texture, dtype=np.float64)) if not torch.is_tensor(texture) else texture
    images, masks = [], []
    for cam in cameras:
        out = render_numpy(mesh, tex, cam)
        images.append(out["image"])
        masks.append(out["mask"])
    return images, masks


def write_bundle(out_dir, capture: CaptureSet, truth: Truth | None = None) -> Path:
    out = Path(out_dir)
    (out / "images").mkdir(parents=True, exist_ok=True)
    (out / "masks").mkdir(parents=True, exist_ok=True)
    for k, (img, mask) in enumerate(zip(capture.images, capture.masks)):
        write_exr(out / "images" / f"{k:03d}.exr", img)
        write_png(out / "images" / f"{k:03d}.png", img, srgb=True)
        write_png(out / "masks" / f"{k:03d}.png", np.asarray(mask, dtype=np.float64))
    records = [c.to_dict() for c in capture.cameras]
    (out / "cameras.json").write_text(json.dumps({"version": 1, "views": records}, indent=1))
    if truth is not None:
        (out / "truth").mkdir(exist_ok=True)
        save_obj(truth.mesh, out / "truth" / "mesh.obj")
        save_texture(truth.texture, out / "truth")
    return out


def gen_synthetic(out_dir, n_views: int = 20, resolution: int = 128, seed: int = 0,
                  truth: Truth | None = None) -> CaptureSet:
    """Render a truth object from Fibonacci-sphere views and write the bundle."""
    truth = truth or default_truth(seed)
    cams = view_cameras(n_views, resolution, seed)
    images, masks = render_views(truth.mesh, truth.texture, cams)
    capture = CaptureSet(images, masks, cams)
    write_bundle(out_dir, capture, truth)
    return capture


def load_capture(scene_dir) -> CaptureSet:
    d = Path(scene_dir)
    meta = json.loads((d / "cameras.json").read_text())
    cams = [Camera.from_dict(r) for r in meta["views"]]
    images, masks = [], []
    for k in range(len(cams)):
        img_path = d / "images" / f"{k:03d}.exr"
        mask_path = d / "masks" / f"{k:03d}.png"
        if not img_path.exists() or not mask_path.exists():
            raise FileNotFoundError(f"view {k:03d} is missing its image or mask")
        images.append(read_exr(img_path))
        m = read_png(mask_path)
        masks.append((m[..., 0] if m.ndim == 3 else m) > 0.5)
    return CaptureSet(images, masks, cams)


def load_truth(scene_dir) -> Truth | None:
    d = Path(scene_dir) / "truth"
    if not (d / "mesh.obj").exists():
        return None
    return Truth(load_obj(d / "mesh.obj"), load_texture(d))
