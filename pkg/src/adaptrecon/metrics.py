"""Image and surface error metrics."""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
from scipy import ndimage
from scipy.spatial import cKDTree

from .mesh import TriangleMesh

PSNR_CAP = 99.0
SSIM_SIGMA = 1.5
SSIM_RADIUS = 5  # 11x11 window
SSIM_K1, SSIM_K2 = 0.01, 0.03


def mse(a: np.ndarray, b: np.ndarray) -> float:
    return float(np.mean((np.asarray(a, dtype=np.float64) - np.asarray(b, dtype=np.float64)) ** 2))


def psnr(a: np.ndarray, b: np.ndarray, peak: float = 1.0) -> float:
    """Peak signal-to-noise ratio in dB; identical images report ``PSNR_CAP``."""
    e = mse(a, b)
    if e == 0:
        return PSNR_CAP
    return float(min(PSNR_CAP, 10.0 * math.log10(peak * peak / e)))


def _gauss(x):
    return ndimage.gaussian_filter(x, SSIM_SIGMA, truncate=SSIM_RADIUS / SSIM_SIGMA, mode="reflect")


def ssim(a: np.ndarray, b: np.ndarray, data_range: float = 1.0) -> float:
    """Mean structural similarity with an 11x11 Gaussian window (sigma 1.5), averaged over channels.

    Border texels whose window leaves the image are excluded from the mean.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    if a.shape != b.shape:
        raise ValueError("images must have the same shape")
    if a.ndim == 2:
        a, b = a[..., None], b[..., None]
    c1 = (SSIM_K1 * data_range) ** 2
    c2 = (SSIM_K2 * data_range) ** 2
    vals = []
    for ch in range(a.shape[-1]):
        x, y = a[..., ch], b[..., ch]
        mx, my = _gauss(x), _gauss(y)
        sxx = _gauss(x * x) - mx * mx
        syy = _gauss(y * y) - my * my
        sxy = _gauss(x * y) - mx * my
        s = ((2 * mx * my + c1) * (2 * sxy + c2)) / ((mx * mx + my * my + c1) * (sxx + syy + c2))
        r = SSIM_RADIUS
        vals.append(s[r:-r, r:-r].mean())
    return float(np.mean(vals))


def sample_surface(mesh: TriangleMesh, n: int, rng: np.random.Generator) -> np.ndarray:
    """Area-uniform random points on the surface."""
    area = mesh.face_areas()
    if area.sum() <= 0:
        raise ValueError("mesh has no area")
    f = rng.choice(mesh.n_faces, size=n, p=area / area.sum())
    r1, r2 = rng.random(n), rng.random(n)
    s = np.sqrt(r1)
    w = np.stack([1 - s, s * (1 - r2), s * r2], axis=1)
    return np.einsum("nk,nkd->nd", w, mesh.vertices[mesh.faces[f]])


def chamfer_hausdorff(a: TriangleMesh, b: TriangleMesh, n_samples: int = 100_000, seed: int = 0):
    """Symmetric mean (Chamfer) and max (Hausdorff) nearest-neighbor distance between surface samples.

    Both meshes are sampled with generators seeded identically, so a mesh
    compared with itself yields exactly zero.
    """
    pa = sample_surface(a, n_samples, np.random.default_rng(seed))
    pb = sample_surface(b, n_samples, np.random.default_rng(seed))
    d_ab, _ = cKDTree(pb).query(pa)
    d_ba, _ = cKDTree(pa).query(pb)
    cd = 0.5 * (d_ab.mean() + d_ba.mean())
    hd = max(d_ab.max(), d_ba.max())
    return float(cd), float(hd)


@dataclass
class MetricsReport:
    mse: list = field(default_factory=list)
    psnr: list = field(default_factory=list)
    ssim: list = field(default_factory=list)
    chamfer: float | None = None
    hausdorff: float | None = None
    n_vertices: int | None = None

    @property
    def mean_psnr(self) -> float:
        return float(np.mean(self.psnr)) if self.psnr else float("nan")

    def to_dict(self) -> dict:
        d = asdict(self)
        d["mean_mse"] = float(np.mean(self.mse)) if self.mse else None
        d["mean_psnr"] = self.mean_psnr if self.psnr else None
        d["mean_ssim"] = float(np.mean(self.ssim)) if self.ssim else None
        return d

    def save(self, path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2, sort_keys=True))


def image_metrics(pred: list, ref: list, report: MetricsReport | None = None) -> MetricsReport:
    report = report or MetricsReport()
    for p, r in zip(pred, ref):
        p = np.clip(p, 0.0, 1.0)
        r = np.clip(r, 0.0, 1.0)
        report.mse.append(mse(p, r))
        report.psnr.append(psnr(p, r))
        report.ssim.append(ssim(p, r))
    return report


def compute_metrics(mesh: TriangleMesh, texture, cameras: list, truth=None, references: list | None = None,
                    n_samples: int = 100_000, seed: int = 0) -> MetricsReport:
    """Score a reconstruction.

    With ``truth`` the reference images are truth renders from ``cameras`` and
    surface distances are included. Without it ``references`` (captured
    images for ``cameras``) are required and only image metrics are reported.
    """
    from .scene import render_views

    if truth is None and references is None:
        raise ValueError("need either truth assets or reference images")
    preds, _ = render_views(mesh, texture, cameras)
    report = MetricsReport(n_vertices=int(mesh.n_vertices))
    if truth is not None:
        references, _ = render_views(truth.mesh, truth.texture, cameras)
        report.chamfer, report.hausdorff = chamfer_hausdorff(mesh, truth.mesh, n_samples, seed)
    return image_metrics(preds, references, report)
