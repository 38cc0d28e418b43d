"""Losses, stop-gradient routing and the damping schedules that drive refinement."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np
import torch

from .remesh import E_MAX, E_MIN, EdgeIndicatorField
from .solver import LAMBDA_MAX, LAMBDA_MIN, LambdaField

W_NORMAL_CURV = 3.0  # weight of the texture-normal curvature
W_MESH_CURV = 1.0 / 16.0  # weight of the mesh curvature
LOG_EPS = 0.01

PROFILES = {
    "synthetic": (0.05, 1.0, 0.01),
    "real": (1e-3, 1.0, 1e-4),
}


@dataclass(frozen=True)
class LossWeights:
    w_img: float
    w_sil: float
    w_normal: float
    profile: str = "custom"

    @classmethod
    def from_profile(cls, profile: str) -> "LossWeights":
        if profile not in PROFILES:
            raise ValueError(f"unknown weight profile {profile!r}")
        return cls(*PROFILES[profile], profile=profile)

    def __post_init__(self):
        if min(self.w_img, self.w_sil, self.w_normal) < 0:
            raise ValueError("loss weights must be nonnegative")


@dataclass
class ScheduleClock:
    epoch: int
    total: int

    def __post_init__(self):
        if self.total < 1 or not 0 <= self.epoch <= self.total:
            raise ValueError("epoch must lie in [0, total]")

    @property
    def t(self) -> float:
        return self.epoch / self.total

    def advance(self) -> None:
        if self.epoch >= self.total:
            raise ValueError("clock already finished")
        self.epoch += 1


def _sigmoid(x):
    return 1.0 / (1.0 + np.exp(-x))


def loss_damping(t):
    """Weight ramp for the image and normal losses, 0.5 at ``t = 0.2``."""
    return _sigmoid(20.0 * (np.asarray(t, dtype=np.float64) - 0.2))


def control_damping(t):
    """Later ramp that releases smoothness and resolution, 0.5 at ``t = 0.3``."""
    return _sigmoid(20.0 * (np.asarray(t, dtype=np.float64) - 0.3))


def lambda_min_at(t, lam_min: float = LAMBDA_MIN, lam_max: float = LAMBDA_MAX):
    return np.maximum(lam_min, (1.0 - control_damping(t)) * lam_max)


def e_min_at(t, e_min: float = E_MIN, e_max: float = E_MAX):
    return np.maximum(e_min, (1.0 - control_damping(t)) * e_max)


def _lerp(a, b, s):
    return a + (b - a) * s


def lambda_field(c_n: np.ndarray, t: float, *, w_n: float = W_NORMAL_CURV,
                 lam_min: float = LAMBDA_MIN, lam_max: float = LAMBDA_MAX) -> LambdaField:
    """Per-vertex smoothing: strong where the texture normals are flat, relaxed where they bend."""
    c_n = np.asarray(c_n, dtype=np.float64)
    if np.any(c_n < 0):
        raise ValueError("curvature must be nonnegative")
    s = 1.0 - np.clip(w_n * c_n, 0.0, 1.0)
    return LambdaField(_lerp(lambda_min_at(t, lam_min, lam_max), lam_max, s), t)


def one_ring_mean(mesh, values: np.ndarray) -> np.ndarray:
    """Average of each vertex and its neighbors."""
    A = mesh.neighbors
    deg = np.diff(A.indptr)
    return (values + A @ values) / (deg + 1)


def edge_field(c_n: np.ndarray, c_v: np.ndarray, t: float, mesh, *, w_n: float = W_NORMAL_CURV,
               w_v: float = W_MESH_CURV, e_min: float = E_MIN, e_max: float = E_MAX,
               smooth: bool = True) -> EdgeIndicatorField:
    """Target edge length per vertex from texture and mesh curvature, one-ring smoothed."""
    s = 1.0 - np.clip(w_v * np.asarray(c_v) + w_n * np.asarray(c_n), 0.0, 1.0)
    e = _lerp(e_min_at(t, e_min, e_max), e_max, s)
    if smooth:
        e = one_ring_mean(mesh, e)
    return EdgeIndicatorField(e, smoothed=smooth)


def stop_gradient(x: torch.Tensor) -> torch.Tensor:
    """Identity in value, zero partial derivatives."""
    return x.detach()


def effective_mask(M: torch.Tensor, M_hat: torch.Tensor) -> torch.Tensor:
    """``M * sg[M_hat]``: predicted coverage weights the mask without passing gradients."""
    return M * stop_gradient(M_hat)


def _reduce(per_pixel: torch.Tensor, weight_mask: torch.Tensor, reduction: str) -> torch.Tensor:
    total = per_pixel.sum()
    if reduction == "sum":
        return total
    if reduction == "mean":
        count = (weight_mask > 0).sum().clamp(min=1)
        return total / count
    raise ValueError(f"unknown reduction {reduction!r}")


def _pixel_mask(m: torch.Tensor, img: torch.Tensor) -> torch.Tensor:
    # broadcast an (H, W) mask over trailing channels
    return m[..., None] if m.dim() == img.dim() - 1 else m


def image_loss(I_hat: torch.Tensor, I_hat_geo: torch.Tensor, I: torch.Tensor, m: torch.Tensor,
               reduction: str = "mean") -> torch.Tensor:
    """Masked L1 between log images, split evenly between the normal-mapped and geometric render.

    ``reduction='mean'`` divides by the number of pixels with ``m > 0``.
    """
    mm = _pixel_mask(m, I)
    log_i = torch.log(I + LOG_EPS)
    diff = 0.5 * (mm * (torch.log(I_hat + LOG_EPS) - log_i)).abs()
    diff = diff + 0.5 * (mm * (torch.log(I_hat_geo + LOG_EPS) - log_i)).abs()
    return _reduce(diff, m, reduction)


def silhouette_loss(M_hat: torch.Tensor, M: torch.Tensor, reduction: str = "mean") -> torch.Tensor:
    """Per-pixel mask disagreement with a half-pixel dead zone (mean over mask-positive pixels).

    Each pixel costs ``2 max(|M_hat - M| - 1/2, 0)``. Hard coverage gives the
    plain L1 count; a soft band pixel costs twice the distance by which its
    center lies on the wrong side of the contour, so a correct silhouette is
    a stationary point.
    """
    r = 2.0 * ((M_hat - M).abs() - 0.5).clamp(min=0.0)
    return _reduce(r, M, reduction)


def normal_loss(N_delta: torch.Tensor, N_geo: torch.Tensor, m: torch.Tensor,
                reduction: str = "mean") -> torch.Tensor:
    """Masked L1 between the geometric normal and the frozen geometric normal plus the texture delta.

    The value equals ``||m * N_delta||_1``; appearance parameters receive
    gradients that shrink the delta while vertex positions receive gradients
    that pull the geometric normal toward the perturbed normal.
    """
    mm = _pixel_mask(m, N_geo)
    diff = (mm * ((stop_gradient(N_geo) + N_delta) - N_geo)).abs()
    return _reduce(diff, m, reduction)


@dataclass
class LossParts:
    img: torch.Tensor
    sil: torch.Tensor
    normal: torch.Tensor


def total_loss(parts: LossParts, weights: LossWeights, t: float):
    """Damped weighted sum; the silhouette term is never damped."""
    s = float(loss_damping(t))
    return s * weights.w_img * parts.img + weights.w_sil * parts.sil + s * weights.w_normal * parts.normal
