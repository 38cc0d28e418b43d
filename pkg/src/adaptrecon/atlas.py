"""Tiled 10-channel SVBRDF atlas.

Channel layout of every tile and of the stitched texture::

    0:3  diffuse albedo   (RGB, [0, 1])
    3:6  specular albedo  (RGB, [0, 1])
    6    roughness        ((0, 1])
    7:10 tangent-space normal (unit, n_z > 0)

Texture rows follow ``v`` and columns follow ``u``; texel ``(j, i)`` is
centered at ``uv = ((i + 0.5) / W, (j + 0.5) / H)``. Lookups wrap in ``u``
(the spherical parameterization is periodic there) and clamp in ``v``.
"""
from __future__ import annotations

import logging
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch
from scipy import ndimage
from torch import nn

from .imageio import read_exr, write_exr, write_png

log = logging.getLogger(__name__)

TILE = 128
OVERLAP = 8
N_CHANNELS = 10
KD = slice(0, 3)
KS = slice(3, 6)
ROUGH = slice(6, 7)
NORMAL = slice(7, 10)
ROUGH_MIN = 0.01

DEFAULT_MATERIAL = np.array([0.5, 0.5, 0.5, 0.04, 0.04, 0.04, 0.5, 0.0, 0.0, 1.0])


def stitched_size(n_tiles: int, tile: int = TILE, overlap: int = OVERLAP) -> int:
    return n_tiles * (tile - overlap) + overlap


def blend_ramp(overlap: int) -> np.ndarray:
    """Weight of the following (right/lower) tile at each overlap texel.

    ``sigmoid(s * (d - o/2))`` for texel distance ``d`` into the overlap,
    with ``s`` chosen so the ramp reaches 0.01 / 0.99 at the overlap borders.
    """
    if overlap == 0:
        return np.zeros(0)
    s = 2.0 * math.log(99.0) / overlap
    d = np.arange(overlap, dtype=np.float64)
    return 1.0 / (1.0 + np.exp(-s * (d - overlap / 2.0)))


def axis_profile(tile: int, overlap: int, has_prev: bool, has_next: bool) -> np.ndarray:
    w = np.ones(tile)
    ramp = blend_ramp(overlap)
    if has_prev and overlap:
        w[:overlap] = ramp
    if has_next and overlap:
        w[tile - overlap:] = 1.0 - ramp
    return w


def tile_weights(grid: tuple[int, int], tile: int = TILE, overlap: int = OVERLAP) -> np.ndarray:
    """``(gy, gx, tile, tile)`` blend weights; they sum to one on the stitched grid."""
    gy, gx = grid
    out = np.empty((gy, gx, tile, tile))
    for r in range(gy):
        wy = axis_profile(tile, overlap, r > 0, r < gy - 1)
        for c in range(gx):
            wx = axis_profile(tile, overlap, c > 0, c < gx - 1)
            out[r, c] = np.outer(wy, wx)
    return out


def stitch_atlas(tiles: torch.Tensor, overlap: int = OVERLAP) -> torch.Tensor:
    """Blend a ``(gy, gx, T, T, C)`` tile grid into one ``(H, W, C)`` texture."""
    if tiles.dim() != 5 or tiles.shape[2] != tiles.shape[3]:
        raise ValueError(f"tiles must be (gy, gx, T, T, C), got {tuple(tiles.shape)}")
    gy, gx, T, _, C = tiles.shape
    if not 0 <= 2 * overlap <= T:
        raise ValueError("overlap must be at most half the tile size")
    step = T - overlap
    w = torch.as_tensor(tile_weights((gy, gx), T, overlap), dtype=tiles.dtype, device=tiles.device)
    out = tiles.new_zeros((stitched_size(gy, T, overlap), stitched_size(gx, T, overlap), C))
    for r in range(gy):
        for c in range(gx):
            out[r * step:r * step + T, c * step:c * step + T] += w[r, c, :, :, None] * tiles[r, c]
    return out


def split_atlas(texture: torch.Tensor, grid: tuple[int, int], tile: int = TILE,
                overlap: int = OVERLAP) -> torch.Tensor:
    """Cut a stitched texture into tile windows; stitching them back is exact."""
    gy, gx = grid
    H, W = texture.shape[:2]
    if (H, W) != (stitched_size(gy, tile, overlap), stitched_size(gx, tile, overlap)):
        raise ValueError("texture size does not match the tile grid")
    step = tile - overlap
    return torch.stack([torch.stack([texture[r * step:r * step + tile, c * step:c * step + tile]
                                     for c in range(gx)]) for r in range(gy)])


def normalize_normals(n: torch.Tensor, eps: float = 1e-12) -> torch.Tensor:
    return n / torch.sqrt((n * n).sum(-1, keepdim=True) + eps)


# --------------------------------------------------------------------------- sampling

def _bilinear_taps(uv: torch.Tensor, H: int, W: int, wrap_u: bool = True):
    x = uv[:, 0] * W - 0.5
    y = uv[:, 1] * H - 0.5
    x0 = torch.floor(x)
    y0 = torch.floor(y)
    fx = x - x0
    fy = y - y0
    x0 = x0.long()
    y0 = y0.long()
    if wrap_u:
        xs = (x0 % W, (x0 + 1) % W)
    else:
        xs = (x0.clamp(0, W - 1), (x0 + 1).clamp(0, W - 1))
    ys = (y0.clamp(0, H - 1), (y0 + 1).clamp(0, H - 1))
    weights = ((1 - fx) * (1 - fy), fx * (1 - fy), (1 - fx) * fy, fx * fy)
    idx = (ys[0] * W + xs[0], ys[0] * W + xs[1], ys[1] * W + xs[0], ys[1] * W + xs[1])
    return idx, weights


def _check_uv(uv: torch.Tensor, wrap_u: bool) -> torch.Tensor:
    v = uv[:, 1]
    out_of_range = (v < 0) | (v > 1)
    if not wrap_u:
        out_of_range = out_of_range | (uv[:, 0] < 0) | (uv[:, 0] > 1)
    if log.isEnabledFor(logging.DEBUG) and bool(out_of_range.any()):
        log.debug("clamping %d out-of-range uv samples", int(out_of_range.sum()))
    if wrap_u:
        return torch.stack([uv[:, 0], v.clamp(0, 1)], dim=1)
    return uv.clamp(0, 1)


def sample_bilinear(texture: torch.Tensor, uv: torch.Tensor, wrap_u: bool = True) -> torch.Tensor:
    """Bilinear lookup of a ``(H, W, C)`` texture at ``(N, 2)`` uv; differentiable in both."""
    H, W, C = texture.shape
    uv = _check_uv(uv, wrap_u)
    idx, weights = _bilinear_taps(uv, H, W, wrap_u)
    flat = texture.reshape(H * W, C)
    out = 0
    for i, w in zip(idx, weights):
        out = out + w[:, None] * flat[i]
    return out


def sample_bilinear_adjoint(shape: tuple[int, int, int], uv: np.ndarray, grad_out: np.ndarray,
                            wrap_u: bool = True) -> np.ndarray:
    """Scatter per-sample gradients back to texels with the bilinear weights."""
    H, W, C = shape
    uv_t = _check_uv(torch.as_tensor(uv, dtype=torch.float64), wrap_u)
    idx, weights = _bilinear_taps(uv_t, H, W, wrap_u)
    out = np.zeros((H * W, C))
    for i, w in zip(idx, weights):
        np.add.at(out, i.numpy(), w.numpy()[:, None] * grad_out)
    return out.reshape(H, W, C)


def split_material(values: torch.Tensor) -> dict:
    """Channel split of sampled atlas values; normals renormalized, roughness clamped."""
    return {
        "kd": values[:, KD],
        "ks": values[:, KS],
        "rough": values[:, 6].clamp(ROUGH_MIN, 1.0),
        "normal": normalize_normals(values[:, NORMAL]),
    }


# --------------------------------------------------------------------------- curvature

SCHARR_SMOOTH = np.array([3.0, 10.0, 3.0]) / 16.0
SCHARR_DIFF = np.array([-1.0, 0.0, 1.0])


def scharr_kernels() -> tuple[np.ndarray, np.ndarray]:
    """3x3 Scharr derivative kernels along ``u`` (columns) and ``v`` (rows), correlation form."""
    k_u = np.outer(SCHARR_SMOOTH, SCHARR_DIFF)
    return k_u, k_u.T


def scharr_gradient(normal_map: np.ndarray) -> np.ndarray:
    """``0.5 * (K_u * n + K_v * n)`` per texel; wraps in ``u``, replicates edges in ``v``."""
    n = np.asarray(normal_map, dtype=np.float64)
    padded = np.pad(n, ((1, 1), (0, 0), (0, 0)), mode="edge")
    padded = np.pad(padded, ((0, 0), (1, 1), (0, 0)), mode="wrap")
    k_u, k_v = scharr_kernels()
    out = np.zeros_like(n)
    H, W = n.shape[:2]
    for dj in range(3):
        for di in range(3):
            w = 0.5 * (k_u[dj, di] + k_v[dj, di])
            if w:
                out += w * padded[dj:dj + H, di:di + W]
    return out


def texture_curvature(texture, uvs: np.ndarray) -> np.ndarray:
    """Per-vertex norm of the Scharr-filtered normal channels sampled at the vertex UVs."""
    tex = texture.detach().cpu().numpy() if torch.is_tensor(texture) else np.asarray(texture)
    n = tex[..., NORMAL] if tex.shape[-1] == N_CHANNELS else tex
    n = n / np.maximum(np.linalg.norm(n, axis=-1, keepdims=True), 1e-12)
    g = torch.as_tensor(scharr_gradient(n))
    vals = sample_bilinear(g, torch.as_tensor(uvs, dtype=torch.float64)).numpy()
    return np.linalg.norm(vals, axis=1)


# --------------------------------------------------------------------------- backends

class DirectTexels(nn.Module):
    """Tile payloads stored directly as parameters."""

    backend = "direct-texel"

    def __init__(self, grid=(4, 4), tile: int = TILE, material=DEFAULT_MATERIAL, dtype=torch.float64):
        super().__init__()
        gy, gx = grid
        init = torch.as_tensor(np.asarray(material, dtype=np.float64), dtype=dtype)
        self.tiles = nn.Parameter(init.expand(gy, gx, tile, tile, N_CHANNELS).clone())
        self.grid = (gy, gx)
        self.tile = tile

    @classmethod
    def from_texture(cls, texture, grid, tile: int = TILE, overlap: int = OVERLAP) -> "DirectTexels":
        tex = torch.as_tensor(np.asarray(texture, dtype=np.float64))
        obj = cls(grid, tile)
        with torch.no_grad():
            obj.tiles.copy_(split_atlas(tex, grid, tile, overlap))
        return obj

    def forward(self) -> torch.Tensor:
        return self.tiles

    def geometry_free_parameters(self):
        return [self.tiles]

    @torch.no_grad()
    def project_(self) -> None:
        """Clamp channels back into their valid ranges after an update."""
        t = self.tiles
        t[..., 0:6].clamp_(0.0, 1.0)
        t[..., 6].clamp_(ROUGH_MIN, 1.0)
        n = t[..., NORMAL]
        n[..., 2].clamp_(min=0.05)
        t[..., NORMAL] = normalize_normals(n)


class TileDecoder(nn.Module):
    """Shared deconvolutional generator mapping per-tile latent grids to 10-channel tiles.

    Three stride-2 transposed convolutions lift a ``latent_size^2`` latent to
    the tile resolution; a smoothing tail (2x upsample followed by a stride-2
    convolution) mixes neighboring texels before two 1x1 heads. The material
    head produces albedos and roughness through a sigmoid; the normal head
    produces ``(n_x, n_y)`` which are completed to ``normalize(n_x, n_y, 1)``.
    Rendering without texture normals only depends on the trunk and the
    material head, the subset ``material_parameters()``.
    """

    backend = "tile-decoder"

    def __init__(self, grid=(4, 4), latent_channels: int = 8, latent_size: int = 16,
                 widths=(32, 16, 16), tail_width: int = 8, seed: int = 0, dtype=torch.float64):
        super().__init__()
        gy, gx = grid
        self.grid = (gy, gx)
        self.tile = latent_size * 8
        self.latent_shape = (latent_channels, latent_size, latent_size)
        w0, w1, w2 = widths
        with torch.random.fork_rng():
            torch.manual_seed(seed)
            self.trunk = nn.Sequential(
                nn.ConvTranspose2d(latent_channels, w0, 4, 2, 1), nn.LeakyReLU(0.2),
                nn.ConvTranspose2d(w0, w1, 4, 2, 1), nn.LeakyReLU(0.2),
                nn.ConvTranspose2d(w1, w2, 4, 2, 1), nn.LeakyReLU(0.2),
                nn.Upsample(scale_factor=2, mode="bilinear", align_corners=False),
                nn.Conv2d(w2, tail_width, 4, 2, 1), nn.LeakyReLU(0.2),
            )
            self.material_head = nn.Conv2d(tail_width, 7, 1)
            self.normal_head = nn.Conv2d(tail_width, 2, 1)
            self.latents = nn.Parameter(torch.randn(gy * gx, *self.latent_shape))
        self.to(dtype)

    def decode(self, z: torch.Tensor) -> torch.Tensor:
        """``(B, C, S, S)`` latents -> ``(B, T, T, 10)`` tiles."""
        h = self.trunk(z)
        mat = torch.sigmoid(self.material_head(h))
        nxy = self.normal_head(h)
        n = torch.cat([nxy, torch.ones_like(nxy[:, :1])], dim=1)
        n = n / torch.sqrt((n * n).sum(1, keepdim=True))
        out = torch.cat([mat, n], dim=1).permute(0, 2, 3, 1)
        if out.shape[1] != self.tile:
            raise ValueError(f"decoder produced {out.shape[1]}px tiles, expected {self.tile}")
        return out

    def forward(self) -> torch.Tensor:
        gy, gx = self.grid
        t = self.decode(self.latents)
        return t.reshape(gy, gx, *t.shape[1:])

    def material_parameters(self):
        """Weights that influence albedo and roughness (everything but the normal head)."""
        return list(self.trunk.parameters()) + list(self.material_head.parameters())

    def normal_parameters(self):
        return list(self.normal_head.parameters())

    def geometry_free_parameters(self):
        """Trainable decoder weights; the per-tile latents stay fixed."""
        return self.material_parameters() + self.normal_parameters()

    def resample_latents(self, seed: int) -> None:
        g = torch.Generator().manual_seed(seed)
        with torch.no_grad():
            self.latents.copy_(torch.randn(self.latents.shape, generator=g, dtype=self.latents.dtype))

    def project_(self) -> None:
        pass


@dataclass
class MaterialAtlas:
    """A tile backend plus the overlap used to stitch its tiles."""

    backend: nn.Module
    overlap: int = OVERLAP

    @property
    def kind(self) -> str:
        return self.backend.backend

    @property
    def grid(self):
        return self.backend.grid

    @property
    def resolution(self) -> tuple[int, int]:
        gy, gx = self.grid
        T = self.backend.tile
        return stitched_size(gy, T, self.overlap), stitched_size(gx, T, self.overlap)

    def tiles(self) -> torch.Tensor:
        return self.backend()

    def texture(self) -> torch.Tensor:
        return stitch_atlas(self.tiles(), self.overlap)

    def parameters(self):
        return self.backend.geometry_free_parameters()

    def project_(self) -> None:
        self.backend.project_()

    @classmethod
    def direct(cls, grid=(4, 4), tile: int = TILE, overlap: int = OVERLAP, material=DEFAULT_MATERIAL):
        return cls(DirectTexels(grid, tile, material), overlap)

    @classmethod
    def from_texture(cls, texture, grid, tile: int = TILE, overlap: int = OVERLAP):
        return cls(DirectTexels.from_texture(texture, grid, tile, overlap), overlap)

    def curvature(self, uvs: np.ndarray) -> np.ndarray:
        with torch.no_grad():
            return texture_curvature(self.texture(), uvs)


def grid_for_texture(shape, tile: int = TILE, overlap: int = OVERLAP) -> tuple[int, int]:
    H, W = shape[:2]
    gy, gx = (H - overlap) // (tile - overlap), (W - overlap) // (tile - overlap)
    if (stitched_size(gy, tile, overlap), stitched_size(gx, tile, overlap)) != (H, W):
        raise ValueError(f"texture of {H}x{W} does not match a {tile}px/{overlap}px tile grid")
    return gy, gx


# --------------------------------------------------------------------------- export

def save_texture(texture, out_dir) -> None:
    """Write ``kd/ks/normal`` PNGs and ``kd/ks/roughness/normal`` float EXRs."""
    tex = texture.detach().cpu().numpy() if torch.is_tensor(texture) else np.asarray(texture)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    n = tex[..., NORMAL] / np.maximum(np.linalg.norm(tex[..., NORMAL], axis=-1, keepdims=True), 1e-12)
    write_png(out / "kd.png", tex[..., KD])
    write_png(out / "ks.png", tex[..., KS])
    write_png(out / "normal.png", 0.5 * n + 0.5)
    write_exr(out / "kd.exr", tex[..., KD])
    write_exr(out / "ks.exr", tex[..., KS])
    write_exr(out / "roughness.exr", tex[..., 6])
    write_exr(out / "normal.exr", n)


def load_texture(in_dir) -> np.ndarray:
    d = Path(in_dir)
    kd = read_exr(d / "kd.exr")
    ks = read_exr(d / "ks.exr")
    rough = read_exr(d / "roughness.exr")[..., None]
    n = read_exr(d / "normal.exr")
    return np.concatenate([kd, ks, rough, n], axis=-1)


# --------------------------------------------------------------------------- pretraining

def _smooth_noise(rng, shape, sigma):
    x = ndimage.gaussian_filter(rng.normal(size=shape), sigma, mode="wrap")
    return (x - x.mean()) / (x.std() + 1e-12)


def procedural_patch(seed, size: int = TILE) -> np.ndarray:
    """One procedural ``(size, size, 10)`` SVBRDF patch.

    Noise-based albedo tinted by two random colors, constant-plus-noise
    specular and roughness, and normals derived from a random bump height.
    """
    rng = np.random.default_rng(seed)
    mix = 1.0 / (1.0 + np.exp(-2.5 * _smooth_noise(rng, (size, size), rng.uniform(2, 12))))
    c0, c1 = rng.uniform(0.05, 0.9, 3), rng.uniform(0.05, 0.9, 3)
    kd = mix[..., None] * c0 + (1 - mix[..., None]) * c1
    ks = np.clip(rng.uniform(0.02, 0.4) + 0.03 * _smooth_noise(rng, (size, size), 4), 0, 1)
    rough = np.clip(rng.uniform(0.15, 0.85) + 0.05 * _smooth_noise(rng, (size, size), 6), 0.02, 1)
    h = _smooth_noise(rng, (size, size), rng.uniform(1.5, 6)) * rng.uniform(0.0, 1.5)
    gy, gx = np.gradient(h)
    n = np.stack([-gx, -gy, np.ones_like(h)], axis=-1)
    n /= np.linalg.norm(n, axis=-1, keepdims=True)
    return np.concatenate([kd, np.repeat(ks[..., None], 3, -1), rough[..., None], n], axis=-1)


class ProceduralCorpus(torch.utils.data.Dataset):
    """Lazily generated procedural SVBRDF patches (deterministic per index)."""

    def __init__(self, n: int = 1000, seed: int = 0, size: int = TILE):
        self.n = n
        self.seed = seed
        self.size = size

    def __len__(self):
        return self.n

    def __getitem__(self, i):
        if not 0 <= i < self.n:
            raise IndexError(i)
        return torch.as_tensor(procedural_patch((self.seed, i), self.size), dtype=torch.float32)


class _Encoder(nn.Module):
    def __init__(self, latent_channels, widths):
        super().__init__()
        w0, w1, w2 = widths
        self.net = nn.Sequential(
            nn.Conv2d(N_CHANNELS, w2, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(w2, w1, 4, 2, 1), nn.LeakyReLU(0.2),
            nn.Conv2d(w1, w0, 4, 2, 1), nn.LeakyReLU(0.2),
        )
        self.mu = nn.Conv2d(w0, latent_channels, 1)
        self.logvar = nn.Conv2d(w0, latent_channels, 1)

    def forward(self, x):
        h = self.net(x)
        return self.mu(h), self.logvar(h)


class PretrainDiverged(RuntimeError):
    pass


@dataclass
class PretrainHistory:
    heldout_init: float
    heldout_final: float
    losses: list


def heldout_mse(decoder: TileDecoder, encoder: _Encoder, patches: torch.Tensor) -> float:
    with torch.no_grad():
        mu, _ = encoder(patches.permute(0, 3, 1, 2))
        return float(torch.mean((decoder.decode(mu) - patches) ** 2))


def pretrain_decoder(corpus, epochs: int = 1, *, heldout=None, batch_size: int = 8, lr: float = 2e-3,
                     kl_weight: float = 1e-4, grid=(4, 4), latent_channels: int = 8, latent_size: int = 16,
                     widths=(32, 16, 16), tail_width: int = 8, seed: int = 0, max_steps: int | None = None):
    """Train the tile decoder as the generative half of a small variational autoencoder.

    The KL term keeps encoder outputs close to a standard normal so that
    randomly drawn tile latents decode to plausible materials. Returns the
    decoder (in float64, with fresh random latents) and a history record.
    """
    with torch.random.fork_rng():
        torch.manual_seed(seed)
        dec = TileDecoder(grid, latent_channels, latent_size, widths, tail_width, seed, dtype=torch.float32)
        enc = _Encoder(latent_channels, widths)
        if heldout is None:
            heldout = torch.stack([torch.as_tensor(procedural_patch((987_654_321, i), dec.tile), dtype=torch.float32)
                                   for i in range(16)])
        heldout = torch.as_tensor(heldout, dtype=torch.float32)
        init = heldout_mse(dec, enc, heldout)
        params = list(enc.parameters()) + dec.material_parameters() + dec.normal_parameters()
        opt = torch.optim.Adam(params, lr=lr)
        loader = torch.utils.data.DataLoader(corpus, batch_size=batch_size, shuffle=True,
                                             generator=torch.Generator().manual_seed(seed))
        losses = []
        step = 0
        for _ in range(epochs):
            for batch in loader:
                x = batch.permute(0, 3, 1, 2)
                mu, logvar = enc(x)
                z = mu + torch.exp(0.5 * logvar) * torch.randn_like(mu)
                rec = torch.mean((dec.decode(z) - batch) ** 2)
                kl = -0.5 * torch.mean(1 + logvar - mu**2 - logvar.exp())
                loss = rec + kl_weight * kl
                if not torch.isfinite(loss):
                    raise PretrainDiverged(f"loss became {float(loss)} at step {step} "
                                           f"(reconstruction {float(rec)}, kl {float(kl)})")
                opt.zero_grad()
                loss.backward()
                opt.step()
                losses.append(float(rec.detach()))
                step += 1
                if max_steps is not None and step >= max_steps:
                    break
            if max_steps is not None and step >= max_steps:
                break
        final = heldout_mse(dec, enc, heldout)
    dec = dec.to(torch.float64)
    dec.resample_latents(seed + 1)
    return dec, PretrainHistory(init, final, losses)
