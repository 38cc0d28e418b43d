"""PNG / EXR helpers for linear float images."""
from __future__ import annotations

from pathlib import Path

import numpy as np
import OpenEXR
from PIL import Image


def srgb_encode(x: np.ndarray) -> np.ndarray:
    x = np.clip(x, 0.0, 1.0)
    return np.where(x <= 0.0031308, 12.92 * x, 1.055 * np.power(x, 1 / 2.4) - 0.055)


def to_uint8(x: np.ndarray) -> np.ndarray:
    return np.round(np.clip(x, 0.0, 1.0) * 255.0).astype(np.uint8)


def write_png(path, img: np.ndarray, srgb: bool = False) -> None:
    img = np.asarray(img, dtype=np.float64)
    if srgb:
        img = srgb_encode(img)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    Image.fromarray(to_uint8(img)).save(Path(path), optimize=False)


def read_png(path) -> np.ndarray:
    return np.asarray(Image.open(Path(path)), dtype=np.float64) / 255.0


def write_exr(path, img: np.ndarray) -> None:
    """Write a float32 scanline EXR; 1 channel -> ``Y``, 3 channels -> ``RGB``."""
    img = np.ascontiguousarray(img, dtype=np.float32)
    if img.ndim == 3 and img.shape[2] == 1:
        img = img[..., 0]
    if img.ndim == 2:
        channels = {"Y": img}
    elif img.ndim == 3 and img.shape[2] == 3:
        channels = {"RGB": img}
    else:
        raise ValueError(f"unsupported EXR shape {img.shape}")
    header = {"compression": OpenEXR.ZIP_COMPRESSION, "type": OpenEXR.scanlineimage}
    with OpenEXR.File(header, channels) as f:
        f.write(str(path))


def read_exr(path) -> np.ndarray:
    with OpenEXR.File(str(path)) as f:
        ch = f.channels()
        if "RGB" in ch:
            return np.array(ch["RGB"].pixels, dtype=np.float64)
        if "Y" in ch:
            return np.array(ch["Y"].pixels, dtype=np.float64)
        if all(k in ch for k in "RGB"):
            return np.stack([np.array(ch[k].pixels, dtype=np.float64) for k in "RGB"], axis=-1)
        raise ValueError(f"{path}: no RGB or Y channels")
