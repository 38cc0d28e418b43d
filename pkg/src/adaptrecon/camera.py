"""Pinhole camera with a point light at its optical center."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass
class Camera:
    """World-to-camera rigid transform plus pinhole intrinsics.

    Camera space follows the OpenCV convention (x right, y down, z forward).
    Pixel ``(row j, col i)`` covers ``[i, i+1) x [j, j+1)`` in image
    coordinates, so its center sits at ``(i + 0.5, j + 0.5)``.
    """

    world_to_camera: np.ndarray
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int
    light_intensity: float = 1.0

    def __post_init__(self):
        self.world_to_camera = np.asarray(self.world_to_camera, dtype=np.float64).reshape(4, 4)
        if self.fx <= 0 or self.fy <= 0:
            raise ValueError("focal lengths must be positive")
        R = self.rotation
        if not np.allclose(R @ R.T, np.eye(3), atol=1e-8) or np.linalg.det(R) < 0:
            raise ValueError("world_to_camera rotation is not orthonormal")

    @property
    def rotation(self) -> np.ndarray:
        return self.world_to_camera[:3, :3]

    @property
    def translation(self) -> np.ndarray:
        return self.world_to_camera[:3, 3]

    @property
    def center(self) -> np.ndarray:
        """Optical center (and light position) in world coordinates."""
        return -self.rotation.T @ self.translation

    @property
    def intrinsics(self) -> np.ndarray:
        return np.array([[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]])

    def to_camera(self, points: np.ndarray) -> np.ndarray:
        return points @ self.rotation.T + self.translation

    def project(self, points: np.ndarray) -> np.ndarray:
        """Return ``(N, 3)`` array of pixel x, pixel y and camera depth."""
        pc = self.to_camera(points)
        z = pc[:, 2]
        return np.stack([self.fx * pc[:, 0] / z + self.cx, self.fy * pc[:, 1] / z + self.cy, z], axis=1)

    def to_dict(self) -> dict:
        return {
            "world_to_camera": self.world_to_camera.tolist(),
            "fx": float(self.fx),
            "fy": float(self.fy),
            "cx": float(self.cx),
            "cy": float(self.cy),
            "width": int(self.width),
            "height": int(self.height),
            "light_intensity": float(self.light_intensity),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            world_to_camera=np.asarray(d["world_to_camera"], dtype=np.float64),
            fx=float(d["fx"]),
            fy=float(d["fy"]),
            cx=float(d["cx"]),
            cy=float(d["cy"]),
            width=int(d["width"]),
            height=int(d["height"]),
            light_intensity=float(d.get("light_intensity", 1.0)),
        )


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0), *, width=128, height=128,
            fov_deg=45.0, light_intensity=1.0) -> Camera:
    """Build a camera at ``eye`` looking at ``target`` with a square-pixel pinhole."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - eye
    forward /= np.linalg.norm(forward)
    if abs(np.dot(forward, up / np.linalg.norm(up))) > 0.999:
        up = np.array([1.0, 0.0, 0.0]) if abs(forward[0]) < 0.9 else np.array([0.0, 1.0, 0.0])
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)
    down = np.cross(forward, right)
    R = np.stack([right, down, forward])
    M = np.eye(4)
    M[:3, :3] = R
    M[:3, 3] = -R @ eye
    f = 0.5 * width / np.tan(np.radians(fov_deg) / 2)
    return Camera(M, f, f, width / 2.0, height / 2.0, width, height, light_intensity)


def fibonacci_sphere(n: int, radius: float = 1.0, rng: np.random.Generator | None = None) -> np.ndarray:
    """``n`` nearly uniform points on a sphere; an optional rng applies a random rotation."""
    i = np.arange(n) + 0.5
    phi = np.arccos(1 - 2 * i / n)
    theta = np.pi * (1 + 5**0.5) * i
    pts = np.stack([np.cos(theta) * np.sin(phi), np.sin(theta) * np.sin(phi), np.cos(phi)], axis=1)
    if rng is not None:
        q, r = np.linalg.qr(rng.normal(size=(3, 3)))
        q = q * np.sign(np.diag(r))
        if np.linalg.det(q) < 0:
            q[:, 0] = -q[:, 0]
        pts = pts @ q.T
    return radius * pts

