"""Pinhole camera model and view-sphere sampling for single-view renders."""

from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional

import numpy as np


@dataclass(frozen=True)
class CameraModel:
    position: np.ndarray
    look_at: np.ndarray
    up: np.ndarray = field(default_factory=lambda: np.array([0.0, 0.0, 1.0]))
    fov_y: float = np.deg2rad(50.0)
    resolution: tuple[int, int] = (160, 120)

    def __post_init__(self):
        object.__setattr__(self, "position", np.asarray(self.position, dtype=float))
        object.__setattr__(self, "look_at", np.asarray(self.look_at, dtype=float))
        up = np.asarray(self.up, dtype=float)
        object.__setattr__(self, "up", up / np.linalg.norm(up))
        if np.allclose(self.position, self.look_at):
            raise ValueError("camera position equals look_at")
        if not 0.0 < self.fov_y < np.pi:
            raise ValueError(f"fov_y must be in (0, pi), got {self.fov_y}")

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(forward, right, up) orthonormal camera axes."""
        fwd = self.look_at - self.position
        fwd = fwd / np.linalg.norm(fwd)
        right = np.cross(fwd, self.up)
        rn = np.linalg.norm(right)
        if rn < 1e-9:
            raise ValueError("camera up is parallel to the view direction")
        right = right / rn
        up = np.cross(right, fwd)
        return fwd, right, up

    def ray_directions(self) -> np.ndarray:
        """Unit ray direction per pixel, row-major (H*W, 3)."""
        W, H = self.resolution
        fwd, right, up = self.basis()
        tan_y = np.tan(self.fov_y / 2.0)
        aspect = W / H
        xs = ((np.arange(W) + 0.5) / W * 2.0 - 1.0) * tan_y * aspect
        ys = (1.0 - (np.arange(H) + 0.5) / H * 2.0) * tan_y
        gx, gy = np.meshgrid(xs, ys)
        dirs = (fwd[None, :] + gx.reshape(-1, 1) * right[None, :]
                + gy.reshape(-1, 1) * up[None, :])
        return dirs / np.linalg.norm(dirs, axis=1, keepdims=True)

    def to_dict(self) -> dict:
        return {"position": self.position.tolist(), "look_at": self.look_at.tolist(),
                "up": self.up.tolist(), "fov_y": float(self.fov_y),
                "resolution": list(self.resolution)}

    @staticmethod
    def from_dict(d: dict) -> "CameraModel":
        return CameraModel(position=np.asarray(d["position"]), look_at=np.asarray(d["look_at"]),
                           up=np.asarray(d["up"]), fov_y=float(d["fov_y"]),
                           resolution=tuple(d["resolution"]))


@dataclass(frozen=True)
class CameraBounds:
    """View-sphere sampling ranges. Azimuth 0 faces the object front (-y side);
    angles in radians, distance in meters."""

    azimuth: tuple[float, float] = (np.deg2rad(-60.0), np.deg2rad(60.0))
    elevation: tuple[float, float] = (np.deg2rad(10.0), np.deg2rad(50.0))
    distance: tuple[float, float] = (1.5, 2.5)


def camera_at(center: np.ndarray, azimuth: float, elevation: float, distance: float,
              resolution: tuple[int, int] = (160, 120)) -> CameraModel:
    center = np.asarray(center, dtype=float)
    offset = distance * np.array([np.cos(elevation) * np.sin(azimuth),
                                  -np.cos(elevation) * np.cos(azimuth),
                                  np.sin(elevation)])
    return CameraModel(position=center + offset, look_at=center, resolution=resolution)


def sample_camera(rng: np.random.Generator, bounds: Optional[CameraBounds] = None,
                  center=(0.0, 0.0, 0.0),
                  resolution: tuple[int, int] = (160, 120)) -> CameraModel:
    """Random camera on the view sphere, looking at the object centroid."""
    bounds = bounds or CameraBounds()
    az = rng.uniform(*bounds.azimuth)
    el = rng.uniform(*bounds.elevation)
    dist = rng.uniform(*bounds.distance)
    return camera_at(np.asarray(center, dtype=float), az, el, dist, resolution)
