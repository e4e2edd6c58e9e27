"""Pinhole camera: world-to-pixel projection, viewpoint sampling, and
depth-map back-projection.

Camera frame convention: x right, y down, z forward (points in front of
the camera have z > 0); world frame is y-up. Pixel (row, col) has its
center at (col + 0.5, row + 0.5) in (u, v) image coordinates.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from typing import Tuple, Union

import numpy as np

from . import autodiff as ad


class CameraError(Exception):
    pass


@dataclass
class Camera:
    focal: float
    principal: Tuple[float, float]
    rotation: np.ndarray      # 3x3 world -> camera
    translation: np.ndarray   # 3-vector
    width: int
    height: int

    def __post_init__(self):
        self.rotation = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        self.translation = np.asarray(self.translation, dtype=np.float64).reshape(3)
        if self.focal <= 0:
            raise CameraError(f"focal length must be positive, got {self.focal}")
        if np.max(np.abs(self.rotation @ self.rotation.T - np.eye(3))) > 1e-6:
            raise CameraError("rotation is not orthonormal within 1e-6")

    @property
    def eye(self) -> np.ndarray:
        return -self.rotation.T @ self.translation

    def to_dict(self) -> dict:
        return {
            "focal": float(self.focal),
            "principal": [float(self.principal[0]), float(self.principal[1])],
            "rotation": [float(v) for v in self.rotation.reshape(-1)],
            "translation": [float(v) for v in self.translation],
            "width": int(self.width),
            "height": int(self.height),
        }

    @classmethod
    def from_dict(cls, d: dict) -> "Camera":
        return cls(
            focal=float(d["focal"]),
            principal=(float(d["principal"][0]), float(d["principal"][1])),
            rotation=np.array(d["rotation"], dtype=np.float64).reshape(3, 3),
            translation=np.array(d["translation"], dtype=np.float64),
            width=int(d["width"]),
            height=int(d["height"]),
        )

    def save_json(self, path) -> None:
        with open(path, "w") as f:
            json.dump(self.to_dict(), f, indent=2, sort_keys=True)
            f.write("\n")

    @classmethod
    def load_json(cls, path) -> "Camera":
        with open(path) as f:
            return cls.from_dict(json.load(f))


def look_at(eye, target, up, focal: float, width: int, height: int) -> Camera:
    """Camera at `eye` looking toward `target`; principal point at the
    image center."""
    eye = np.asarray(eye, dtype=np.float64)
    target = np.asarray(target, dtype=np.float64)
    up = np.asarray(up, dtype=np.float64)
    forward = target - eye
    norm = np.linalg.norm(forward)
    if norm < 1e-12:
        raise CameraError("eye and target coincide")
    z = forward / norm
    x = np.cross(-up, z)
    xn = np.linalg.norm(x)
    if xn < 1e-9:
        raise CameraError("up vector is parallel to the view direction")
    x /= xn
    y = np.cross(z, x)
    rotation = np.stack([x, y, z])
    return Camera(focal=focal, principal=(width / 2.0, height / 2.0),
                  rotation=rotation, translation=-rotation @ eye,
                  width=width, height=height)


def sample_viewpoint(rng: np.random.Generator, distance: float,
                     elevation_range_deg: Tuple[float, float] = (-30.0, 30.0),
                     azimuth_range_deg: Tuple[float, float] = (0.0, 360.0),
                     focal: float = None, width: int = 64, height: int = 64) -> Camera:
    """Camera on a sphere of the given radius around the origin, looking at
    the origin. Elevation is measured from the horizontal (y = 0) plane."""
    lo, hi = elevation_range_deg
    if lo > hi:
        raise CameraError(f"bad elevation range ({lo}, {hi})")
    elev = np.deg2rad(rng.uniform(lo, hi))
    azim = np.deg2rad(rng.uniform(azimuth_range_deg[0], azimuth_range_deg[1]))
    eye = distance * np.array([np.cos(elev) * np.cos(azim),
                               np.sin(elev),
                               np.cos(elev) * np.sin(azim)])
    if focal is None:
        focal = float(height)
    return look_at(eye, np.zeros(3), np.array([0.0, 1.0, 0.0]), focal, width, height)


def transform_to_camera(positions: np.ndarray, camera: Camera) -> np.ndarray:
    return positions @ camera.rotation.T + camera.translation


def project(positions: np.ndarray, camera: Camera) -> Tuple[np.ndarray, np.ndarray]:
    """Project world points to pixel coordinates: (N, 2) screen xy and (N,)
    camera-space depth. Rejects points at or behind the camera plane."""
    cam = transform_to_camera(np.asarray(positions, dtype=np.float64), camera)
    z = cam[:, 2]
    if np.any(z <= 0):
        raise CameraError(f"{int(np.sum(z <= 0))} point(s) at or behind the camera (min z = {z.min():.6g})")
    u = camera.focal * cam[:, 0] / z + camera.principal[0]
    v = camera.focal * cam[:, 1] / z + camera.principal[1]
    return np.stack([u, v], axis=1), z


_E0 = np.array([[1.0], [0.0], [0.0]])
_E1 = np.array([[0.0], [1.0], [0.0]])
_E2 = np.array([[0.0], [0.0], [1.0]])


def project_diff(positions: ad.Tensor, camera: Camera) -> Tuple[ad.Tensor, ad.Tensor, ad.Tensor]:
    """Differentiable projection: (u, v, z) column tensors of shape (N, 1)."""
    dtype = positions.dtype
    rt = ad.Tensor(camera.rotation.T, dtype=dtype)
    t = ad.Tensor(camera.translation, dtype=dtype)
    cam = positions @ rt + t
    x = cam @ ad.Tensor(_E0, dtype=dtype)
    y = cam @ ad.Tensor(_E1, dtype=dtype)
    z = cam @ ad.Tensor(_E2, dtype=dtype)
    if np.any(z.data <= 0):
        raise CameraError(f"{int(np.sum(z.data <= 0))} point(s) at or behind the camera")
    u = camera.focal * (x / z) + camera.principal[0]
    v = camera.focal * (y / z) + camera.principal[1]
    return u, v, z


def backproject(depth: np.ndarray, camera: Camera) -> np.ndarray:
    """Lift foreground pixels (depth > 0) to world-space points through the
    inverse pinhole model. Returns (M, 3); M may be zero."""
    depth = np.asarray(depth, dtype=np.float64)
    rows, cols = np.nonzero(depth > 0)
    z = depth[rows, cols]
    u = cols + 0.5
    v = rows + 0.5
    x = (u - camera.principal[0]) * z / camera.focal
    y = (v - camera.principal[1]) * z / camera.focal
    cam = np.stack([x, y, z], axis=1)
    return (cam - camera.translation) @ camera.rotation
