"""Pinhole cameras, per-pixel rays and sinusoidal positional encoding.

Camera convention: right-handed, the camera looks down its local -z axis,
local +y is up and image rows grow downward.  Pixel ``(row, col)`` has its
center at image coordinates ``(col + 0.5, row + 0.5)``.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np

__all__ = [
    "CameraPose",
    "Ray",
    "GeometryError",
    "generate_ray",
    "generate_rays",
    "project",
    "positional_encode",
    "encoding_dim",
    "encoding_lipschitz",
    "look_at",
    "orbit_poses",
    "read_poses",
    "write_poses",
    "rotation_geodesic",
]


class GeometryError(ValueError):
    """Invalid camera, ray or pixel input."""


@dataclass(frozen=True)
class CameraPose:
    rotation: np.ndarray  # camera-to-world, columns are the camera axes
    translation: np.ndarray  # camera center in world units
    focal: float
    width: int
    height: int
    cx: float | None = None
    cy: float | None = None

    def __post_init__(self):
        R = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", R)
        object.__setattr__(self, "translation", t)
        if self.cx is None:
            object.__setattr__(self, "cx", self.width / 2.0)
        if self.cy is None:
            object.__setattr__(self, "cy", self.height / 2.0)
        if not np.allclose(R.T @ R, np.eye(3), atol=1e-6, rtol=0):
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(R) - 1.0) > 1e-6:
            raise GeometryError("rotation must have determinant +1")
        if not self.focal > 0:
            raise GeometryError(f"focal must be positive, got {self.focal}")
        if self.width < 1 or self.height < 1:
            raise GeometryError("image width and height must be >= 1")

    @property
    def optical_axis(self) -> np.ndarray:
        """Third rotation column (the camera's local +z in world space)."""
        return self.rotation[:, 2].copy()

    def matrix(self) -> np.ndarray:
        """3x4 camera-to-world matrix."""
        return np.hstack([self.rotation, self.translation[:, None]])


@dataclass(frozen=True)
class Ray:
    origin: np.ndarray
    direction: np.ndarray
    near: float
    far: float

    def __post_init__(self):
        d = np.asarray(self.direction, dtype=np.float64)
        object.__setattr__(self, "origin", np.asarray(self.origin, dtype=np.float64))
        object.__setattr__(self, "direction", d)
        if abs(np.linalg.norm(d) - 1.0) > 1e-6:
            raise GeometryError("ray direction must be unit length")
        if not 0 <= self.near < self.far:
            raise GeometryError(f"need 0 <= near < far, got ({self.near}, {self.far})")

    def at(self, t):
        return self.origin + np.multiply.outer(t, self.direction)


def _camera_dirs(pose: CameraPose, rows, cols) -> np.ndarray:
    x = (np.asarray(cols, dtype=np.float64) + 0.5 - pose.cx) / pose.focal
    y = -(np.asarray(rows, dtype=np.float64) + 0.5 - pose.cy) / pose.focal
    return np.stack([x, y, -np.ones_like(x)], axis=-1)


def generate_ray(pose: CameraPose, pixel: tuple[int, int], bounds: tuple[float, float]) -> Ray:
    """World-space ray through the center of ``pixel = (row, col)``."""
    row, col = pixel
    if not (0 <= row < pose.height and 0 <= col < pose.width):
        raise GeometryError(f"pixel {pixel} outside {pose.height}x{pose.width} image")
    d = pose.rotation @ _camera_dirs(pose, row, col)
    d /= np.linalg.norm(d)
    return Ray(pose.translation.copy(), d, float(bounds[0]), float(bounds[1]))


def generate_rays(pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Origins and unit directions for every pixel, row-major, shape (H*W, 3)."""
    rows, cols = np.meshgrid(np.arange(pose.height), np.arange(pose.width), indexing="ij")
    d = _camera_dirs(pose, rows.ravel(), cols.ravel()) @ pose.rotation.T
    d /= np.linalg.norm(d, axis=-1, keepdims=True)
    o = np.broadcast_to(pose.translation, d.shape).copy()
    return o, d


def project(pose: CameraPose, points: np.ndarray) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    """Project world points; returns (row, col, depth) with depth along the viewing axis.

    Points behind the camera get ``depth <= 0`` and meaningless pixel coordinates.
    """
    p = (np.asarray(points, dtype=np.float64) - pose.translation) @ pose.rotation
    depth = -p[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        col = pose.cx + pose.focal * p[..., 0] / depth - 0.5
        row = pose.cy - pose.focal * p[..., 1] / depth - 0.5
    return row, col, depth


def encoding_dim(dim: int, num_freqs: int) -> int:
    return dim * (2 * num_freqs + 1)


def positional_encode(x, num_freqs: int) -> np.ndarray:
    """Sinusoidal embedding ``[x, sin(2^0 pi x), cos(2^0 pi x), ..., cos(2^(L-1) pi x)]``.

    Works on the last axis of ``x``; the dtype of ``x`` is kept for float inputs.
    """
    if num_freqs < 0:
        raise GeometryError("num_freqs must be >= 0")
    x = np.asarray(x)
    if not np.issubdtype(x.dtype, np.floating):
        x = x.astype(np.float64)
    parts = [x]
    for k in range(num_freqs):
        arg = x * (np.pi * 2.0**k)
        parts.append(np.sin(arg))
        parts.append(np.cos(arg))
    return np.concatenate(parts, axis=-1)


def encoding_lipschitz(num_freqs: int) -> float:
    """Lipschitz constant of :func:`positional_encode` in the Euclidean norm."""
    return float(np.sqrt(1.0 + sum((np.pi * 2.0**k) ** 2 for k in range(num_freqs))))


def look_at(eye, target=(0.0, 0.0, 0.0), up=(0.0, 0.0, 1.0)) -> np.ndarray:
    """Camera-to-world rotation for a camera at ``eye`` looking at ``target``."""
    eye = np.asarray(eye, dtype=np.float64)
    back = eye - np.asarray(target, dtype=np.float64)
    back /= np.linalg.norm(back)
    right = np.cross(np.asarray(up, dtype=np.float64), back)
    if np.linalg.norm(right) < 1e-9:
        right = np.cross((0.0, 1.0, 0.0), back)
    right /= np.linalg.norm(right)
    true_up = np.cross(back, right)
    return np.stack([right, true_up, back], axis=1)


def orbit_poses(n: int, radius: float, width: int, height: int, fov_deg: float,
                elevations: Sequence[float] = (20.0, 40.0), phase: float = 0.0) -> list[CameraPose]:
    """``n`` cameras spaced evenly in azimuth on a sphere, looking at the origin.

    Elevation (degrees) cycles through ``elevations`` from view to view.
    """
    focal = 0.5 * width / np.tan(0.5 * np.deg2rad(fov_deg))
    poses = []
    for i in range(n):
        az = phase + 2.0 * np.pi * i / n
        el = np.deg2rad(elevations[i % len(elevations)])
        eye = radius * np.array([np.cos(el) * np.cos(az), np.cos(el) * np.sin(az), np.sin(el)])
        poses.append(CameraPose(look_at(eye), eye, focal, width, height))
    return poses


def rotation_geodesic(Ra: np.ndarray, Rb: np.ndarray) -> float:
    """Angle in radians of the relative rotation ``Ra^T Rb``."""
    c = (np.trace(Ra.T @ Rb) - 1.0) / 2.0
    return float(np.arccos(np.clip(c, -1.0, 1.0)))


def write_poses(path, poses: Iterable[CameraPose]) -> None:
    """Write the plain-text pose format: ``width height focal`` then 3 rows of the 3x4 matrix."""
    blocks = []
    for p in poses:
        lines = [f"{p.width} {p.height} {float(p.focal)!r}"]
        for row in p.matrix():
            lines.append(" ".join(repr(float(v)) for v in row))
        blocks.append("\n".join(lines))
    Path(path).write_text("\n\n".join(blocks) + "\n")


def read_poses(path) -> list[CameraPose]:
    text = Path(path).read_text()
    poses = []
    for block in text.strip().split("\n\n"):
        lines = [ln for ln in block.strip().splitlines() if ln.strip()]
        if not lines:
            continue
        if len(lines) != 4:
            raise GeometryError(f"pose block needs 4 lines, got {len(lines)} in {path}")
        w, h, f = lines[0].split()
        m = np.array([[float(v) for v in ln.split()] for ln in lines[1:]])
        if m.shape != (3, 4):
            raise GeometryError(f"pose matrix must be 3x4 in {path}")
        poses.append(CameraPose(m[:, :3], m[:, 3], float(f), int(w), int(h)))
    return poses
