"""Camera poses and per-pixel ray (Plücker) embeddings.

Conventions, stated once:
  * rotation is world<-camera (columns are the camera axes in world space),
    stored row-major; world_point = R @ cam_point + t.
  * the camera looks down +z in camera space (OpenCV style), +x right,
    +y down.
  * pixel (u, v) rays pass through the pixel center (u + 0.5, v + 0.5).
  * ray moments are m = origin x direction with the direction unit-length
    and the moment left at physical scale.

All arrays are float64 numpy; everything here is a pure function of its
inputs.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

_ORTHO_TOL = 1e-6


class GeometryError(ValueError):
    pass


@dataclass(frozen=True)
class CameraPose:
    """Pinhole camera: world<-camera rotation, translation, intrinsics."""

    rotation: np.ndarray        # (3, 3)
    translation: np.ndarray     # (3,)
    focal: tuple[float, float]          # (fx, fy) pixels
    principal_point: tuple[float, float]  # (cx, cy) pixels
    resolution: tuple[int, int]           # (width, height) pixels

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if not np.all(np.isfinite(r)) or not np.all(np.isfinite(t)):
            raise GeometryError("pose contains non-finite values")
        if np.max(np.abs(r.T @ r - np.eye(3))) > _ORTHO_TOL:
            raise GeometryError("rotation is not orthonormal")
        if abs(np.linalg.det(r) - 1.0) > _ORTHO_TOL:
            raise GeometryError("rotation determinant must be +1")
        fx, fy = self.focal
        if not (fx > 0 and fy > 0):
            raise GeometryError(f"focal lengths must be positive, got {self.focal}")
        w, h = self.resolution
        if not (w > 0 and h > 0):
            raise GeometryError(f"resolution must be positive, got {self.resolution}")

    @property
    def width(self) -> int:
        return int(self.resolution[0])

    @property
    def height(self) -> int:
        return int(self.resolution[1])

    @property
    def center(self) -> np.ndarray:
        """Camera center in world coordinates."""
        return self.translation

    def to_record(self) -> dict:
        """JSON-friendly record: 12 floats row-major [R|t], intrinsics, size."""
        rt = np.concatenate([self.rotation, self.translation[:, None]], axis=1)
        return {
            "extrinsics": [float(v) for v in rt.reshape(-1)],
            "fx": float(self.focal[0]),
            "fy": float(self.focal[1]),
            "cx": float(self.principal_point[0]),
            "cy": float(self.principal_point[1]),
            "width": int(self.resolution[0]),
            "height": int(self.resolution[1]),
        }

    @staticmethod
    def from_record(rec: dict) -> "CameraPose":
        rt = np.asarray(rec["extrinsics"], dtype=np.float64).reshape(3, 4)
        return CameraPose(
            rotation=rt[:, :3],
            translation=rt[:, 3],
            focal=(rec["fx"], rec["fy"]),
            principal_point=(rec["cx"], rec["cy"]),
            resolution=(rec["width"], rec["height"]),
        )


@dataclass(frozen=True)
class PosedImage:
    """An RGB image (H, W, 3) float32 in [0, 1] paired with its camera."""

    image: np.ndarray
    pose: CameraPose

    def __post_init__(self):
        img = np.ascontiguousarray(self.image, dtype=np.float32)
        object.__setattr__(self, "image", img)
        h, w = img.shape[:2]
        if (w, h) != tuple(self.pose.resolution):
            raise GeometryError(
                f"image is {w}x{h} but pose resolution is {self.pose.resolution}"
            )


@dataclass(frozen=True)
class PluckerGrid:
    """Per-pixel ray embedding: unit directions and moments, (H, W, 3) each."""

    directions: np.ndarray
    moments: np.ndarray

    @property
    def channels(self) -> np.ndarray:
        """(H, W, 6) array, direction channels first."""
        return np.concatenate([self.directions, self.moments], axis=-1)


def pixel_ray(pose: CameraPose, u: float, v: float) -> tuple[np.ndarray, np.ndarray]:
    """World-space ray through pixel center (u+0.5, v+0.5).

    Returns (origin, unit direction); origin is the camera center.
    """
    if not (0 <= u < pose.width and 0 <= v < pose.height):
        raise GeometryError(
            f"pixel ({u}, {v}) outside image of size {pose.resolution}"
        )
    fx, fy = pose.focal
    cx, cy = pose.principal_point
    d_cam = np.array([(u + 0.5 - cx) / fx, (v + 0.5 - cy) / fy, 1.0])
    d = pose.rotation @ d_cam
    return pose.center.copy(), d / np.linalg.norm(d)


def ray_grid(pose: CameraPose) -> np.ndarray:
    """Unit ray directions for every pixel, (H, W, 3). Vectorized pixel_ray."""
    w, h = pose.width, pose.height
    fx, fy = pose.focal
    cx, cy = pose.principal_point
    u = (np.arange(w, dtype=np.float64) + 0.5 - cx) / fx
    v = (np.arange(h, dtype=np.float64) + 0.5 - cy) / fy
    d_cam = np.empty((h, w, 3), dtype=np.float64)
    d_cam[..., 0] = u[None, :]
    d_cam[..., 1] = v[:, None]
    d_cam[..., 2] = 1.0
    d = d_cam @ pose.rotation.T
    return d / np.linalg.norm(d, axis=-1, keepdims=True)


def plucker_grid(pose: CameraPose) -> PluckerGrid:
    """Plücker embedding (d, m = o x d) for every pixel of the camera."""
    d = ray_grid(pose)
    m = np.cross(np.broadcast_to(pose.center, d.shape), d)
    return PluckerGrid(directions=d, moments=m)


def project_point(pose: CameraPose, point: np.ndarray) -> tuple[float, float, float]:
    """Project a world point to continuous pixel coords; returns (u, v, depth).

    u/v are in pixel-center coordinates (subtract nothing to index: the pixel
    containing the projection is (floor(u), floor(v))). depth <= 0 means the
    point is behind the camera.
    """
    p_cam = pose.rotation.T @ (np.asarray(point, dtype=np.float64) - pose.center)
    z = p_cam[2]
    if z <= 0:
        return np.nan, np.nan, z
    fx, fy = pose.focal
    cx, cy = pose.principal_point
    return p_cam[0] / z * fx + cx, p_cam[1] / z * fy + cy, z


def look_at_pose(
    position: np.ndarray,
    target: np.ndarray,
    resolution: tuple[int, int],
    focal: tuple[float, float],
    up: np.ndarray = (0.0, 1.0, 0.0),
) -> CameraPose:
    """Camera at `position` looking toward `target`, principal point centered."""
    position = np.asarray(position, dtype=np.float64)
    z = np.asarray(target, dtype=np.float64) - position
    nz = np.linalg.norm(z)
    if nz < 1e-12:
        raise GeometryError("look_at target coincides with camera position")
    z = z / nz
    x = np.cross(z, np.asarray(up, dtype=np.float64))  # camera +y points down
    nx = np.linalg.norm(x)
    if nx < 1e-9:
        x = np.cross(z, np.array([1.0, 0.0, 0.0]))
        nx = np.linalg.norm(x)
    x = x / nx
    y = np.cross(z, x)  # completes a proper rotation (det +1) by construction
    r = np.stack([x, y, z], axis=1)
    w, h = resolution
    return CameraPose(
        rotation=r,
        translation=position,
        focal=focal,
        principal_point=(w / 2.0, h / 2.0),
        resolution=(int(w), int(h)),
    )
