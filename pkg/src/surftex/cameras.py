"""Perspective view cameras on a ring around the object.

Convention: world is y-up, the object sits at the origin (meshes are
normalized into [-0.5, 0.5]^3). A camera is placed by azimuth/elevation on a
sphere of the given distance and looks at the origin. Camera space is
x=right, y=up, z=forward, so depth is positive in front of the camera.
Pixel (row, col) centers sit at continuous coordinates (col+0.5, row+0.5),
row 0 at the top of the image.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np

_UP = np.array([0.0, 1.0, 0.0])


@dataclass(frozen=True)
class ViewCamera:
    azimuth_deg: float
    elevation_deg: float
    distance: float
    fov_deg: float
    resolution: int

    def __post_init__(self):
        if self.distance <= 0:
            raise ValueError("camera distance must be positive")
        if not 0.0 < self.fov_deg < 180.0:
            raise ValueError("fov must be in (0, 180) degrees")
        if self.resolution <= 0:
            raise ValueError("resolution must be positive")

    @property
    def eye(self) -> np.ndarray:
        az = np.deg2rad(self.azimuth_deg)
        el = np.deg2rad(self.elevation_deg)
        return self.distance * np.array(
            [np.cos(el) * np.sin(az), np.sin(el), np.cos(el) * np.cos(az)]
        )

    def basis(self) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
        """(right, up, forward) unit vectors; forward points at the origin."""
        eye = self.eye
        forward = -eye / np.linalg.norm(eye)
        up_hint = _UP
        if abs(forward @ up_hint) > 1.0 - 1e-9:  # looking straight up/down
            up_hint = np.array([0.0, 0.0, 1.0])
        right = np.cross(forward, up_hint)
        right /= np.linalg.norm(right)
        up = np.cross(right, forward)
        return right, up, forward

    @property
    def tan_half_fov(self) -> float:
        return float(np.tan(np.deg2rad(self.fov_deg) / 2.0))

    def world_to_camera(self, points: np.ndarray) -> np.ndarray:
        """Map (..., 3) world points to camera coords (x right, y up, z depth)."""
        right, up, forward = self.basis()
        rel = np.asarray(points, dtype=np.float64) - self.eye
        return np.stack([rel @ right, rel @ up, rel @ forward], axis=-1)

    def project(self, points: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
        """Project world points to continuous pixel coords.

        Returns (pix, depth): pix is (..., 2) with x in [0, W] and y in
        [0, H] inside the frustum (y grows downward); depth is the positive
        camera-space z. Points at or behind the eye plane get depth <= 0 and
        non-finite pixel coords.
        """
        cam = self.world_to_camera(points)
        depth = cam[..., 2]
        with np.errstate(divide="ignore", invalid="ignore"):
            ndc_x = cam[..., 0] / (depth * self.tan_half_fov)
            ndc_y = cam[..., 1] / (depth * self.tan_half_fov)
        res = self.resolution
        px = (ndc_x + 1.0) * 0.5 * res
        py = (1.0 - ndc_y) * 0.5 * res
        return np.stack([px, py], axis=-1), depth

    def pixel_rays(self) -> tuple[np.ndarray, np.ndarray]:
        """Ray origins/directions through all pixel centers; dirs unit length."""
        res = self.resolution
        right, up, forward = self.basis()
        cols = (np.arange(res) + 0.5) / res * 2.0 - 1.0
        rows = 1.0 - (np.arange(res) + 0.5) / res * 2.0
        gx, gy = np.meshgrid(cols, rows)
        t = self.tan_half_fov
        dirs = gx[..., None] * t * right + gy[..., None] * t * up + forward
        dirs /= np.linalg.norm(dirs, axis=-1, keepdims=True)
        origins = np.broadcast_to(self.eye, dirs.shape)
        return origins, dirs

    def with_resolution(self, resolution: int) -> "ViewCamera":
        return replace(self, resolution=resolution)


def make_camera_ring(
    n_views: int,
    distance: float = 2.0,
    fov_deg: float = 35.0,
    resolution: int = 64,
    elevation_deg: float = 0.0,
) -> list[ViewCamera]:
    """Evenly spaced azimuths starting at 0 (8 views: 0, 45, ..., 315)."""
    if n_views < 1:
        raise ValueError("need at least one view")
    return [
        ViewCamera(
            azimuth_deg=360.0 * k / n_views,
            elevation_deg=elevation_deg,
            distance=distance,
            fov_deg=fov_deg,
            resolution=resolution,
        )
        for k in range(n_views)
    ]


def angles_to_reference(cameras: list[ViewCamera]) -> np.ndarray:
    """Angle (radians) between each camera's eye vector and the first camera's."""
    eyes = np.stack([c.eye for c in cameras])
    eyes = eyes / np.linalg.norm(eyes, axis=1, keepdims=True)
    cosines = np.clip(eyes @ eyes[0], -1.0, 1.0)
    return np.arccos(cosines)
