"""Spherical camera poses and the pinhole camera model shared by both renderers."""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np


@dataclass(frozen=True)
class CameraPose:
    """Sensor placement in spherical coordinates around ``target``.

    ``theta`` is the polar angle from the vertical (+y) axis, so 0 is
    straight overhead; ``phi`` is the azimuth in the x-z plane measured from +x
    towards +z. Angles are in degrees.
    """

    r: float
    theta: float
    phi: float
    fov_y: float = 45.0
    width: int = 96
    height: int = 96
    target: tuple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        if not self.r > 0:
            raise ValueError(f"r must be > 0, got {self.r}")
        if not 0.0 <= self.theta <= 90.0:
            raise ValueError(f"theta must lie in [0, 90], got {self.theta}")
        if not np.isfinite(self.phi):
            raise ValueError(f"phi must be finite, got {self.phi}")
        # azimuth is periodic; store it in [0, 360)
        phi = float(self.phi) % 360.0
        object.__setattr__(self, "phi", 0.0 if phi >= 360.0 else phi)
        if self.width < 16 or self.height < 16:
            raise ValueError("image must be at least 16x16")
        if not 0.0 < self.fov_y < 180.0:
            raise ValueError("fov_y must lie in (0, 180)")
        object.__setattr__(self, "target", tuple(float(t) for t in self.target))

    def to_dict(self) -> dict:
        return {"r": self.r, "theta": self.theta, "phi": self.phi, "fov_y": self.fov_y,
                "width": self.width, "height": self.height, "target": list(self.target)}

    @classmethod
    def from_dict(cls, d: dict) -> "CameraPose":
        return cls(r=float(d["r"]), theta=float(d["theta"]), phi=float(d["phi"]),
                   fov_y=float(d.get("fov_y", 45.0)), width=int(d.get("width", 96)),
                   height=int(d.get("height", 96)), target=tuple(d.get("target", (0, 0, 0))))


@dataclass(frozen=True)
class Camera:
    """Resolved pinhole camera: position, orthonormal basis and projection.

    ``view`` maps world to camera coordinates (x right, y up, camera looking
    down -z); ``projection`` is an OpenGL-style perspective matrix.
    """

    position: np.ndarray
    forward: np.ndarray
    right: np.ndarray
    up: np.ndarray
    tan_y: float
    tan_x: float
    width: int
    height: int
    view: np.ndarray = field(repr=False)
    projection: np.ndarray = field(repr=False)

    def pixel_rays(self) -> np.ndarray:
        """Unnormalized ray directions through pixel centers, shape (H, W, 3).

        Each direction has unit component along ``forward``, so ray parameter
        equals view depth.
        """
        a = ((np.arange(self.width) + 0.5) / self.width * 2.0 - 1.0) * self.tan_x
        b = ((np.arange(self.height) + 0.5) / self.height * 2.0 - 1.0) * self.tan_y
        return (self.forward[None, None, :] + a[None, :, None] * self.right[None, None, :]
                - b[:, None, None] * self.up[None, None, :])

    def project(self, points: np.ndarray) -> np.ndarray:
        """World points (N, 3) -> (col, row, depth) with pixel centers at integers."""
        rel = np.asarray(points, float) - self.position
        z = rel @ self.forward
        x = (rel @ self.right) / z / self.tan_x
        y = (rel @ self.up) / z / self.tan_y
        col = (x + 1.0) / 2.0 * self.width - 0.5
        row = (1.0 - y) / 2.0 * self.height - 0.5
        return np.stack([col, row, z], axis=-1)


def spherical_position(pose: CameraPose) -> np.ndarray:
    t, p = np.deg2rad(pose.theta), np.deg2rad(pose.phi)
    return pose.r * np.array([np.sin(t) * np.cos(p), np.cos(t), np.sin(t) * np.sin(p)]) + np.array(pose.target)


def camera_from_spherical(pose: CameraPose, near: float = 1e-3, far: float = 1e3) -> Camera:
    """Place a look-at camera on the sphere of radius ``pose.r`` around the target.

    Image up is the direction of increasing elevation on the sphere; at the
    pole (theta = 0) it is world -x.
    """
    t, p = np.deg2rad(pose.theta), np.deg2rad(pose.phi % 360.0)
    pos = spherical_position(pose)
    forward = np.array(pose.target) - pos
    forward /= np.linalg.norm(forward)
    if np.sin(t) < 1e-12:
        up = np.array([-1.0, 0.0, 0.0])
    else:
        up = np.array([-np.cos(t) * np.cos(p), np.sin(t), -np.cos(t) * np.sin(p)])
    up = up - np.dot(up, forward) * forward
    up /= np.linalg.norm(up)
    right = np.cross(forward, up)
    right /= np.linalg.norm(right)

    view = np.eye(4)
    view[0, :3], view[1, :3], view[2, :3] = right, up, -forward
    view[:3, 3] = -view[:3, :3] @ pos
    tan_y = float(np.tan(np.deg2rad(pose.fov_y) / 2.0))
    aspect = pose.width / pose.height
    proj = np.zeros((4, 4))
    proj[0, 0] = 1.0 / (tan_y * aspect)
    proj[1, 1] = 1.0 / tan_y
    proj[2, 2] = -(far + near) / (far - near)
    proj[2, 3] = -2.0 * far * near / (far - near)
    proj[3, 2] = -1.0
    return Camera(pos, forward, right, up, tan_y, tan_y * aspect, pose.width, pose.height, view, proj)
