"""Pinhole cameras, rigid transforms, and plane-induced homographies.

Conventions (fixed for the whole package):
  * poses are world-to-camera: X_cam = R @ X_world + t
  * pixel (0, 0) is the center of the top-left pixel
  * sweep planes are fronto-parallel in the *target* camera, i.e. the
    plane normal is the target optical axis (0, 0, 1)
  * all geometry runs in float64; the warp kernel may downcast
"""

from dataclasses import dataclass

import numpy as np


class SingularIntrinsics(ValueError):
    """Intrinsic matrix is not invertible (violated type invariant)."""


@dataclass(frozen=True)
class Intrinsics:
    fx: float
    fy: float
    cx: float
    cy: float
    width: int
    height: int

    def __post_init__(self):
        if not (self.fx > 0 and self.fy > 0):
            raise ValueError(f"focal lengths must be positive, got ({self.fx}, {self.fy})")
        if not (0 <= self.cx < self.width and 0 <= self.cy < self.height):
            raise ValueError(
                f"principal point ({self.cx}, {self.cy}) outside "
                f"{self.width}x{self.height} image"
            )

    @property
    def matrix(self):
        return np.array(
            [[self.fx, 0.0, self.cx], [0.0, self.fy, self.cy], [0.0, 0.0, 1.0]],
            dtype=np.float64,
        )

    @property
    def matrix_inv(self):
        k = self.matrix
        if abs(k[0, 0] * k[1, 1]) < 1e-300:
            raise SingularIntrinsics("intrinsic matrix is singular")
        return np.array(
            [
                [1.0 / self.fx, 0.0, -self.cx / self.fx],
                [0.0, 1.0 / self.fy, -self.cy / self.fy],
                [0.0, 0.0, 1.0],
            ],
            dtype=np.float64,
        )

    def scaled(self, factor):
        """Intrinsics for the same camera at ``factor`` times the resolution."""
        return Intrinsics(
            fx=self.fx * factor,
            fy=self.fy * factor,
            cx=(self.cx + 0.5) * factor - 0.5,
            cy=(self.cy + 0.5) * factor - 0.5,
            width=int(round(self.width * factor)),
            height=int(round(self.height * factor)),
        )


@dataclass(frozen=True)
class RigidPose:
    """World-to-camera rigid transform: X_cam = rotation @ X_world + translation."""

    rotation: np.ndarray
    translation: np.ndarray

    def __post_init__(self):
        r = np.asarray(self.rotation, dtype=np.float64).reshape(3, 3)
        t = np.asarray(self.translation, dtype=np.float64).reshape(3)
        object.__setattr__(self, "rotation", r)
        object.__setattr__(self, "translation", t)
        if np.max(np.abs(r @ r.T - np.eye(3))) > 1e-6:
            raise ValueError("rotation is not orthonormal within 1e-6")
        if abs(np.linalg.det(r) - 1.0) > 1e-6:
            raise ValueError("rotation determinant is not +1 within 1e-6")

    @staticmethod
    def identity():
        return RigidPose(np.eye(3), np.zeros(3))

    @property
    def center(self):
        """Camera center in world coordinates."""
        return -self.rotation.T @ self.translation

    def apply(self, points):
        """World points (..., 3) to camera coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        return pts @ self.rotation.T + self.translation

    def invert(self, points):
        """Camera points (..., 3) back to world coordinates."""
        pts = np.asarray(points, dtype=np.float64)
        return (pts - self.translation) @ self.rotation


@dataclass(frozen=True)
class Camera:
    intrinsics: Intrinsics
    pose: RigidPose

    @property
    def width(self):
        return self.intrinsics.width

    @property
    def height(self):
        return self.intrinsics.height


def relative_pose(src, tgt):
    """Pose mapping target-camera coordinates into the source camera.

    R_rel = R_src @ R_tgt^T,  t_rel = t_src - R_rel @ t_tgt
    """
    r_rel = src.pose.rotation @ tgt.pose.rotation.T
    t_rel = src.pose.translation - r_rel @ tgt.pose.translation
    return RigidPose(r_rel, t_rel)


def plane_homography(src, tgt, depth):
    """3x3 map from target pixels to source pixels induced by the
    fronto-parallel plane at ``depth`` meters in the target camera.

    H = K_src (R_rel + t_rel n^T / depth) K_tgt^-1  with n = (0, 0, 1).
    """
    if depth <= 0:
        raise ValueError(f"plane depth must be positive, got {depth}")
    rel = relative_pose(src, tgt)
    m = rel.rotation.copy()
    m[:, 2] += rel.translation / depth
    return src.intrinsics.matrix @ m @ tgt.intrinsics.matrix_inv


def project_point(cam, point_world):
    """Pinhole projection; returns (u, v, z_cam).  z_cam <= 0 means the
    point is behind (or on) the camera plane and (u, v) are unusable."""
    xc = cam.pose.apply(point_world)
    z = xc[..., 2]
    with np.errstate(divide="ignore", invalid="ignore"):
        u = cam.intrinsics.fx * xc[..., 0] / z + cam.intrinsics.cx
        v = cam.intrinsics.fy * xc[..., 1] / z + cam.intrinsics.cy
    return u, v, z


def unproject_pixel(cam, u, v, depth):
    """World point at camera-frame depth ``depth`` along the ray of (u, v)."""
    if np.any(np.asarray(depth) <= 0):
        raise ValueError("unprojection depth must be positive")
    u = np.asarray(u, dtype=np.float64)
    v = np.asarray(v, dtype=np.float64)
    d = np.asarray(depth, dtype=np.float64)
    x = (u - cam.intrinsics.cx) / cam.intrinsics.fx * d
    y = (v - cam.intrinsics.cy) / cam.intrinsics.fy * d
    pts_cam = np.stack(np.broadcast_arrays(x, y, d), axis=-1)
    return cam.pose.invert(pts_cam)


def nearest_rotation(m):
    """Closest rotation matrix in the Frobenius sense (via SVD)."""
    u, _, vt = np.linalg.svd(np.asarray(m, dtype=np.float64).reshape(3, 3))
    r = u @ vt
    if np.linalg.det(r) < 0:
        u[:, 2] = -u[:, 2]
        r = u @ vt
    return r
