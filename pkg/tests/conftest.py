"""Shared fixtures and independent oracles.

The warp oracle here deliberately avoids the homography code path: it
unprojects every target pixel onto the sweep plane, transforms through
world space, projects into the source camera, and samples bilinearly in
float64.  Agreement between this and the fast kernel is the backbone of
the geometric test suite.
"""

import numpy as np
import pytest

from sweepsynth.geometry import Camera, Intrinsics, RigidPose, project_point, unproject_pixel


def rotation_xyz(rx, ry, rz):
    cx, sx = np.cos(rx), np.sin(rx)
    cy, sy = np.cos(ry), np.sin(ry)
    cz, sz = np.cos(rz), np.sin(rz)
    mx = np.array([[1, 0, 0], [0, cx, -sx], [0, sx, cx]])
    my = np.array([[cy, 0, sy], [0, 1, 0], [-sy, 0, cy]])
    mz = np.array([[cz, -sz, 0], [sz, cz, 0], [0, 0, 1]])
    return mz @ my @ mx


def make_camera(width=64, height=48, f=60.0, center=None, angles=(0.0, 0.0, 0.0),
                position=(0.0, 0.0, 0.0)):
    if center is None:
        center = ((width - 1) / 2.0, (height - 1) / 2.0)
    r = rotation_xyz(*angles).T  # world-to-camera
    t = -r @ np.asarray(position, dtype=np.float64)
    return Camera(
        intrinsics=Intrinsics(fx=f, fy=f * 1.02, cx=center[0], cy=center[1],
                              width=width, height=height),
        pose=RigidPose(r, t),
    )


def random_camera_pair(rng, width=64, height=48, baseline=0.25, max_angle=0.06):
    """Source/target pair with a modest baseline and small rotations, as
    in a stereo-like rig; sweep planes at depth >= 1 stay in front of
    both cameras."""
    f = float(rng.uniform(0.8, 1.3)) * width
    tgt = make_camera(width, height, f=f,
                      angles=tuple(rng.uniform(-max_angle, max_angle, 3)),
                      position=tuple(rng.uniform(-0.05, 0.05, 3)))
    src = make_camera(width, height, f=f * float(rng.uniform(0.95, 1.05)),
                      angles=tuple(rng.uniform(-max_angle, max_angle, 3)),
                      position=tuple(rng.uniform(-baseline, baseline, 3)))
    return src, tgt


def bilinear_sample(img, u, v):
    """Float64 bilinear lookup with border clamping; caller guarantees
    coordinates inside [0, W-1] x [0, H-1]."""
    h, w = img.shape[:2]
    u = np.clip(np.asarray(u, dtype=np.float64), 0, w - 1)
    v = np.clip(np.asarray(v, dtype=np.float64), 0, h - 1)
    x0 = np.minimum(u.astype(np.int64), max(w - 2, 0))
    y0 = np.minimum(v.astype(np.int64), max(h - 2, 0))
    fx = (u - x0)[..., None]
    fy = (v - y0)[..., None]
    img = np.asarray(img, dtype=np.float64)
    c00 = img[y0, x0]
    c01 = img[y0, np.minimum(x0 + 1, w - 1)]
    c10 = img[np.minimum(y0 + 1, h - 1), x0]
    c11 = img[np.minimum(y0 + 1, h - 1), np.minimum(x0 + 1, w - 1)]
    return (c00 * (1 - fx) + c01 * fx) * (1 - fy) + (c10 * (1 - fx) + c11 * fx) * fy


def oracle_warp(src_img, src_cam, tgt_cam, depth):
    """Per-pixel unproject -> transform -> project -> bilinear oracle.

    Returns (warped float64, valid bool, (u, v) source coordinates)."""
    h, w = tgt_cam.height, tgt_cam.width
    us, vs = np.meshgrid(np.arange(w, dtype=np.float64), np.arange(h, dtype=np.float64))
    world = unproject_pixel(tgt_cam, us, vs, depth)
    u, v, z = project_point(src_cam, world)
    sw, sh = src_cam.width, src_cam.height
    valid = (z > 0) & (u >= 0) & (u <= sw - 1) & (v >= 0) & (v <= sh - 1)
    out = bilinear_sample(src_img, u, v) * valid[..., None]
    return out, valid, (u, v)


@pytest.fixture
def rng():
    return np.random.default_rng(20260810)
