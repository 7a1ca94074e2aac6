"""Plane sweep volumes: disparity-spaced depth sampling, homography
warping of source views into the target camera, and the non-learned
reference synthesizer that picks the best-corresponding plane per pixel.
"""

from dataclasses import dataclass

import numpy as np

from . import kernels
from .geometry import plane_homography

LUMA = np.array([0.299, 0.587, 0.114], dtype=np.float32)


class InvalidRange(ValueError):
    pass


@dataclass(frozen=True)
class DepthSampling:
    n_planes: int
    d_min: float
    d_max: float
    depths: np.ndarray  # ordered far -> near: depths[0] == d_max

    def __post_init__(self):
        object.__setattr__(self, "depths", np.asarray(self.depths, dtype=np.float64))


def sample_depths(n, d_min, d_max):
    """N plane depths linearly spaced in disparity (1/depth).

    disparity_i = 1/d_max + (i / (n-1)) * (1/d_min - 1/d_max); index 0 is
    the farthest plane (d_max), index n-1 the nearest (d_min).
    """
    if n < 2:
        raise InvalidRange(f"need at least 2 planes, got {n}")
    if not (0 < d_min < d_max):
        raise InvalidRange(f"need 0 < d_min < d_max, got ({d_min}, {d_max})")
    i = np.arange(n, dtype=np.float64)
    disparity = 1.0 / d_max + (i / (n - 1)) * (1.0 / d_min - 1.0 / d_max)
    depths = 1.0 / disparity
    depths[0] = d_max
    depths[-1] = d_min
    return DepthSampling(n_planes=n, d_min=d_min, d_max=d_max, depths=depths)


@dataclass(frozen=True)
class PlaneSweepVolume:
    target: object  # Camera
    sources: tuple  # K Cameras
    sampling: DepthSampling
    planes: np.ndarray  # (K*N, 3, H, W) float32 in [0, 1], source-major
    validity: np.ndarray  # (K*N, 1, H, W) float32 in {0, 1}

    @property
    def n_views(self):
        return len(self.sources)

    @property
    def n_planes(self):
        return self.sampling.n_planes


def warp_plane(src_img, src_cam, tgt_cam, depth):
    """Warp ``src_img`` (H, W, 3) into the target camera assuming all
    content lies on the fronto-parallel plane at ``depth``.

    Out-of-bounds target pixels get RGB 0 and validity 0; a pixel is
    valid iff its source coordinate lies in [0, W-1] x [0, H-1].
    """
    ih, iw = src_img.shape[:2]
    if (iw, ih) != (src_cam.width, src_cam.height):
        raise ValueError(
            f"image {iw}x{ih} does not match source intrinsics "
            f"{src_cam.width}x{src_cam.height}"
        )
    hm = plane_homography(src_cam, tgt_cam, depth)
    return kernels.warp_bilinear_rgb(src_img, hm, tgt_cam.height, tgt_cam.width)


def build_psv(images, cams, tgt, sampling, out=None):
    """Stack K warped views x N planes into a PlaneSweepVolume.

    Plane order is source-major: all planes of view 1 (far to near),
    then view 2, ...  Passing a previous volume of matching shape as
    ``out`` rewrites it in place (streaming use: skips reallocation).
    """
    if len(images) != len(cams):
        raise ValueError(f"{len(images)} images but {len(cams)} cameras")
    if len(images) < 2:
        raise ValueError("plane sweep needs at least two source views")
    k = len(images)
    n = sampling.n_planes
    h, w = tgt.height, tgt.width
    if out is not None and out.planes.shape == (k * n, 3, h, w):
        planes, validity = out.planes, out.validity
    else:
        planes = np.empty((k * n, 3, h, w), dtype=np.float32)
        validity = np.empty((k * n, 1, h, w), dtype=np.float32)
    for vi, (img, cam) in enumerate(zip(images, cams)):
        img = np.ascontiguousarray(img, dtype=np.float32)
        if (img.shape[1], img.shape[0]) != (cam.width, cam.height):
            raise ValueError(
                f"image {img.shape[1]}x{img.shape[0]} does not match source "
                f"intrinsics {cam.width}x{cam.height}"
            )
        for pi, depth in enumerate(sampling.depths):
            hm = plane_homography(cam, tgt, float(depth))
            kernels.warp_bilinear_rgb_planar(
                img, hm, planes[vi * n + pi], validity[vi * n + pi, 0]
            )
    return PlaneSweepVolume(
        target=tgt, sources=tuple(cams), sampling=sampling, planes=planes, validity=validity
    )


def grayscale_planes(psv):
    """Rec.601 luma of every plane: (K*N, 1, H, W)."""
    planes = psv.planes if isinstance(psv, PlaneSweepVolume) else psv
    return np.tensordot(LUMA, planes, axes=(0, 1))[:, None].astype(np.float32)


def normalize_for_net(x):
    """[0, 1] image data to the network domain [-1, 1]."""
    return np.asarray(x, dtype=np.float32) * 2.0 - 1.0


def denormalize(x):
    """Network output back to a clamped [0, 1] image."""
    return np.clip((np.asarray(x, dtype=np.float32) + 1.0) * 0.5, 0.0, 1.0)


def _box_filter(x, patch):
    """Mean over a patch x patch window (edge-cropped), via cumsum."""
    r = patch // 2
    h, w = x.shape[-2:]
    xp = np.pad(x, [(0, 0)] * (x.ndim - 2) + [(r + 1, r), (r + 1, r)])
    c = xp.cumsum(axis=-2).cumsum(axis=-1)
    s = (
        c[..., patch:, patch:]
        - c[..., :-patch, patch:]
        - c[..., patch:, :-patch]
        + c[..., :-patch, :-patch]
    )
    return s[..., :h, :w]


def hardwired_synthesize(psv, patch=5):
    """Non-learned reference synthesis for K = 2.

    Per pixel the plane with the smallest patch-mean squared difference
    between the two warped views (both-valid pixels only) is selected;
    the output copies view 1 there, falling back to whichever view is
    valid, else black.  Returns (image (H, W, 3), plane_index (H, W)).
    """
    if psv.n_views != 2:
        raise ValueError("hardwired synthesis is defined for exactly 2 views")
    n = psv.n_planes
    p1 = psv.planes[:n].astype(np.float64)
    p2 = psv.planes[n : 2 * n].astype(np.float64)
    v1 = psv.validity[:n, 0].astype(np.float64)
    v2 = psv.validity[n : 2 * n, 0].astype(np.float64)
    both = v1 * v2

    sq = ((p1 - p2) ** 2).sum(axis=1) * both  # (N, H, W)
    num = _box_filter(sq, patch)
    den = _box_filter(both, patch)
    with np.errstate(invalid="ignore", divide="ignore"):
        err = np.where(den > 0, num / den, np.inf)
    err = np.where(both > 0, err, np.inf)  # only both-valid pixels compete
    best = err.argmin(axis=0)  # (H, W); ties/all-inf resolve to plane 0

    iy, ix = np.indices(best.shape)
    out = p1[best, :, iy, ix]
    b1 = v1[best, iy, ix] > 0
    b2 = v2[best, iy, ix] > 0
    out = np.where(b1[..., None], out, np.where(b2[..., None], p2[best, :, iy, ix], 0.0))
    return out.astype(np.float32), best
