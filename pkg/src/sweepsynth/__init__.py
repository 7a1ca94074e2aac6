"""sweepsynth: depth-independent novel view synthesis.

Input views are warped into the target camera over a disparity-sampled
stack of fronto-parallel planes (a plane sweep volume); a learned
pipeline of self-supervised soft masks, grouped gated convolutions, and
a U-Net fusion network synthesizes the target image directly from the
stack, with no explicit depth estimate.
"""

from .geometry import Camera, Intrinsics, RigidPose, plane_homography, relative_pose
from .network import PRESETS, Model, ModelVariant, get_variant, model_forward, param_count
from .psv import DepthSampling, PlaneSweepVolume, build_psv, sample_depths, warp_plane

__all__ = [
    "Camera",
    "DepthSampling",
    "Intrinsics",
    "Model",
    "ModelVariant",
    "PlaneSweepVolume",
    "PRESETS",
    "RigidPose",
    "build_psv",
    "get_variant",
    "model_forward",
    "param_count",
    "plane_homography",
    "relative_pose",
    "sample_depths",
    "warp_plane",
]

__version__ = "0.1.0"
