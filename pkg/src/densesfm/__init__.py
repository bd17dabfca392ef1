"""Dense-matching structure-from-motion refinement.

Stages: mutual verification of dense matches, pairwise track assembly and
triangulation, splat-visibility track extension, kernelized multi-view track
refinement and robust bundle adjustment.
"""

from .errors import *  # noqa: F401,F403
from .geometry import CameraIntrinsics, CameraPose, triangulate, sampson_distance
from .tracks import ImageView, Observation, Provenance, SceneModel, Track

__all__ = [
    "CameraIntrinsics",
    "CameraPose",
    "ImageView",
    "Observation",
    "Provenance",
    "SceneModel",
    "Track",
    "sampson_distance",
    "triangulate",
]
__version__ = "0.1.0"
