"""Fiducial-marker SLAM with robust two-graph initialization."""

from .errors import FidSlamError
from .pipeline import Pipeline
from .scene import Scene, load_scene
from .se3 import Pose

__version__ = "0.1.0"

__all__ = ["FidSlamError", "Pipeline", "Pose", "Scene", "load_scene", "__version__"]
