"""Continuous-time articulated motion fields estimated from event-camera streams."""
from __future__ import annotations

import hashlib
from functools import lru_cache
from importlib import resources

__version__ = "0.1.0"


@lru_cache(maxsize=1)
def build_hash() -> str:
    """Short digest of the package sources, stable across runs of one build."""
    h = hashlib.sha256()
    root = resources.files(__name__)
    for entry in sorted(root.iterdir(), key=lambda e: e.name):
        if entry.name.endswith(".py"):
            h.update(entry.name.encode())
            h.update(entry.read_bytes())
    return h.hexdigest()[:12]


from .events import EventStream, load as load_events, save as save_events  # noqa: E402
from .kinematics import BodyModel, Camera, Pose, load_model  # noqa: E402
from .losses import JointSet, LossWeights  # noqa: E402
from .motion_field import LatentCode, MotionField  # noqa: E402
from .fit import FitConfig, FitReport, Supervision, fit_latent  # noqa: E402

__all__ = [
    "BodyModel", "Camera", "EventStream", "FitConfig", "FitReport", "JointSet", "LatentCode",
    "LossWeights", "MotionField", "Pose", "Supervision", "build_hash", "fit_latent", "load_events",
    "load_model", "save_events", "__version__",
]
