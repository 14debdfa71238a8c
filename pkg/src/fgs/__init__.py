"""Frequency-guided gaussian splatting SLAM for RGB-D sequences on CPU."""

from .core import (
    CameraIntrinsics,
    FrequencyClass,
    Gaussian,
    GaussianMap,
    Keyframe,
    KeyframeRole,
    MapKind,
    Pose,
    RgbdFrame,
    compose_poses,
    covariance_from_scale_rotation,
    invert_pose,
    transform_point,
)
from .config import PipelineConfig
from .datasets import SceneSpec, generate_synthetic_sequence
from .errors import (
    DatasetError,
    FgsError,
    InsufficientData,
    NumericalError,
    TrackingDivergence,
)
from .pipeline import RunResult, run_slam, write_artifacts

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics",
    "DatasetError",
    "FgsError",
    "FrequencyClass",
    "Gaussian",
    "GaussianMap",
    "InsufficientData",
    "Keyframe",
    "KeyframeRole",
    "MapKind",
    "NumericalError",
    "PipelineConfig",
    "Pose",
    "RgbdFrame",
    "RunResult",
    "SceneSpec",
    "TrackingDivergence",
    "compose_poses",
    "generate_synthetic_sequence",
    "run_slam",
    "write_artifacts",
    "covariance_from_scale_rotation",
    "invert_pose",
    "transform_point",
    "__version__",
]
