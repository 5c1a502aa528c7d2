"""Image to point cloud registration with channel-adaptive features and optimal-transport matching."""

from .config import PipelineConfig
from .features import FeatureGrid, PointFeatureSet
from .geometry import CameraIntrinsics, RigidTransform
from .matching import TransportPlan, sinkhorn
from .pipeline import run_pipeline
from .synth import NoiseSpec, SceneConfig, generate_scene

__version__ = "0.1.0"

__all__ = [
    "CameraIntrinsics", "FeatureGrid", "NoiseSpec", "PipelineConfig", "PointFeatureSet", "RigidTransform",
    "SceneConfig", "TransportPlan", "generate_scene", "run_pipeline", "sinkhorn",
]
