"""Dual-branch (geometry + reflectance) LiDAR semantic segmentation at desk scale."""

__version__ = "0.1.0"

from .errors import GRCError
from .lidar_io import PointCloud, SceneSpec, SensorModel, corrupt_weather, generate_scene, random_scene_spec
from .model import GRCNet, ModelConfig
from .train import TrainSettings, evaluate, train_loop
from .estimator import GRCSegmenter

__all__ = [
    "GRCError", "PointCloud", "SceneSpec", "SensorModel", "corrupt_weather", "generate_scene",
    "random_scene_spec", "GRCNet", "ModelConfig", "TrainSettings", "evaluate", "train_loop",
    "GRCSegmenter",
]
