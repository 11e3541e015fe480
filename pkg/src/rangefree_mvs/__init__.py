"""Depth-range-free multi-view stereo by iterative epipolar disparity flows."""

from .geometry import CameraView, DepthMap, Intrinsics, Pose
from .refiner import ModelConfig, RangeFreeMVS, RefinerConfig, run_inference

__all__ = ["CameraView", "DepthMap", "Intrinsics", "Pose", "ModelConfig", "RangeFreeMVS", "RefinerConfig",
           "run_inference"]
__version__ = "0.1.0"
