"""Mutual context network for joint egocentric gaze prediction and action recognition."""

from .core import ClipSample, GazePoint, ModelConfig, augment_sample, make_gaussian_gt_map, preprocess_flow
from .inference import InferenceConfig, InferenceTrace, joint_infer, predict_gaze_point
from .model import MCN

__all__ = [
    "ClipSample",
    "GazePoint",
    "ModelConfig",
    "MCN",
    "InferenceConfig",
    "InferenceTrace",
    "augment_sample",
    "joint_infer",
    "make_gaussian_gt_map",
    "predict_gaze_point",
    "preprocess_flow",
]
