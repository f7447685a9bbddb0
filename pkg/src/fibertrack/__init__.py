"""Unsupervised fiber detection and tracking in serial-section image stacks."""

from .core import BBox, Detection, iou, nms
from .detector import DetectorConfig, SlidingWindowDetector, detect, fine_tune, train
from .evaluation import detection_metrics, mot_metrics
from .initializer import InitConfig, initialize_pseudo_gt
from .loop import LoopConfig, SelfTrainingLoop, run_algorithm1
from .synthgen import SynthConfig, generate
from .tracker import KalmanBoxTracker, TrackerConfig, track_sequence

__version__ = "0.1.0"

__all__ = [
    "BBox", "Detection", "iou", "nms",
    "DetectorConfig", "SlidingWindowDetector", "detect", "fine_tune", "train",
    "detection_metrics", "mot_metrics",
    "InitConfig", "initialize_pseudo_gt",
    "LoopConfig", "SelfTrainingLoop", "run_algorithm1",
    "SynthConfig", "generate",
    "KalmanBoxTracker", "TrackerConfig", "track_sequence",
]
