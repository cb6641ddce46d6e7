"""One-shot object detection: find a query image inside a larger target image."""

from .aggregation import SETTINGS, AggregationSetting, QueryDescriptor, query_descriptors
from .backbone import (
    FeaturePyramid,
    PreprocessSpec,
    WeightsBundle,
    forward,
    load_weights,
    make_random_weights,
    preprocess,
    save_weights,
)
from .detection import Detection, DetectionConfig, DetectionResult, detect, detect_full
from .evaluation import (
    BenchmarkReport,
    EvalResult,
    GroundTruth,
    box_iou,
    evaluate,
    match_detections,
    run_benchmark,
)
from .similarity import FusedScore, fused_score_map
from .synthetic import calibrated_weights, detection_corpus, distractor_corpus

__version__ = "0.1.0"

__all__ = [
    "SETTINGS",
    "AggregationSetting",
    "QueryDescriptor",
    "query_descriptors",
    "FeaturePyramid",
    "PreprocessSpec",
    "WeightsBundle",
    "forward",
    "load_weights",
    "make_random_weights",
    "preprocess",
    "save_weights",
    "Detection",
    "DetectionConfig",
    "DetectionResult",
    "detect",
    "detect_full",
    "BenchmarkReport",
    "EvalResult",
    "GroundTruth",
    "box_iou",
    "evaluate",
    "match_detections",
    "run_benchmark",
    "FusedScore",
    "fused_score_map",
    "calibrated_weights",
    "detection_corpus",
    "distractor_corpus",
    "__version__",
]
