"""Batch evaluation engine for large-vocabulary object detection.

Provides capped and pooled average-precision variants, the ranking
policies that control which detections enter evaluation, and per-class
score calibration fit from matched TP/FP labels.
"""

from .calibration import (
    BBQCalibrator,
    BetaCalibrator,
    CalibrationModel,
    HistogramCalibrator,
    IdentityCalibrator,
    IsotonicCalibrator,
    LabeledScore,
    PlattCalibrator,
    apply_calibration,
    expected_calibration_error,
    fit_bbq,
    fit_beta,
    fit_histogram,
    fit_isotonic,
    fit_per_class,
    fit_platt,
    label_for_calibration,
    load_calibration_model,
    save_calibration_model,
)
from .core import (
    BoundingBox,
    Category,
    DanglingReference,
    Dataset,
    Detection,
    DetectionSet,
    EvalConfig,
    FrequencyGroup,
    GroundTruthInstance,
    ImageRecord,
    Interpolation,
    IoFailure,
    LvevalError,
    MalformedFile,
    SchemaViolation,
    UndefinedCurve,
    frequency_group,
)
from .io import load_dataset, load_detections, save_dataset, save_detections, write_report
from .matching import MatchRecord, MatchSet, federated_filter, iou, match_dataset, match_group
from .metrics import (
    EvalReport,
    PRCurve,
    average_precision,
    evaluate,
    evaluate_pooled,
    game_comparison,
    pr_curve,
    score_distribution,
    subset_evaluate,
    sweep,
)
from .ranking import RankingPolicy, apply_policy, limit_per_class, limit_per_image

__version__ = "0.1.0"

__all__ = [
    "BBQCalibrator",
    "BetaCalibrator",
    "BoundingBox",
    "CalibrationModel",
    "Category",
    "DanglingReference",
    "Dataset",
    "Detection",
    "DetectionSet",
    "EvalConfig",
    "EvalReport",
    "FrequencyGroup",
    "GroundTruthInstance",
    "HistogramCalibrator",
    "IdentityCalibrator",
    "ImageRecord",
    "Interpolation",
    "IoFailure",
    "IsotonicCalibrator",
    "LabeledScore",
    "LvevalError",
    "MalformedFile",
    "MatchRecord",
    "MatchSet",
    "PRCurve",
    "PlattCalibrator",
    "RankingPolicy",
    "SchemaViolation",
    "UndefinedCurve",
    "apply_calibration",
    "apply_policy",
    "average_precision",
    "evaluate",
    "evaluate_pooled",
    "expected_calibration_error",
    "federated_filter",
    "fit_bbq",
    "fit_beta",
    "fit_histogram",
    "fit_isotonic",
    "fit_per_class",
    "fit_platt",
    "frequency_group",
    "game_comparison",
    "iou",
    "label_for_calibration",
    "limit_per_class",
    "limit_per_image",
    "load_calibration_model",
    "load_dataset",
    "load_detections",
    "match_dataset",
    "match_group",
    "pr_curve",
    "save_calibration_model",
    "save_dataset",
    "save_detections",
    "score_distribution",
    "subset_evaluate",
    "sweep",
    "write_report",
]
