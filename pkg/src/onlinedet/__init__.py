"""On-line object-detection training over precomputed convolutional feature
maps: anchor-based region proposal learning with per-anchor kernel
classifiers, a per-class detection head, minibootstrapped hard-negative
mining, and AR/mAP evaluation utilities.
"""

from .data import Dataset, SynthConfig, generate_synthetic_dataset, load_dataset
from .detector import DetectionSet, OnlineDetector, assign_detector_labels
from .features import FeatureMap, region_feature, roi_align, unroll_feature_map
from .geometry import (
    AnchorConfig,
    decode_deltas,
    encode_deltas,
    generate_anchors,
    iou,
    iou_matrix,
    nms,
)
from .kernels import (
    KernelHyperParams,
    NystromKernelClassifier,
    RidgeScalarRegressor,
    gaussian_kernel,
)
from .metrics import ar_curve, average_recall, mean_ap, voc_average_precision
from .minibootstrap import MinibootstrapConfig, partition_negatives, run_minibootstrap
from .rpn import OnlineRpn, assign_anchor_labels
from .experiment import ExperimentConfig, StageConfig, hyperparameter_search, run_experiment

__version__ = "0.1.0"

__all__ = [
    "AnchorConfig",
    "Dataset",
    "DetectionSet",
    "ExperimentConfig",
    "FeatureMap",
    "KernelHyperParams",
    "MinibootstrapConfig",
    "NystromKernelClassifier",
    "OnlineDetector",
    "OnlineRpn",
    "RidgeScalarRegressor",
    "StageConfig",
    "SynthConfig",
    "ar_curve",
    "assign_anchor_labels",
    "assign_detector_labels",
    "average_recall",
    "decode_deltas",
    "encode_deltas",
    "gaussian_kernel",
    "generate_anchors",
    "generate_synthetic_dataset",
    "hyperparameter_search",
    "iou",
    "iou_matrix",
    "load_dataset",
    "mean_ap",
    "nms",
    "partition_negatives",
    "region_feature",
    "roi_align",
    "run_experiment",
    "run_minibootstrap",
    "unroll_feature_map",
    "voc_average_precision",
]
