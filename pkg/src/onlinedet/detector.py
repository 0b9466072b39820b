"""On-line detection head: per-class kernel classifiers and per-class box
refiners over RoI-pooled region features from the proposal stage.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import TrainingError
from .features import FeatureMap, region_feature_matrix
from .geometry import decode_deltas, degenerate_mask, encode_deltas, iou_matrix, nms
from .kernels import (
    ConstantScorer,
    IdentityDeltaRegressor,
    KernelHyperParams,
    fit_delta_regressors,
    predict_deltas,
)
from .minibootstrap import MinibootstrapConfig, run_minibootstrap

__all__ = [
    "DetectorAssignment",
    "DetectionSet",
    "assign_detector_labels",
    "OnlineDetector",
    "write_detections",
    "read_detections",
]

IGNORED = -1
BACKGROUND = 0


@dataclass
class DetectorAssignment:
    """Per-proposal class label (-1 ignored, 0 background, 1..C foreground),
    matched ground-truth index, best IoU, and the proposal boxes themselves
    (including any appended ground-truth boxes)."""

    boxes: np.ndarray
    labels: np.ndarray
    matched_gt: np.ndarray
    max_iou: np.ndarray


@dataclass
class DetectionSet:
    """Final scored, class-labeled boxes for one image, best score first."""

    boxes: np.ndarray
    class_ids: np.ndarray
    scores: np.ndarray

    def __len__(self) -> int:
        return self.boxes.shape[0]


def assign_detector_labels(proposals, gt_boxes, gt_classes,
                           fg_iou: float = 0.5, bg_iou: float = 0.3,
                           append_gt: bool = True) -> DetectorAssignment:
    """Label proposals for the detection stage.

    A proposal is foreground (label = class of its best-overlapping ground
    truth) when its best IoU is at least ``fg_iou``, background when below
    ``bg_iou``, and ignored in between. Ground-truth boxes are appended to
    the proposal set as guaranteed foreground unless ``append_gt`` is off.
    """
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)
    classes = np.asarray(gt_classes, dtype=np.intp).reshape(-1)
    if append_gt and gt.shape[0]:
        proposals = np.concatenate([proposals, gt], axis=0)
    n = proposals.shape[0]
    if gt.shape[0] == 0:
        return DetectorAssignment(
            boxes=proposals,
            labels=np.full(n, BACKGROUND, dtype=np.intp),
            matched_gt=np.full(n, -1, dtype=np.intp),
            max_iou=np.zeros(n),
        )
    overlaps = iou_matrix(proposals, gt)
    max_iou = overlaps.max(axis=1)
    matched = overlaps.argmax(axis=1).astype(np.intp)
    labels = np.full(n, IGNORED, dtype=np.intp)
    labels[max_iou < bg_iou] = BACKGROUND
    fg = max_iou >= fg_iou
    labels[fg] = classes[matched[fg]]
    return DetectorAssignment(boxes=proposals, labels=labels, matched_gt=matched, max_iou=max_iou)


class _SubsetPool:
    """Pool view over selected rows of a shared feature matrix."""

    def __init__(self, matrix, rows):
        self.matrix = matrix
        self.rows = np.asarray(rows, dtype=np.intp)

    def __len__(self) -> int:
        return self.rows.shape[0]

    def take(self, indices) -> np.ndarray:
        return self.matrix[self.rows[np.asarray(indices, dtype=np.intp)]]


class OnlineDetector(BaseEstimator):
    """Per-class detection head trained on proposals from an OnlineRpn.

    ``fit`` generates proposals for every training image, pools their
    region features, and trains one binary kernel classifier (positives:
    foreground of that class; negatives: background plus foreground of the
    other classes, minibootstrapped) and four offset refiners per class.
    ``detect`` scores each proposal with all class classifiers, refines the
    ones above the score threshold, and applies per-class NMS.
    """

    def __init__(self, rpn, n_classes, hyper=None, minibootstrap=None,
                 pool_size=7, pool_mode="flatten", samples_per_bin=2,
                 fg_iou=0.5, bg_iou=0.3, score_threshold=0.0,
                 nms_threshold=0.3, train_top_n=None, ridge_lam=None, seed=0):
        self.rpn = rpn
        self.n_classes = n_classes
        self.hyper = hyper
        self.minibootstrap = minibootstrap
        self.pool_size = pool_size
        self.pool_mode = pool_mode
        self.samples_per_bin = samples_per_bin
        self.fg_iou = fg_iou
        self.bg_iou = bg_iou
        self.score_threshold = score_threshold
        self.nms_threshold = nms_threshold
        self.train_top_n = train_top_n
        self.ridge_lam = ridge_lam
        self.seed = seed

    def fit(self, dataset):
        if self.n_classes < 1:
            raise TrainingError("need at least one class")
        hyper = self.hyper if self.hyper is not None else KernelHyperParams()
        mb = self.minibootstrap if self.minibootstrap is not None else MinibootstrapConfig()

        features = []
        labels = []
        boxes_all = []
        gt_box_all = []
        for idx, rec in enumerate(dataset.records):
            m = dataset.feature_map(idx)
            proposals, _ = self.rpn.propose(
                m, top_n=self.train_top_n, image_size=(rec.width, rec.height)
            )
            assignment = assign_detector_labels(
                proposals, rec.boxes, rec.class_ids, fg_iou=self.fg_iou, bg_iou=self.bg_iou
            )
            keep = assignment.labels != IGNORED
            kept_boxes = assignment.boxes[keep]
            feats = region_feature_matrix(
                m, kept_boxes, mode=self.pool_mode,
                pool=self.pool_size, samples_per_bin=self.samples_per_bin,
            )
            features.append(feats)
            labels.append(assignment.labels[keep])
            boxes_all.append(kept_boxes)
            matched = assignment.matched_gt[keep]
            gt_for = np.where(
                matched[:, None] >= 0, rec.boxes[matched], kept_boxes
            ) if rec.boxes.shape[0] else kept_boxes
            gt_box_all.append(gt_for)

        features = np.concatenate(features, axis=0)
        labels = np.concatenate(labels)
        boxes_all = np.concatenate(boxes_all, axis=0)
        gt_box_all = np.concatenate(gt_box_all, axis=0)

        ridge_lam = self.ridge_lam if self.ridge_lam is not None else hyper.lam
        self.classifiers_ = []
        self.regressors_ = []
        self.minibootstrap_states_ = []
        for c in range(1, self.n_classes + 1):
            pos_mask = labels == c
            neg_rows = np.flatnonzero(~pos_mask)  # background + other-class foreground
            if not np.any(pos_mask) or neg_rows.size == 0:
                warnings.warn(f"class {c} has no positive proposals; using a degenerate scorer")
                self.classifiers_.append(ConstantScorer(-1.0))
                self.regressors_.append([IdentityDeltaRegressor() for _ in range(4)])
                self.minibootstrap_states_.append(None)
                continue
            pool = _SubsetPool(features, neg_rows)
            mb_c = dataclasses.replace(mb, seed=_class_seed(self.seed, c))
            model, state = run_minibootstrap(features[pos_mask], pool, mb_c, hyper)
            deltas = encode_deltas(boxes_all[pos_mask], gt_box_all[pos_mask])
            self.classifiers_.append(model)
            self.regressors_.append(fit_delta_regressors(features[pos_mask], deltas, ridge_lam))
            self.minibootstrap_states_.append(state)
        self.feature_dim_ = features.shape[1]
        return self

    def detect(self, m: FeatureMap, image_size=None, top_n=None) -> DetectionSet:
        image_size = m.image_size if image_size is None else image_size
        proposals, _ = self.rpn.propose(m, top_n=top_n, image_size=image_size)
        if proposals.shape[0] == 0:
            return _empty_detections()
        feats = region_feature_matrix(
            m, proposals, mode=self.pool_mode,
            pool=self.pool_size, samples_per_bin=self.samples_per_bin,
        )
        out_boxes, out_classes, out_scores = [], [], []
        for c in range(1, self.n_classes + 1):
            scores = self.classifiers_[c - 1].decision_function(feats)
            mask = scores >= self.score_threshold
            if not np.any(mask):
                continue
            deltas = predict_deltas(self.regressors_[c - 1], feats[mask])
            refined = decode_deltas(proposals[mask], deltas, clip_to=image_size)
            ok = ~degenerate_mask(refined)
            refined, kept_scores = refined[ok], scores[mask][ok]
            if refined.shape[0] == 0:
                continue
            keep = nms(refined, kept_scores, self.nms_threshold)
            out_boxes.append(refined[keep])
            out_classes.append(np.full(keep.shape[0], c, dtype=np.intp))
            out_scores.append(kept_scores[keep])
        if not out_boxes:
            return _empty_detections()
        boxes = np.concatenate(out_boxes, axis=0)
        classes = np.concatenate(out_classes)
        scores = np.concatenate(out_scores)
        order = np.argsort(-scores, kind="stable")
        return DetectionSet(boxes=boxes[order], class_ids=classes[order], scores=scores[order])


def _empty_detections() -> DetectionSet:
    return DetectionSet(
        boxes=np.empty((0, 4)), class_ids=np.empty(0, dtype=np.intp), scores=np.empty(0)
    )


def _class_seed(seed, c: int):
    if seed is None:
        return None
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(c,)).generate_state(1)[0])


def write_detections(path, per_image) -> None:
    """Dump detections as text: per image a header ``image <id> <count>``
    followed by lines ``class_id x1 y1 x2 y2 score``, best score first.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, det in per_image.items():
            fh.write(f"image {image_id} {len(det)}\n")
            for b, c, s in zip(det.boxes, det.class_ids, det.scores):
                fh.write(f"{c} {b[0]:.17g} {b[1]:.17g} {b[2]:.17g} {b[3]:.17g} {s:.17g}\n")


def read_detections(path) -> dict:
    """Inverse of write_detections; returns {image_id: DetectionSet}."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) != 3 or parts[0] != "image":
            raise ValueError(f"{path}:{i + 1}: expected an image header line")
        image_id, count = parts[1], int(parts[2])
        classes, boxes, scores = [], [], []
        for k in range(count):
            fields = lines[i + 1 + k].split()
            classes.append(int(fields[0]))
            boxes.append([float(v) for v in fields[1:5]])
            scores.append(float(fields[5]))
        out[image_id] = DetectionSet(
            boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
            class_ids=np.asarray(classes, dtype=np.intp),
            scores=np.asarray(scores, dtype=np.float64),
        )
        i += 1 + count
    return out
