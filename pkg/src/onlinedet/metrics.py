"""Proposal and detection quality metrics: Average Recall over an IoU
threshold set, AR as a function of proposal count, and VOC-style Average
Precision / mAP.

All evaluators are pure functions of their inputs and depend on scores only
through their ranking.
"""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .geometry import iou_matrix

__all__ = [
    "DEFAULT_AR_THRESHOLDS",
    "PRCurve",
    "average_recall",
    "ar_curve",
    "voc_average_precision",
    "mean_ap",
]

DEFAULT_AR_THRESHOLDS = tuple(np.round(np.linspace(0.5, 0.95, 10), 10))


@dataclass
class PRCurve:
    """Precision/recall points accumulated in score order, plus their AP."""

    recalls: np.ndarray
    precisions: np.ndarray
    ap: float


def _greedy_matched_ious(proposals, gts) -> np.ndarray:
    """Best-IoU-first one-to-one matching; returns each gt's matched IoU.

    Pairs are taken in order of decreasing IoU (ties: lower proposal index,
    then lower gt index); each proposal and each gt matches at most once.
    Unmatched gts get 0. Thresholding these values at t reproduces the
    greedy matching restricted to pairs with IoU >= t.
    """
    gts = np.asarray(gts, dtype=np.float64).reshape(-1, 4)
    proposals = np.asarray(proposals, dtype=np.float64).reshape(-1, 4)
    matched = np.zeros(gts.shape[0])
    if gts.shape[0] == 0 or proposals.shape[0] == 0:
        return matched
    overlaps = iou_matrix(proposals, gts)
    flat = overlaps.reshape(-1)
    order = np.argsort(-flat, kind="stable")
    used_p = np.zeros(proposals.shape[0], dtype=bool)
    used_g = np.zeros(gts.shape[0], dtype=bool)
    n_g = gts.shape[0]
    remaining = min(proposals.shape[0], n_g)
    for k in order:
        if flat[k] <= 0 or remaining == 0:
            break
        p, g = divmod(int(k), n_g)
        if used_p[p] or used_g[g]:
            continue
        used_p[p] = used_g[g] = True
        matched[g] = flat[k]
        remaining -= 1
    return matched


def average_recall(proposals_per_image, gts_per_image, iou_thresholds=None) -> float:
    """Mean, over the IoU threshold set, of the matched fraction of ground
    truths under greedy one-to-one matching. Proposals are plain (N, 4)
    boxes; ordering does not matter here (use ar_curve for top-n prefixes).
    """
    if iou_thresholds is None:
        iou_thresholds = DEFAULT_AR_THRESHOLDS
    thresholds = np.asarray(iou_thresholds, dtype=np.float64)
    if thresholds.size == 0 or np.any(np.diff(thresholds) <= 0):
        raise ValueError("iou_thresholds must be strictly increasing and nonempty")
    if np.any(thresholds <= 0) or np.any(thresholds >= 1):
        raise ValueError("iou_thresholds must lie in (0, 1)")
    if len(proposals_per_image) != len(gts_per_image):
        raise ValueError("proposals and ground truths must align per image")

    matched = [
        _greedy_matched_ious(props, gts)
        for props, gts in zip(proposals_per_image, gts_per_image)
    ]
    matched = np.concatenate(matched) if matched else np.empty(0)
    if matched.shape[0] == 0:
        raise ValueError("average recall is undefined without ground truths")
    # A gt whose matched IoU ties the threshold counts as matched.
    recalls = [(matched >= t).mean() for t in thresholds]
    return float(np.mean(recalls))


def ar_curve(proposals_per_image, gts_per_image, n_values, iou_thresholds=None):
    """AR computed on the top-n prefix of each image's score-sorted proposals,
    for each n in ``n_values``. Returns a list of (n, AR) pairs; AR is
    non-decreasing in n. When n exceeds an image's proposal count, all its
    proposals are used and a warning flags the shortfall.
    """
    n_values = [int(n) for n in n_values]
    if any(n < 1 for n in n_values):
        raise ValueError("proposal counts must be positive")
    max_available = max((np.asarray(p).reshape(-1, 4).shape[0] for p in proposals_per_image), default=0)
    if any(n > max_available for n in n_values):
        warnings.warn(
            f"requested up to {max(n_values)} proposals but images have at most {max_available}"
        )
    out = []
    for n in n_values:
        prefix = [np.asarray(p, dtype=np.float64).reshape(-1, 4)[:n] for p in proposals_per_image]
        out.append((n, average_recall(prefix, gts_per_image, iou_thresholds)))
    return out


def voc_average_precision(detections_per_image, gts_per_image, iou_thr: float = 0.5,
                          mode: str = "voc07") -> PRCurve:
    """Average precision for one class over a whole image set.

    ``detections_per_image`` holds (boxes, scores) per image; ``gts_per_image``
    holds (N, 4) boxes per image. Detections are processed in globally
    descending score order; each takes its highest-IoU still-unmatched
    ground truth in its image and is a true positive when that IoU reaches
    ``iou_thr``, otherwise a false positive. ``mode`` selects the 11-point
    interpolated AP ("voc07") or the all-points envelope area ("all_points").
    """
    if mode not in ("voc07", "all_points"):
        raise ValueError(f"unknown AP mode {mode!r}")
    if len(detections_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must align per image")
    npos = sum(np.asarray(g).reshape(-1, 4).shape[0] for g in gts_per_image)
    if npos == 0:
        raise ValueError("AP is undefined for a class without ground truths")

    image_idx, boxes, scores = [], [], []
    for i, det in enumerate(detections_per_image):
        b = np.asarray(det[0], dtype=np.float64).reshape(-1, 4)
        s = np.asarray(det[1], dtype=np.float64).reshape(-1)
        image_idx.append(np.full(b.shape[0], i, dtype=np.intp))
        boxes.append(b)
        scores.append(s)
    image_idx = np.concatenate(image_idx) if image_idx else np.empty(0, dtype=np.intp)
    boxes = np.concatenate(boxes) if boxes else np.empty((0, 4))
    scores = np.concatenate(scores) if scores else np.empty(0)
    order = np.argsort(-scores, kind="stable")

    gt_used = [np.zeros(np.asarray(g).reshape(-1, 4).shape[0], dtype=bool) for g in gts_per_image]
    tp = np.zeros(order.shape[0])
    fp = np.zeros(order.shape[0])
    for rank, k in enumerate(order):
        i = image_idx[k]
        gts = np.asarray(gts_per_image[i], dtype=np.float64).reshape(-1, 4)
        free = ~gt_used[i]
        if gts.shape[0] == 0 or not np.any(free):
            fp[rank] = 1
            continue
        overlaps = iou_matrix(boxes[k], gts[free]).reshape(-1)
        best = int(np.argmax(overlaps))
        if overlaps[best] >= iou_thr:
            tp[rank] = 1
            gt_used[i][np.flatnonzero(free)[best]] = True
        else:
            fp[rank] = 1

    cum_tp = np.cumsum(tp)
    cum_fp = np.cumsum(fp)
    recalls = cum_tp / npos
    precisions = cum_tp / np.maximum(cum_tp + cum_fp, 1)

    if mode == "voc07":
        ap = 0.0
        for t in np.linspace(0, 1, 11):
            mask = recalls >= t
            ap += (precisions[mask].max() if np.any(mask) else 0.0) / 11.0
    else:
        mrec = np.concatenate([[0.0], recalls, [1.0]])
        mpre = np.concatenate([[0.0], precisions, [0.0]])
        for i in range(mpre.size - 1, 0, -1):
            mpre[i - 1] = max(mpre[i - 1], mpre[i])
        changed = np.flatnonzero(mrec[1:] != mrec[:-1])
        ap = float(np.sum((mrec[changed + 1] - mrec[changed]) * mpre[changed + 1]))
    return PRCurve(recalls=recalls, precisions=precisions, ap=float(ap))


def mean_ap(detections_per_image, gts_per_image, iou_thr: float = 0.5,
            mode: str = "voc07"):
    """Unweighted mean of per-class AP over the classes with ground truths.

    ``detections_per_image`` holds DetectionSet-like objects (boxes,
    class_ids, scores); ``gts_per_image`` holds (boxes, class_ids) pairs.
    Returns (mAP, {class_id: AP}). Classes carrying detections but no
    ground truths are skipped with a warning.
    """
    if len(detections_per_image) != len(gts_per_image):
        raise ValueError("detections and ground truths must align per image")
    gt_classes = set()
    det_classes = set()
    for boxes, classes in gts_per_image:
        gt_classes.update(int(c) for c in np.asarray(classes).reshape(-1))
    for det in detections_per_image:
        det_classes.update(int(c) for c in np.asarray(det.class_ids).reshape(-1))
    if not gt_classes:
        raise ValueError("mAP is undefined without any ground-truth class")
    for c in sorted(det_classes - gt_classes):
        warnings.warn(f"class {c} has detections but no ground truths; excluded from mAP")

    per_class = {}
    for c in sorted(gt_classes):
        dets_c = []
        gts_c = []
        for det, (gboxes, gclasses) in zip(detections_per_image, gts_per_image):
            mask = np.asarray(det.class_ids).reshape(-1) == c
            dets_c.append((np.asarray(det.boxes).reshape(-1, 4)[mask],
                           np.asarray(det.scores).reshape(-1)[mask]))
            gmask = np.asarray(gclasses).reshape(-1) == c
            gts_c.append(np.asarray(gboxes, dtype=np.float64).reshape(-1, 4)[gmask])
        per_class[c] = voc_average_precision(dets_c, gts_c, iou_thr=iou_thr, mode=mode).ap
    return float(np.mean(list(per_class.values()))), per_class
