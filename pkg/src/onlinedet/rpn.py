"""On-line region proposal learning: per-anchor label assignment, one kernel
classifier plus four offset regressors per anchor, and proposal inference.
"""

from __future__ import annotations

import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np
from sklearn.base import BaseEstimator

from .exceptions import TrainingError
from .features import FeatureMap, unroll_feature_map
from .geometry import (
    AnchorConfig,
    box_areas,
    clip_boxes,
    decode_deltas,
    degenerate_mask,
    encode_deltas,
    generate_anchors,
    iou_matrix,
    nms,
)
from .kernels import (
    ConstantScorer,
    IdentityDeltaRegressor,
    KernelHyperParams,
    fit_delta_regressors,
    predict_deltas,
)
from .minibootstrap import MinibootstrapConfig, run_minibootstrap

__all__ = [
    "AnchorAssignment",
    "assign_anchor_labels",
    "OnlineRpn",
    "write_proposals",
    "read_proposals",
]

POSITIVE = 1
IGNORE = 0
NEGATIVE = -1


@dataclass
class AnchorAssignment:
    """Per-anchor label (+1 positive, 0 ignore, -1 negative), matched ground
    truth index (-1 when there are no ground truths), and best IoU."""

    labels: np.ndarray
    matched_gt: np.ndarray
    max_iou: np.ndarray


def boundary_outside_fraction(anchors, image_size) -> np.ndarray:
    """Fraction of each anchor's area falling outside the image."""
    areas = box_areas(anchors)
    clipped = clip_boxes(anchors, image_size)
    inside = np.clip(clipped[:, 2] - clipped[:, 0], 0, None) * np.clip(
        clipped[:, 3] - clipped[:, 1], 0, None
    )
    return 1.0 - inside / areas


def assign_anchor_labels(anchors, gt_boxes, pos_iou: float = 0.7, neg_iou: float = 0.3,
                         image_size=None, boundary_ignore_fraction: float | None = None
                         ) -> AnchorAssignment:
    """Label every anchor positive, negative or ignore against ground truth.

    Positive: IoU strictly above ``pos_iou`` with some ground truth, or the
    anchor ties the best IoU for a ground truth (applied per ground truth
    whenever that best IoU is nonzero, regardless of the ``pos_iou`` rule).
    Negative: best IoU strictly below ``neg_iou``. Everything else is
    ignored. With ``image_size`` and ``boundary_ignore_fraction`` set,
    anchors whose outside-image area fraction exceeds the threshold are
    forced to ignore, overriding the rules above.
    """
    anchors = np.asarray(anchors, dtype=np.float64).reshape(-1, 4)
    n = anchors.shape[0]
    if n == 0:
        raise ValueError("anchors must be nonempty")
    gt = np.asarray(gt_boxes, dtype=np.float64).reshape(-1, 4)

    if gt.shape[0] == 0:
        labels = np.full(n, NEGATIVE, dtype=np.int8)
        matched = np.full(n, -1, dtype=np.intp)
        max_iou = np.zeros(n)
    else:
        overlaps = iou_matrix(anchors, gt)
        max_iou = overlaps.max(axis=1)
        matched = overlaps.argmax(axis=1).astype(np.intp)
        labels = np.full(n, IGNORE, dtype=np.int8)
        labels[max_iou < neg_iou] = NEGATIVE
        labels[max_iou > pos_iou] = POSITIVE
        # Argmax fallback: the best anchors for each ground truth become
        # positive even below pos_iou, ties included, zero-overlap excluded.
        gt_best = overlaps.max(axis=0)
        for g in range(gt.shape[0]):
            if gt_best[g] <= 0:
                continue
            labels[overlaps[:, g] == gt_best[g]] = POSITIVE

    if image_size is not None and boundary_ignore_fraction is not None:
        outside = boundary_outside_fraction(anchors, image_size)
        labels[outside > boundary_ignore_fraction] = IGNORE

    return AnchorAssignment(labels=labels, matched_gt=matched, max_iou=max_iou)


class _CellPool:
    """Lazy negative pool over (image, cell) pairs of a dataset.

    Rows are fetched on demand from the dataset's feature maps, so cells
    outside the visited minibootstrap batches are never materialized.
    """

    def __init__(self, dataset, image_idx, cell_idx):
        self.dataset = dataset
        self.image_idx = np.asarray(image_idx, dtype=np.intp)
        self.cell_idx = np.asarray(cell_idx, dtype=np.intp)

    def __len__(self) -> int:
        return self.image_idx.shape[0]

    def take(self, indices) -> np.ndarray:
        indices = np.asarray(indices, dtype=np.intp)
        imgs = self.image_idx[indices]
        cells = self.cell_idx[indices]
        out = None
        for img in np.unique(imgs):
            rows = unroll_feature_map(self.dataset.feature_map(int(img)))
            sel = imgs == img
            if out is None:
                out = np.empty((indices.shape[0], rows.shape[1]))
            out[sel] = rows[cells[sel]]
        return out


class OnlineRpn(BaseEstimator):
    """Anchor-based region proposal learner with per-anchor kernel scorers.

    ``fit`` consumes a dataset of feature maps with ground-truth boxes and
    trains, for each of the A anchors, a binary objectness classifier via
    minibootstrapped hard-negative mining plus four ridge refiners on the
    box offsets. ``propose`` scores every feature-map cell with every
    anchor's classifier, refines, clips, and returns the top boxes after
    greedy NMS.
    """

    def __init__(self, anchors=None, hyper=None, minibootstrap=None,
                 pre_nms_top_k=2000, nms_threshold=0.7, top_n=300,
                 pos_iou=0.7, neg_iou=0.3, boundary_ignore_fraction=0.3,
                 ridge_lam=None, seed=0):
        self.anchors = anchors
        self.hyper = hyper
        self.minibootstrap = minibootstrap
        self.pre_nms_top_k = pre_nms_top_k
        self.nms_threshold = nms_threshold
        self.top_n = top_n
        self.pos_iou = pos_iou
        self.neg_iou = neg_iou
        self.boundary_ignore_fraction = boundary_ignore_fraction
        self.ridge_lam = ridge_lam
        self.seed = seed

    def _resolved(self):
        anchors = self.anchors if self.anchors is not None else AnchorConfig()
        hyper = self.hyper if self.hyper is not None else KernelHyperParams()
        mb = self.minibootstrap if self.minibootstrap is not None else MinibootstrapConfig()
        return anchors, hyper, mb

    def fit(self, dataset):
        anchor_cfg, hyper, mb = self._resolved()
        num_a = anchor_cfg.num_anchors
        pos_feats = [[] for _ in range(num_a)]
        pos_deltas = [[] for _ in range(num_a)]
        neg_imgs = [[] for _ in range(num_a)]
        neg_cells = [[] for _ in range(num_a)]
        feature_dim = None

        for idx, rec in enumerate(dataset.records):
            m = dataset.feature_map(idx)
            if feature_dim is None:
                feature_dim = m.f
            elif m.f != feature_dim:
                raise TrainingError(
                    f"image {rec.image_id}: channel count {m.f} != {feature_dim}"
                )
            anchors = generate_anchors(anchor_cfg, m.h, m.w)
            assignment = assign_anchor_labels(
                anchors,
                rec.boxes,
                pos_iou=self.pos_iou,
                neg_iou=self.neg_iou,
                image_size=(rec.width, rec.height),
                boundary_ignore_fraction=self.boundary_ignore_fraction,
            )
            labels = assignment.labels.reshape(-1, num_a)
            matched = assignment.matched_gt.reshape(-1, num_a)
            cells = unroll_feature_map(m)
            for a in range(num_a):
                pos_cells = np.flatnonzero(labels[:, a] == POSITIVE)
                if pos_cells.size:
                    pos_feats[a].append(cells[pos_cells])
                    anchor_boxes = anchors.reshape(-1, num_a, 4)[pos_cells, a]
                    gt_for = rec.boxes[matched[pos_cells, a]]
                    pos_deltas[a].append(encode_deltas(anchor_boxes, gt_for))
                neg = np.flatnonzero(labels[:, a] == NEGATIVE)
                if neg.size:
                    neg_imgs[a].append(np.full(neg.size, idx, dtype=np.intp))
                    neg_cells[a].append(neg)

        if all(len(p) == 0 for p in pos_feats):
            raise TrainingError("no anchor received a positive sample anywhere")

        ridge_lam = self.ridge_lam if self.ridge_lam is not None else hyper.lam
        self.classifiers_ = []
        self.regressors_ = []
        self.minibootstrap_states_ = []
        for a in range(num_a):
            if not pos_feats[a] or not neg_imgs[a]:
                warnings.warn(f"anchor {a} has no positives; using a degenerate scorer")
                self.classifiers_.append(ConstantScorer(-1.0))
                self.regressors_.append([IdentityDeltaRegressor() for _ in range(4)])
                self.minibootstrap_states_.append(None)
                continue
            positives = np.concatenate(pos_feats[a], axis=0)
            deltas = np.concatenate(pos_deltas[a], axis=0)
            pool = _CellPool(
                dataset,
                np.concatenate(neg_imgs[a]),
                np.concatenate(neg_cells[a]),
            )
            mb_a = dataclasses.replace(mb, seed=_anchor_seed(self.seed, a))
            model, state = run_minibootstrap(positives, pool, mb_a, hyper)
            self.classifiers_.append(model)
            self.regressors_.append(fit_delta_regressors(positives, deltas, ridge_lam))
            self.minibootstrap_states_.append(state)
        self.feature_dim_ = feature_dim
        self.anchor_config_ = anchor_cfg
        return self

    def propose(self, m: FeatureMap, top_n: int | None = None, image_size=None):
        """Score, refine and select proposals on one map.

        Returns (boxes, scores) sorted by descending score, at most
        ``top_n`` rows (post-NMS). ``image_size`` defaults to the map's
        nominal stride * extent size.
        """
        if m.f != self.feature_dim_:
            raise ValueError(f"feature dim {m.f} != trained {self.feature_dim_}")
        top_n = self.top_n if top_n is None else top_n
        image_size = m.image_size if image_size is None else image_size
        num_a = self.anchor_config_.num_anchors
        cells = unroll_feature_map(m)
        anchors = generate_anchors(self.anchor_config_, m.h, m.w)

        scores = np.empty((cells.shape[0], num_a))
        deltas = np.empty((cells.shape[0], num_a, 4))
        for a in range(num_a):
            scores[:, a] = self.classifiers_[a].decision_function(cells)
            deltas[:, a, :] = predict_deltas(self.regressors_[a], cells)
        flat_scores = scores.reshape(-1)
        boxes = decode_deltas(anchors, deltas.reshape(-1, 4), clip_to=image_size)

        valid = ~degenerate_mask(boxes)
        boxes, flat_scores = boxes[valid], flat_scores[valid]
        order = np.argsort(-flat_scores, kind="stable")[: self.pre_nms_top_k]
        boxes, flat_scores = boxes[order], flat_scores[order]
        keep = nms(boxes, flat_scores, self.nms_threshold, max_keep=top_n)
        return boxes[keep], flat_scores[keep]


def _anchor_seed(seed, a: int):
    if seed is None:
        return None
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(a,)).generate_state(1)[0])


def write_proposals(path, per_image) -> None:
    """Dump proposals as text: per image a header line ``image <id> <count>``
    followed by count lines ``x1 y1 x2 y2 score`` in descending score order.
    """
    with open(path, "w", encoding="utf-8") as fh:
        for image_id, (boxes, scores) in per_image.items():
            boxes = np.asarray(boxes, dtype=np.float64).reshape(-1, 4)
            scores = np.asarray(scores, dtype=np.float64).reshape(-1)
            fh.write(f"image {image_id} {boxes.shape[0]}\n")
            for b, s in zip(boxes, scores):
                fh.write(f"{b[0]:.17g} {b[1]:.17g} {b[2]:.17g} {b[3]:.17g} {s:.17g}\n")


def read_proposals(path) -> dict:
    """Inverse of write_proposals; returns {image_id: (boxes, scores)}."""
    out = {}
    with open(path, "r", encoding="utf-8") as fh:
        lines = fh.read().splitlines()
    i = 0
    while i < len(lines):
        parts = lines[i].split()
        if len(parts) != 3 or parts[0] != "image":
            raise ValueError(f"{path}:{i + 1}: expected an image header line")
        image_id, count = parts[1], int(parts[2])
        rows = [tuple(float(v) for v in lines[i + 1 + k].split()) for k in range(count)]
        boxes = np.asarray([r[:4] for r in rows], dtype=np.float64).reshape(-1, 4)
        scores = np.asarray([r[4] for r in rows], dtype=np.float64)
        out[image_id] = (boxes, scores)
        i += 1 + count
    return out
