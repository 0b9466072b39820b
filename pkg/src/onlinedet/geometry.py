"""Box algebra: IoU, anchor grids, delta encoding/decoding and NMS.

Boxes are (x1, y1, x2, y2) corner arrays with exclusive continuous corners:
width = x2 - x1 with no +1 correction. Functions accept a single (4,) box
or an (N, 4) stack and are vectorized over rows.
"""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .exceptions import ConfigError
from .validation import as_float_array, check_boxes

__all__ = [
    "AnchorConfig",
    "iou",
    "iou_matrix",
    "generate_anchors",
    "encode_deltas",
    "decode_deltas",
    "clip_boxes",
    "box_areas",
    "degenerate_mask",
    "nms",
]


@dataclass(frozen=True)
class AnchorConfig:
    """Anchor grid layout: side lengths in pixels, height/width ratios, stride.

    An anchor of scale s and ratio r has width s/sqrt(r) and height s*sqrt(r),
    preserving area s^2. A = len(scales) * len(aspect_ratios) anchors per cell.
    """

    scales: tuple = (128.0, 256.0, 512.0)
    aspect_ratios: tuple = (0.5, 1.0, 2.0)
    stride: int = 16

    def __post_init__(self):
        object.__setattr__(self, "scales", tuple(float(s) for s in self.scales))
        object.__setattr__(self, "aspect_ratios", tuple(float(r) for r in self.aspect_ratios))
        if not self.scales or not self.aspect_ratios:
            raise ConfigError("anchor scales and aspect_ratios must be nonempty")
        if min(self.scales) <= 0 or min(self.aspect_ratios) <= 0:
            raise ConfigError("anchor scales and aspect_ratios must be positive")
        if self.stride < 1:
            raise ConfigError("anchor stride must be a positive integer")

    @property
    def num_anchors(self) -> int:
        return len(self.scales) * len(self.aspect_ratios)

    def cell_boxes(self) -> np.ndarray:
        """The A anchor boxes centered at the origin, ordered scale-major."""
        boxes = np.empty((self.num_anchors, 4))
        k = 0
        for s in self.scales:
            for r in self.aspect_ratios:
                w = s / np.sqrt(r)
                h = s * np.sqrt(r)
                boxes[k] = (-w / 2, -h / 2, w / 2, h / 2)
                k += 1
        return boxes


def box_areas(boxes) -> np.ndarray:
    b = as_float_array(boxes)
    b = b.reshape(-1, 4)
    return (b[:, 2] - b[:, 0]) * (b[:, 3] - b[:, 1])


def degenerate_mask(boxes) -> np.ndarray:
    """True where a box has collapsed to zero or negative area."""
    b = as_float_array(boxes).reshape(-1, 4)
    return (b[:, 2] <= b[:, 0]) | (b[:, 3] <= b[:, 1])


def iou(a, b) -> float:
    """Intersection over union of two single boxes. Degenerate boxes raise."""
    a = check_boxes(a, name="a")
    b = check_boxes(b, name="b")
    if a.shape[0] != 1 or b.shape[0] != 1:
        raise ValueError("iou expects single boxes; use iou_matrix for stacks")
    return float(iou_matrix(a, b)[0, 0])


def iou_matrix(boxes_a, boxes_b) -> np.ndarray:
    """Pairwise IoU between an (N, 4) and an (M, 4) stack; returns (N, M)."""
    a = as_float_array(boxes_a).reshape(-1, 4)
    b = as_float_array(boxes_b).reshape(-1, 4)
    if a.shape[0] == 0 or b.shape[0] == 0:
        return np.zeros((a.shape[0], b.shape[0]))
    x1 = np.maximum(a[:, None, 0], b[None, :, 0])
    y1 = np.maximum(a[:, None, 1], b[None, :, 1])
    x2 = np.minimum(a[:, None, 2], b[None, :, 2])
    y2 = np.minimum(a[:, None, 3], b[None, :, 3])
    inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
    area_a = box_areas(a)[:, None]
    area_b = box_areas(b)[None, :]
    union = area_a + area_b - inter
    return inter / union


def generate_anchors(cfg: AnchorConfig, map_h: int, map_w: int,
                     image_w: int | None = None, image_h: int | None = None) -> np.ndarray:
    """Anchor boxes for every feature-map cell, shape (map_h*map_w*A, 4).

    Anchor (i, j, a) is centered at ((j+0.5)*stride, (i+0.5)*stride) and
    appears at flat index (i*map_w + j)*A + a, matching the row-major order
    of unrolled feature maps. Anchors may extend past image borders; the
    grid does not depend on the image size (clipping is a separate step).
    """
    if map_h < 1 or map_w < 1:
        raise ConfigError("feature-map dimensions must be >= 1")
    base = cfg.cell_boxes()  # (A, 4), centered at origin
    cx = (np.arange(map_w) + 0.5) * cfg.stride
    cy = (np.arange(map_h) + 0.5) * cfg.stride
    shifts = np.stack(
        [
            np.tile(cx, map_h),
            np.repeat(cy, map_w),
            np.tile(cx, map_h),
            np.repeat(cy, map_w),
        ],
        axis=1,
    )  # (h*w, 4) in row-major cell order
    anchors = shifts[:, None, :] + base[None, :, :]
    return anchors.reshape(-1, 4)


def _centers_sizes(boxes):
    b = as_float_array(boxes).reshape(-1, 4)
    w = b[:, 2] - b[:, 0]
    h = b[:, 3] - b[:, 1]
    cx = b[:, 0] + 0.5 * w
    cy = b[:, 1] + 0.5 * h
    return cx, cy, w, h


def encode_deltas(anchors, targets) -> np.ndarray:
    """Regression targets (tx, ty, tw, th) mapping each anchor to its target.

    tx = (cx_t - cx_a) / w_a, ty = (cy_t - cy_a) / h_a,
    tw = log(w_t / w_a),      th = log(h_t / h_a).
    """
    a = check_boxes(anchors, name="anchors")
    t = check_boxes(targets, name="targets")
    acx, acy, aw, ah = _centers_sizes(a)
    tcx, tcy, tw, th = _centers_sizes(t)
    out = np.stack(
        [(tcx - acx) / aw, (tcy - acy) / ah, np.log(tw / aw), np.log(th / ah)],
        axis=1,
    )
    return out[0] if np.asarray(anchors).ndim == 1 else out


def decode_deltas(anchors, deltas, clip_to: tuple[float, float] | None = None) -> np.ndarray:
    """Apply (tx, ty, tw, th) offsets to anchors; the inverse of encode_deltas.

    With ``clip_to`` = (image_w, image_h) the result is clipped to the image;
    clipping can collapse a box to zero area, which callers detect with
    ``degenerate_mask`` and drop.
    """
    a = check_boxes(anchors, name="anchors")
    d = as_float_array(deltas).reshape(-1, 4)
    acx, acy, aw, ah = _centers_sizes(a)
    cx = acx + d[:, 0] * aw
    cy = acy + d[:, 1] * ah
    w = aw * np.exp(d[:, 2])
    h = ah * np.exp(d[:, 3])
    out = np.stack([cx - w / 2, cy - h / 2, cx + w / 2, cy + h / 2], axis=1)
    if clip_to is not None:
        out = clip_boxes(out, clip_to)
    return out[0] if np.asarray(anchors).ndim == 1 else out


def clip_boxes(boxes, image_size) -> np.ndarray:
    """Clip boxes to [0, W] x [0, H]."""
    w, h = image_size
    b = as_float_array(boxes).reshape(-1, 4).copy()
    b[:, 0::2] = np.clip(b[:, 0::2], 0, w)
    b[:, 1::2] = np.clip(b[:, 1::2], 0, h)
    return b


def nms(boxes, scores, iou_threshold: float, max_keep: int | None = None) -> np.ndarray:
    """Greedy non-maximum suppression; returns kept indices, best score first.

    Repeatedly keeps the highest-scoring remaining box and suppresses every
    remaining box with IoU strictly above ``iou_threshold`` against it.
    Ties in score break toward the lower original index, so the result is
    deterministic.
    """
    if not 0 < iou_threshold < 1:
        raise ValueError("iou_threshold must lie in (0, 1)")
    b = as_float_array(boxes).reshape(-1, 4)
    s = as_float_array(scores).reshape(-1)
    if b.shape[0] != s.shape[0]:
        raise ValueError("boxes and scores must align")
    if b.shape[0] == 0:
        return np.empty(0, dtype=np.intp)
    order = np.argsort(-s, kind="stable")
    areas = box_areas(b)
    keep = []
    limit = b.shape[0] if max_keep is None else max_keep
    while order.size and len(keep) < limit:
        i = order[0]
        keep.append(i)
        rest = order[1:]
        x1 = np.maximum(b[i, 0], b[rest, 0])
        y1 = np.maximum(b[i, 1], b[rest, 1])
        x2 = np.minimum(b[i, 2], b[rest, 2])
        y2 = np.minimum(b[i, 3], b[rest, 3])
        inter = np.clip(x2 - x1, 0, None) * np.clip(y2 - y1, 0, None)
        overlap = inter / (areas[i] + areas[rest] - inter)
        order = rest[overlap <= iou_threshold]
    return np.asarray(keep, dtype=np.intp)
