"""Input validation helpers used by the estimators and geometry routines."""

from __future__ import annotations

import numpy as np

__all__ = ["as_float_array", "check_boxes", "check_finite_2d"]


def as_float_array(x, name="array", ndim=None, dtype=np.float64):
    """Convert to a contiguous float ndarray, optionally enforcing rank."""
    arr = np.ascontiguousarray(x, dtype=dtype)
    if ndim is not None and arr.ndim != ndim:
        raise ValueError(f"{name} must be {ndim}-dimensional, got shape {arr.shape}")
    return arr


def check_finite_2d(x, name="X"):
    """Validate a 2-d sample matrix: float, finite, shape (n, d)."""
    arr = as_float_array(x, name=name, ndim=2)
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite values")
    return arr


def check_boxes(boxes, name="boxes", image_size=None):
    """Validate boxes as an (N, 4) float array of (x1, y1, x2, y2) corners.

    Accepts a single (4,) box and promotes it to (1, 4). Raises ValueError
    on zero or negative width/height, and on boxes outside ``image_size``
    (given as (width, height)) when provided.
    """
    arr = as_float_array(boxes, name=name)
    if arr.ndim == 1:
        arr = arr.reshape(1, 4) if arr.size == 4 else arr
    if arr.ndim != 2 or arr.shape[1] != 4:
        raise ValueError(f"{name} must have shape (N, 4), got {arr.shape}")
    if not np.all(np.isfinite(arr)):
        raise ValueError(f"{name} contains non-finite coordinates")
    widths = arr[:, 2] - arr[:, 0]
    heights = arr[:, 3] - arr[:, 1]
    if arr.shape[0] and (np.any(widths <= 0) or np.any(heights <= 0)):
        bad = int(np.argmax((widths <= 0) | (heights <= 0)))
        raise ValueError(f"{name}[{bad}] is degenerate (zero or negative extent)")
    if image_size is not None and arr.shape[0]:
        w, h = image_size
        if np.any(arr[:, 0] < 0) or np.any(arr[:, 1] < 0) or np.any(arr[:, 2] > w) or np.any(arr[:, 3] > h):
            bad = int(
                np.argmax((arr[:, 0] < 0) | (arr[:, 1] < 0) | (arr[:, 2] > w) | (arr[:, 3] > h))
            )
            raise ValueError(f"{name}[{bad}] lies outside the {w}x{h} image")
    return arr
