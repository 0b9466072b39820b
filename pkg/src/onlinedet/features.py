"""Feature-map container, unrolling, and RoI Align region featurization."""

from __future__ import annotations

import warnings
from dataclasses import dataclass

import numpy as np

from .validation import as_float_array

__all__ = [
    "FeatureMap",
    "RegionFeature",
    "unroll_feature_map",
    "roi_align",
    "roi_align_many",
    "region_feature",
    "region_feature_matrix",
]


@dataclass
class FeatureMap:
    """A dense (h, w, f) feature tensor with a spatial stride in image pixels.

    ``data`` is row-major: h outer, then w, then channels. One cell covers a
    stride x stride patch of the image; cell (i, j) is centered at feature
    coordinate (j + 0.5, i + 0.5), i.e. image pixel ((j + 0.5) * stride,
    (i + 0.5) * stride).
    """

    data: np.ndarray
    stride: int

    def __post_init__(self):
        self.data = as_float_array(self.data, name="data", ndim=3)
        if min(self.data.shape) < 1:
            raise ValueError("feature map dimensions must be positive")
        if not np.all(np.isfinite(self.data)):
            raise ValueError("feature map contains non-finite values")
        if self.stride < 1:
            raise ValueError("stride must be a positive integer")

    @property
    def h(self) -> int:
        return self.data.shape[0]

    @property
    def w(self) -> int:
        return self.data.shape[1]

    @property
    def f(self) -> int:
        return self.data.shape[2]

    @property
    def image_size(self) -> tuple[int, int]:
        """Nominal (width, height) of the image the map covers."""
        return (self.w * self.stride, self.h * self.stride)


@dataclass
class RegionFeature:
    """Fixed-length feature vector pooled from one region."""

    vector: np.ndarray
    source_box: np.ndarray


def unroll_feature_map(m: FeatureMap) -> np.ndarray:
    """View the map as h*w rows of f channels, row-major.

    Row k holds cell (i = k // w, j = k % w); no values are copied or
    reordered relative to the underlying tensor.
    """
    return m.data.reshape(m.h * m.w, m.f)


def roi_align(m: FeatureMap, region, pool: int, samples_per_bin: int = 2) -> np.ndarray:
    """Pool a region into a (pool, pool, f) tensor by bilinear sampling.

    The region (image coordinates) maps to feature coordinates by dividing
    by the stride, without rounding. Each output bin is sampled at
    samples_per_bin^2 regularly spaced interior points; each point is the
    bilinear interpolation of the four surrounding cell centers, with zero
    padding outside the map. The bin value is the mean of its samples.
    """
    box = as_float_array(region).reshape(4)
    return roi_align_many(m, box[None, :], pool, samples_per_bin)[0]


def roi_align_many(m: FeatureMap, regions, pool: int, samples_per_bin: int = 2) -> np.ndarray:
    """roi_align vectorized over an (N, 4) region stack; returns
    an (N, pool, pool, f) tensor."""
    if pool < 1 or samples_per_bin < 1:
        raise ValueError("pool and samples_per_bin must be >= 1")
    boxes = as_float_array(regions).reshape(-1, 4) / m.stride
    n = boxes.shape[0]
    if n == 0:
        return np.zeros((0, pool, pool, m.f))
    outside = (
        (boxes[:, 2] <= 0) | (boxes[:, 3] <= 0) | (boxes[:, 0] >= m.w) | (boxes[:, 1] >= m.h)
    )
    if np.any(outside):
        warnings.warn(
            f"{int(outside.sum())} region(s) lie entirely outside the feature map; "
            "their pooled output is zero"
        )

    s = samples_per_bin
    g = pool * s
    # Sample offsets within [0, 1): bin b, sub-sample k at (b + (k+0.5)/s)/pool
    off = ((np.arange(pool)[:, None] + (np.arange(s)[None, :] + 0.5) / s) / pool).reshape(-1)
    gx = boxes[:, 0, None] + off[None, :] * (boxes[:, 2] - boxes[:, 0])[:, None]  # (n, g)
    gy = boxes[:, 1, None] + off[None, :] * (boxes[:, 3] - boxes[:, 1])[:, None]

    u = gx[:, None, :] - 0.5  # (n, 1, g) sample x, broadcast over rows
    v = gy[:, :, None] - 0.5  # (n, g, 1) sample y, broadcast over columns
    j0 = np.floor(u).astype(np.intp)
    i0 = np.floor(v).astype(np.intp)
    fu = u - j0
    fv = v - i0

    h, w, f = m.data.shape
    data = m.data

    def gather(ii, jj):
        ii = np.broadcast_to(ii, (n, g, g))
        jj = np.broadcast_to(jj, (n, g, g))
        mask = (ii >= 0) & (ii < h) & (jj >= 0) & (jj < w)
        vals = data[np.clip(ii, 0, h - 1), np.clip(jj, 0, w - 1), :]
        return vals * mask[..., None]

    out = (
        gather(i0, j0) * ((1 - fv) * (1 - fu))[..., None]
        + gather(i0, j0 + 1) * ((1 - fv) * fu)[..., None]
        + gather(i0 + 1, j0) * (fv * (1 - fu))[..., None]
        + gather(i0 + 1, j0 + 1) * (fv * fu)[..., None]
    )
    out[outside] = 0.0
    return out.reshape(n, pool, s, pool, s, f).mean(axis=(2, 4))


def region_feature(m: FeatureMap, region, mode: str = "flatten",
                   pool: int = 7, samples_per_bin: int = 2) -> RegionFeature:
    """Adapt RoI Align output into a fixed-length vector.

    ``flatten`` concatenates the pool x pool bins row-major (D = pool^2 * f);
    ``mean_pool`` averages over bins (D = f).
    """
    pooled = roi_align(m, region, pool, samples_per_bin)
    if mode == "flatten":
        vec = pooled.reshape(-1)
    elif mode == "mean_pool":
        vec = pooled.mean(axis=(0, 1))
    else:
        raise ValueError(f"unknown featurization mode {mode!r}")
    return RegionFeature(vector=vec, source_box=as_float_array(region).reshape(4))


def region_feature_matrix(m: FeatureMap, regions, mode: str = "flatten",
                          pool: int = 7, samples_per_bin: int = 2) -> np.ndarray:
    """Stack region_feature vectors for many regions into an (N, D) matrix."""
    boxes = as_float_array(regions).reshape(-1, 4)
    pooled = roi_align_many(m, boxes, pool, samples_per_bin)
    if mode == "flatten":
        return pooled.reshape(boxes.shape[0], -1)
    if mode == "mean_pool":
        return pooled.mean(axis=(1, 2))
    raise ValueError(f"unknown featurization mode {mode!r}")
