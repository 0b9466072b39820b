import dataclasses

import numpy as np
import pytest

from onlinedet.data import Dataset, SynthConfig, generate_synthetic_dataset, load_dataset
from onlinedet.features import FeatureMap
from onlinedet.geometry import AnchorConfig


def random_boxes(rng, n, image_w=200.0, image_h=200.0, min_side=2.0):
    """Valid random boxes inside an image."""
    x1 = rng.uniform(0, image_w - min_side, n)
    y1 = rng.uniform(0, image_h - min_side, n)
    w = rng.uniform(min_side, image_w / 3, n)
    h = rng.uniform(min_side, image_h / 3, n)
    x2 = np.minimum(x1 + w, image_w)
    y2 = np.minimum(y1 + h, image_h)
    return np.stack([x1, y1, x2, y2], axis=1)


def exact_anchor_config(stride=16):
    """Anchor grid whose cross product contains exact matches for 3x3, 5x5,
    3x5 and 5x3 cell objects."""
    s15 = float(np.sqrt(15.0))
    return AnchorConfig(
        scales=(3 * stride, s15 * stride, 5 * stride),
        aspect_ratios=(0.6, 1.0, 5.0 / 3.0),
        stride=stride,
    )


def synth_task(tmp_path, *, n_train=60, n_val=0, n_test=20, n_classes=3, map_hw=14,
               map_f=16, stride=16, noise_sigma=1.0, prototype_seed=777, seed=10):
    """Generate train/(val)/test planted-signature splits sharing one class set.

    Returns (train, val, test) Datasets; val is None when n_val == 0.
    """
    base = SynthConfig(
        n_images=n_train, map_h=map_hw, map_w=map_hw, map_f=map_f, stride=stride,
        n_classes=n_classes, objects_per_image=(1, 2), object_size_range=(3, 5),
        object_size_step=2, signature_strength=10.0, noise_sigma=noise_sigma,
        seed=seed, prototype_seed=prototype_seed,
    )
    train = load_dataset(generate_synthetic_dataset(base, tmp_path / "train"))
    val = None
    if n_val:
        val = load_dataset(generate_synthetic_dataset(
            dataclasses.replace(base, n_images=n_val, seed=seed + 1, split="val"),
            tmp_path / "val",
        ))
    test = load_dataset(generate_synthetic_dataset(
        dataclasses.replace(base, n_images=n_test, seed=seed + 2, split="test"),
        tmp_path / "test",
    ))
    return train, val, test


@pytest.fixture
def rng():
    return np.random.default_rng(0)


def make_map(data, stride=16):
    return FeatureMap(data=np.asarray(data, dtype=np.float64), stride=stride)


def in_memory_dataset(maps, boxes, classes, n_classes):
    names = [f"class{c}" for c in range(1, n_classes + 1)]
    return Dataset.from_arrays(maps, boxes, classes, names)
