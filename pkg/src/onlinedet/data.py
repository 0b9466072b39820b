"""Feature-map codec, dataset manifests, and the synthetic planted-signature
generator that stands in for a CNN backbone at desk scale.

Feature file format (.ofm): magic "OFMV1", then unsigned 32-bit little-endian
h, w, f, stride, then h*w*f little-endian 32-bit floats, row-major (h outer,
then w, then channels). Decoding is bit-exact with respect to encoding.

Manifest format: JSON, ``{"version": 1, "split": ..., "classes": [...],
"images": [{"image_id", "feature_file", "width", "height",
"boxes": [{"x1","y1","x2","y2","class_id"}]}]}``. Feature paths are relative
to the manifest's directory.
"""

from __future__ import annotations

import json
import struct
from collections import OrderedDict
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .exceptions import ConfigError, DataError
from .features import FeatureMap

__all__ = [
    "FEATURE_MAGIC",
    "encode_feature_map",
    "decode_feature_map",
    "write_feature_map",
    "read_feature_map",
    "ImageRecord",
    "Dataset",
    "load_dataset",
    "SynthConfig",
    "generate_synthetic_dataset",
]

FEATURE_MAGIC = b"OFMV1"
_HEADER = struct.Struct("<IIII")


def encode_feature_map(m: FeatureMap) -> bytes:
    """Serialize a FeatureMap to the .ofm byte layout."""
    payload = np.ascontiguousarray(m.data, dtype="<f4").tobytes()
    return FEATURE_MAGIC + _HEADER.pack(m.h, m.w, m.f, m.stride) + payload


def decode_feature_map(blob: bytes) -> FeatureMap:
    """Parse .ofm bytes; errors name the offending byte offset."""
    if blob[:5] != FEATURE_MAGIC:
        raise DataError(f"bad feature magic {blob[:5]!r} at offset 0")
    if len(blob) < 5 + _HEADER.size:
        raise DataError(f"truncated header at offset {len(blob)}")
    h, w, f, stride = _HEADER.unpack_from(blob, 5)
    if min(h, w, f, stride) < 1:
        raise DataError("non-positive dimension in header at offset 5")
    expected = 5 + _HEADER.size + 4 * h * w * f
    if len(blob) != expected:
        raise DataError(
            f"payload ends at offset {len(blob)}, expected {expected}"
        )
    data = np.frombuffer(blob, dtype="<f4", count=h * w * f, offset=5 + _HEADER.size)
    if not np.all(np.isfinite(data)):
        bad = int(np.argmax(~np.isfinite(data)))
        raise DataError(f"non-finite float at offset {5 + _HEADER.size + 4 * bad}")
    return FeatureMap(data=data.reshape(h, w, f).astype(np.float64), stride=stride)


def write_feature_map(path, m: FeatureMap) -> None:
    Path(path).write_bytes(encode_feature_map(m))


def read_feature_map(path) -> FeatureMap:
    try:
        blob = Path(path).read_bytes()
    except OSError as exc:
        raise DataError(f"cannot read feature file {path}: {exc}") from exc
    return decode_feature_map(blob)


@dataclass
class ImageRecord:
    image_id: str
    feature_file: str
    width: int
    height: int
    boxes: np.ndarray  # (N, 4)
    class_ids: np.ndarray  # (N,)


class Dataset:
    """A validated manifest plus lazily decoded feature maps.

    At most ``max_resident`` decoded maps are held at once (LRU). Records
    backed by in-memory maps (``from_arrays``) bypass the cache.
    """

    def __init__(self, records, class_names, split="train", root=None, max_resident=32,
                 maps=None):
        self.records: list[ImageRecord] = list(records)
        self.class_names = list(class_names)
        self.split = split
        self.root = Path(root) if root is not None else None
        self.max_resident = max_resident
        self._maps = maps
        self._cache: OrderedDict[int, FeatureMap] = OrderedDict()

    @classmethod
    def from_arrays(cls, maps, boxes_per_image, classes_per_image, class_names,
                    split="train", image_sizes=None):
        records = []
        for k, m in enumerate(maps):
            size = image_sizes[k] if image_sizes is not None else m.image_size
            records.append(
                ImageRecord(
                    image_id=f"mem{k:05d}",
                    feature_file="",
                    width=int(size[0]),
                    height=int(size[1]),
                    boxes=np.asarray(boxes_per_image[k], dtype=np.float64).reshape(-1, 4),
                    class_ids=np.asarray(classes_per_image[k], dtype=np.intp).reshape(-1),
                )
            )
        return cls(records, class_names, split=split, maps=list(maps))

    def __len__(self) -> int:
        return len(self.records)

    @property
    def num_classes(self) -> int:
        return len(self.class_names)

    def feature_map(self, index: int) -> FeatureMap:
        if self._maps is not None:
            return self._maps[index]
        if index in self._cache:
            self._cache.move_to_end(index)
            return self._cache[index]
        rec = self.records[index]
        path = self.root / rec.feature_file if self.root else Path(rec.feature_file)
        m = read_feature_map(path)
        self._cache[index] = m
        while len(self._cache) > self.max_resident:
            self._cache.popitem(last=False)
        return m

    def __iter__(self):
        for i, rec in enumerate(self.records):
            yield rec, self.feature_map(i)


def load_dataset(manifest_path, max_resident: int = 32) -> Dataset:
    """Load and validate a manifest; feature decoding stays lazy."""
    manifest_path = Path(manifest_path)
    try:
        raw = json.loads(manifest_path.read_text(encoding="utf-8"))
    except OSError as exc:
        raise DataError(f"cannot read manifest {manifest_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise DataError(f"manifest {manifest_path} is not valid JSON: {exc}") from exc

    if not isinstance(raw, dict) or raw.get("version") != 1:
        raise DataError(f"manifest {manifest_path}: unsupported or missing version")
    classes = raw.get("classes")
    if not isinstance(classes, list) or not all(isinstance(c, str) for c in classes):
        raise DataError(f"manifest {manifest_path}: 'classes' must be a list of names")
    images = raw.get("images")
    if not isinstance(images, list):
        raise DataError(f"manifest {manifest_path}: 'images' must be a list")
    split = raw.get("split", "train")
    root = manifest_path.parent

    records = []
    for entry in images:
        rid = entry.get("image_id", "<missing id>")
        for key in ("image_id", "feature_file", "width", "height", "boxes"):
            if key not in entry:
                raise DataError(f"image {rid}: missing field {key!r}")
        width, height = entry["width"], entry["height"]
        feature_path = root / entry["feature_file"]
        if not feature_path.is_file():
            raise DataError(f"image {rid}: feature file {feature_path} does not exist")
        boxes = []
        class_ids = []
        for b in entry["boxes"]:
            try:
                coords = (float(b["x1"]), float(b["y1"]), float(b["x2"]), float(b["y2"]))
                cid = int(b["class_id"])
            except (KeyError, TypeError, ValueError) as exc:
                raise DataError(f"image {rid}: malformed box entry {b!r}") from exc
            x1, y1, x2, y2 = coords
            if not (0 <= x1 < x2 <= width and 0 <= y1 < y2 <= height):
                raise DataError(
                    f"image {rid}: box {coords} violates bounds for {width}x{height}"
                )
            if not 1 <= cid <= len(classes):
                raise DataError(f"image {rid}: class id {cid} not in the class table")
            boxes.append(coords)
            class_ids.append(cid)
        records.append(
            ImageRecord(
                image_id=str(entry["image_id"]),
                feature_file=str(entry["feature_file"]),
                width=int(width),
                height=int(height),
                boxes=np.asarray(boxes, dtype=np.float64).reshape(-1, 4),
                class_ids=np.asarray(class_ids, dtype=np.intp),
            )
        )
    return Dataset(records, classes, split=split, root=root, max_resident=max_resident)


@dataclass
class SynthConfig:
    """Planted-signature generator settings.

    Each image is isotropic Gaussian noise; each object adds one class's
    prototype vector (orthogonal unit vectors times signature_strength) to
    a random rectangle of cells. signature_strength / noise_sigma is the
    task's signal-to-noise ratio.
    """

    n_images: int = 200
    map_h: int = 20
    map_w: int = 20
    map_f: int = 16
    stride: int = 16
    n_classes: int = 5
    objects_per_image: tuple = (1, 2)
    object_size_range: tuple = (3, 5)
    object_size_step: int = 2
    signature_strength: float = 10.0
    noise_sigma: float = 1.0
    split: str = "train"
    seed: int = 0
    prototype_seed: int | None = None  # share across splits; defaults to seed

    def __post_init__(self):
        if self.map_f < self.n_classes:
            raise ConfigError("need map_f >= n_classes for orthogonal prototypes")
        lo, hi = self.object_size_range
        if lo < 1 or hi < lo:
            raise ConfigError("invalid object size range")
        if hi > min(self.map_h, self.map_w):
            raise ConfigError("objects larger than the feature map")
        if self.objects_per_image[0] < 0 or self.objects_per_image[1] < self.objects_per_image[0]:
            raise ConfigError("invalid objects_per_image range")
        if self.object_size_step < 1:
            raise ConfigError("object_size_step must be >= 1")

    @property
    def object_sizes(self) -> np.ndarray:
        lo, hi = self.object_size_range
        return np.arange(lo, hi + 1, self.object_size_step)


def class_prototypes(cfg: SynthConfig) -> np.ndarray:
    """The (C, f) matrix of mutually orthogonal prototype rows.

    Determined by ``prototype_seed`` (falling back to ``seed``), so sibling
    train/val/test datasets can share one class set while their images vary.
    """
    entropy = cfg.seed if cfg.prototype_seed is None else cfg.prototype_seed
    rng = np.random.default_rng(np.random.SeedSequence(entropy=entropy, spawn_key=(0,)))
    gauss = rng.standard_normal((cfg.map_f, cfg.n_classes))
    q, _ = np.linalg.qr(gauss)
    return q.T * cfg.signature_strength


def generate_synthetic_dataset(cfg: SynthConfig, out_dir) -> Path:
    """Write feature files plus manifest.json under out_dir; returns the
    manifest path. Generation is fully determined by cfg.seed."""
    out_dir = Path(out_dir)
    (out_dir / "features").mkdir(parents=True, exist_ok=True)
    protos = class_prototypes(cfg)
    rng = np.random.default_rng(np.random.SeedSequence(entropy=cfg.seed, spawn_key=(1,)))
    sizes = cfg.object_sizes

    images = []
    for k in range(cfg.n_images):
        data = rng.standard_normal((cfg.map_h, cfg.map_w, cfg.map_f)) * cfg.noise_sigma
        n_obj = int(rng.integers(cfg.objects_per_image[0], cfg.objects_per_image[1] + 1))
        boxes = []
        for _ in range(n_obj):
            w_cells = int(rng.choice(sizes))
            h_cells = int(rng.choice(sizes))
            j0 = int(rng.integers(0, cfg.map_w - w_cells + 1))
            i0 = int(rng.integers(0, cfg.map_h - h_cells + 1))
            cid = int(rng.integers(1, cfg.n_classes + 1))
            data[i0:i0 + h_cells, j0:j0 + w_cells, :] += protos[cid - 1]
            boxes.append(
                {
                    "x1": j0 * cfg.stride,
                    "y1": i0 * cfg.stride,
                    "x2": (j0 + w_cells) * cfg.stride,
                    "y2": (i0 + h_cells) * cfg.stride,
                    "class_id": cid,
                }
            )
        name = f"features/img{k:05d}.ofm"
        write_feature_map(out_dir / name, FeatureMap(data=data, stride=cfg.stride))
        images.append(
            {
                "image_id": f"img{k:05d}",
                "feature_file": name,
                "width": cfg.map_w * cfg.stride,
                "height": cfg.map_h * cfg.stride,
                "boxes": boxes,
            }
        )

    manifest = {
        "version": 1,
        "split": cfg.split,
        "classes": [f"class{c}" for c in range(1, cfg.n_classes + 1)],
        "images": images,
    }
    manifest_path = out_dir / "manifest.json"
    manifest_path.write_text(json.dumps(manifest, indent=1, sort_keys=True), encoding="utf-8")
    return manifest_path
