"""Experiment orchestration: the two-stage on-line training protocol,
evaluation over the validation/test splits, artifact persistence, and
validation-driven hyper-parameter search.
"""

from __future__ import annotations

import csv
import dataclasses
import json
import time
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np

from .data import Dataset, load_dataset
from .detector import OnlineDetector, write_detections
from .exceptions import ConfigError, TrainingError
from .geometry import AnchorConfig
from .kernels import KernelHyperParams, load_model, save_model
from .metrics import ar_curve, average_recall, mean_ap
from .minibootstrap import MinibootstrapConfig
from .rpn import OnlineRpn, write_proposals

__all__ = [
    "ExperimentConfig",
    "StageConfig",
    "run_experiment",
    "hyperparameter_search",
    "save_rpn_model",
    "load_rpn_model",
    "save_detector_model",
    "load_detector_model",
    "config_from_dict",
    "config_to_dict",
    "apply_overrides",
]


@dataclass
class StageConfig:
    """Kernel, minibootstrap and refiner settings for one on-line stage."""

    hyper: KernelHyperParams = field(default_factory=KernelHyperParams)
    minibootstrap: MinibootstrapConfig = field(default_factory=MinibootstrapConfig)
    ridge_lam: float | None = None  # refiner regularization; defaults to hyper.lam


@dataclass
class ExperimentConfig:
    train_manifest: str = ""
    val_manifest: str = ""
    test_manifest: str = ""
    output_dir: str = "out"
    seed: int = 0
    anchors: AnchorConfig = field(default_factory=AnchorConfig)
    rpn: StageConfig = field(default_factory=StageConfig)
    detector: StageConfig = field(default_factory=StageConfig)
    rpn_pre_nms_top_k: int = 2000
    rpn_nms_threshold: float = 0.7
    rpn_top_n: int = 300
    rpn_pos_iou: float = 0.7
    rpn_neg_iou: float = 0.3
    rpn_boundary_ignore_fraction: float = 0.3
    detector_pool_size: int = 7
    detector_pool_mode: str = "flatten"
    detector_samples_per_bin: int = 2
    detector_fg_iou: float = 0.5
    detector_bg_iou: float = 0.3
    detector_train_top_n: int | None = None
    detector_score_threshold: float = 0.0
    detector_nms_threshold: float = 0.3
    eval_top_n: int | None = None  # proposals per image when evaluating AR
    proposal_counts: tuple = (10, 25, 50, 100, 150, 300)
    map_iou_threshold: float = 0.5
    map_mode: str = "voc07"
    search_sigmas: tuple = ()
    search_lambdas: tuple = ()

    def validate(self, require_test=True):
        for name in ("train_manifest", "val_manifest") + (("test_manifest",) if require_test else ()):
            path = getattr(self, name)
            if not path:
                raise ConfigError(f"{name} is required")
            if not Path(path).is_file():
                raise ConfigError(f"{name} {path} does not exist")
        if not self.proposal_counts:
            raise ConfigError("proposal_counts must be nonempty")


def _build_rpn(cfg: ExperimentConfig) -> OnlineRpn:
    return OnlineRpn(
        anchors=cfg.anchors,
        hyper=cfg.rpn.hyper,
        minibootstrap=cfg.rpn.minibootstrap,
        pre_nms_top_k=cfg.rpn_pre_nms_top_k,
        nms_threshold=cfg.rpn_nms_threshold,
        top_n=cfg.rpn_top_n,
        pos_iou=cfg.rpn_pos_iou,
        neg_iou=cfg.rpn_neg_iou,
        boundary_ignore_fraction=cfg.rpn_boundary_ignore_fraction,
        ridge_lam=cfg.rpn.ridge_lam,
        seed=_derive(cfg.seed, 1),
    )


def _build_detector(cfg: ExperimentConfig, rpn: OnlineRpn, n_classes: int) -> OnlineDetector:
    return OnlineDetector(
        rpn=rpn,
        n_classes=n_classes,
        hyper=cfg.detector.hyper,
        minibootstrap=cfg.detector.minibootstrap,
        pool_size=cfg.detector_pool_size,
        pool_mode=cfg.detector_pool_mode,
        samples_per_bin=cfg.detector_samples_per_bin,
        fg_iou=cfg.detector_fg_iou,
        bg_iou=cfg.detector_bg_iou,
        score_threshold=cfg.detector_score_threshold,
        nms_threshold=cfg.detector_nms_threshold,
        train_top_n=cfg.detector_train_top_n,
        ridge_lam=cfg.detector.ridge_lam,
        seed=_derive(cfg.seed, 2),
    )


def _derive(seed, k: int) -> int:
    return int(np.random.SeedSequence(entropy=seed, spawn_key=(k,)).generate_state(1)[0])


def _evaluate_split(dataset: Dataset, rpn: OnlineRpn, detector: OnlineDetector,
                    cfg: ExperimentConfig):
    """Proposals, detections and the AR/mAP numbers for one split."""
    proposals = {}
    detections = {}
    gts_ar = []
    props_ar = []
    det_list = []
    gt_list = []
    max_n = max(cfg.proposal_counts)
    for idx, rec in enumerate(dataset.records):
        m = dataset.feature_map(idx)
        size = (rec.width, rec.height)
        boxes, scores = rpn.propose(m, top_n=max(max_n, cfg.rpn_top_n), image_size=size)
        proposals[rec.image_id] = (boxes, scores)
        n_ar = cfg.eval_top_n if cfg.eval_top_n is not None else cfg.rpn_top_n
        props_ar.append(boxes[:n_ar])
        gts_ar.append(rec.boxes)
        det = detector.detect(m, image_size=size)
        detections[rec.image_id] = det
        det_list.append(det)
        gt_list.append((rec.boxes, rec.class_ids))
    ar = average_recall(props_ar, gts_ar)
    curve = ar_curve([p for p, _ in proposals.values()], gts_ar, cfg.proposal_counts)
    map_value, per_class = mean_ap(det_list, gt_list, iou_thr=cfg.map_iou_threshold,
                                   mode=cfg.map_mode)
    return {
        "proposals": proposals,
        "detections": detections,
        "ar": ar,
        "ar_curve": curve,
        "map": map_value,
        "per_class_ap": per_class,
    }


def run_experiment(cfg: ExperimentConfig, write_artifacts: bool = True) -> dict:
    """Run the two-stage on-line protocol and evaluate it.

    Stage one trains the proposal learner on the train split; stage two
    trains the detection head on proposals from stage one. The report
    carries per-stage wall-clock training times, AR and mAP on the
    validation and test splits, and the fully resolved configuration.
    The test split is only loaded after both stages finished training.
    """
    cfg.validate()
    out_dir = Path(cfg.output_dir)
    if write_artifacts:
        out_dir.mkdir(parents=True, exist_ok=True)

    train = load_dataset(cfg.train_manifest)
    val = load_dataset(cfg.val_manifest)

    t0 = time.perf_counter()
    rpn = _build_rpn(cfg).fit(train)
    rpn_seconds = time.perf_counter() - t0

    t1 = time.perf_counter()
    detector = _build_detector(cfg, rpn, train.num_classes).fit(train)
    detector_seconds = time.perf_counter() - t1

    test = load_dataset(cfg.test_manifest)
    val_eval = _evaluate_split(val, rpn, detector, cfg)
    test_eval = _evaluate_split(test, rpn, detector, cfg)

    report = {
        "config": config_to_dict(cfg),
        "timing": {
            "rpn_train_seconds": rpn_seconds,
            "detector_train_seconds": detector_seconds,
            "total_train_seconds": rpn_seconds + detector_seconds,
        },
        "metrics": {
            "val": {"ar": val_eval["ar"], "map": val_eval["map"],
                    "ar_curve": val_eval["ar_curve"], "per_class_ap": val_eval["per_class_ap"]},
            "test": {"ar": test_eval["ar"], "map": test_eval["map"],
                     "ar_curve": test_eval["ar_curve"], "per_class_ap": test_eval["per_class_ap"]},
        },
    }

    if write_artifacts:
        save_rpn_model(out_dir / "rpn_model", rpn)
        save_detector_model(out_dir / "detector_model", detector)
        write_proposals(out_dir / "proposals_val.txt", val_eval["proposals"])
        write_proposals(out_dir / "proposals_test.txt", test_eval["proposals"])
        write_detections(out_dir / "detections_val.txt", val_eval["detections"])
        write_detections(out_dir / "detections_test.txt", test_eval["detections"])
        _write_curve_csv(out_dir / "ar_curve_test.csv", test_eval["ar_curve"])
        (out_dir / "report.json").write_text(
            json.dumps(report, indent=1, sort_keys=True), encoding="utf-8"
        )
    report["models"] = {"rpn": rpn, "detector": detector}
    return report


def _write_curve_csv(path, curve) -> None:
    with open(path, "w", newline="", encoding="utf-8") as fh:
        writer = csv.writer(fh)
        writer.writerow(["n_proposals", "average_recall"])
        for n, ar in curve:
            writer.writerow([n, f"{ar:.17g}"])


def hyperparameter_search(cfg: ExperimentConfig) -> dict:
    """Grid search (sigma, lambda) on validation mAP.

    Each grid point retrains both stages with that sigma/lambda pair; the
    argmax of validation mAP wins, ties resolved toward the smallest lambda
    and then the smallest sigma. The winning configuration is retrained and
    fully evaluated; the per-point table lands in search.csv. The test
    manifest is never touched until after the selection is made.
    """
    if not cfg.search_sigmas or not cfg.search_lambdas:
        raise ConfigError("search grids for sigma and lambda must be nonempty")
    cfg.validate(require_test=False)
    out_dir = Path(cfg.output_dir)
    out_dir.mkdir(parents=True, exist_ok=True)

    train = load_dataset(cfg.train_manifest)
    val = load_dataset(cfg.val_manifest)

    rows = []
    failures = []
    for sigma in cfg.search_sigmas:
        for lam in cfg.search_lambdas:
            point = _with_point(cfg, sigma, lam)
            try:
                rpn = _build_rpn(point).fit(train)
                detector = _build_detector(point, rpn, train.num_classes).fit(train)
                val_eval = _evaluate_split(val, rpn, detector, point)
                rows.append({"sigma": sigma, "lam": lam, "val_map": val_eval["map"]})
            except (TrainingError, ValueError) as exc:
                failures.append({"sigma": sigma, "lam": lam, "error": str(exc)})
    if not rows:
        raise TrainingError(
            "every grid point failed: "
            + "; ".join(f"(sigma={f['sigma']}, lam={f['lam']}): {f['error']}" for f in failures)
        )

    best = max(rows, key=lambda r: (r["val_map"], -r["lam"], -r["sigma"]))
    with open(out_dir / "search.csv", "w", newline="", encoding="utf-8") as fh:
        writer = csv.DictWriter(fh, fieldnames=["sigma", "lam", "val_map"])
        writer.writeheader()
        for row in rows:
            writer.writerow({**row, "val_map": f"{row['val_map']:.17g}"})

    final_cfg = _with_point(cfg, best["sigma"], best["lam"])
    report = run_experiment(final_cfg)
    report["search"] = {"table": rows, "failures": failures,
                        "best": {"sigma": best["sigma"], "lam": best["lam"]}}
    (out_dir / "report.json").write_text(
        json.dumps({k: v for k, v in report.items() if k != "models"}, indent=1, sort_keys=True),
        encoding="utf-8",
    )
    return report


def _with_point(cfg: ExperimentConfig, sigma: float, lam: float) -> ExperimentConfig:
    point = dataclasses.replace(
        cfg,
        rpn=StageConfig(
            hyper=dataclasses.replace(cfg.rpn.hyper, sigma=sigma, lam=lam),
            minibootstrap=cfg.rpn.minibootstrap,
            ridge_lam=cfg.rpn.ridge_lam,
        ),
        detector=StageConfig(
            hyper=dataclasses.replace(cfg.detector.hyper, sigma=sigma, lam=lam),
            minibootstrap=cfg.detector.minibootstrap,
            ridge_lam=cfg.detector.ridge_lam,
        ),
    )
    return point


# -- model persistence --------------------------------------------------------

def save_rpn_model(dir_path, rpn: OnlineRpn) -> None:
    """Persist a fitted proposal model as a directory of kernel blobs plus a
    JSON description of the anchor grid and proposal parameters."""
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    num_a = rpn.anchor_config_.num_anchors
    meta = {
        "kind": "rpn",
        "anchors": {
            "scales": list(rpn.anchor_config_.scales),
            "aspect_ratios": list(rpn.anchor_config_.aspect_ratios),
            "stride": rpn.anchor_config_.stride,
        },
        "params": {
            "pre_nms_top_k": rpn.pre_nms_top_k,
            "nms_threshold": rpn.nms_threshold,
            "top_n": rpn.top_n,
        },
        "feature_dim": rpn.feature_dim_,
        "num_anchors": num_a,
    }
    for a in range(num_a):
        save_model(dir_path / f"anchor{a}_clf.okrr", rpn.classifiers_[a])
        for k, name in enumerate(("tx", "ty", "tw", "th")):
            save_model(dir_path / f"anchor{a}_{name}.okrr", rpn.regressors_[a][k])
    (dir_path / "model.json").write_text(json.dumps(meta, indent=1, sort_keys=True),
                                         encoding="utf-8")


def load_rpn_model(dir_path) -> OnlineRpn:
    dir_path = Path(dir_path)
    meta = json.loads((dir_path / "model.json").read_text(encoding="utf-8"))
    if meta.get("kind") != "rpn":
        raise ValueError(f"{dir_path} does not hold a proposal model")
    rpn = OnlineRpn(
        anchors=AnchorConfig(
            scales=tuple(meta["anchors"]["scales"]),
            aspect_ratios=tuple(meta["anchors"]["aspect_ratios"]),
            stride=meta["anchors"]["stride"],
        ),
        pre_nms_top_k=meta["params"]["pre_nms_top_k"],
        nms_threshold=meta["params"]["nms_threshold"],
        top_n=meta["params"]["top_n"],
    )
    rpn.anchor_config_ = rpn.anchors
    rpn.feature_dim_ = meta["feature_dim"]
    rpn.classifiers_ = []
    rpn.regressors_ = []
    rpn.minibootstrap_states_ = [None] * meta["num_anchors"]
    for a in range(meta["num_anchors"]):
        rpn.classifiers_.append(load_model(dir_path / f"anchor{a}_clf.okrr"))
        rpn.regressors_.append(
            [load_model(dir_path / f"anchor{a}_{name}.okrr") for name in ("tx", "ty", "tw", "th")]
        )
    return rpn


def save_detector_model(dir_path, det: OnlineDetector) -> None:
    dir_path = Path(dir_path)
    dir_path.mkdir(parents=True, exist_ok=True)
    meta = {
        "kind": "detector",
        "n_classes": det.n_classes,
        "params": {
            "pool_size": det.pool_size,
            "pool_mode": det.pool_mode,
            "samples_per_bin": det.samples_per_bin,
            "score_threshold": det.score_threshold,
            "nms_threshold": det.nms_threshold,
        },
        "feature_dim": det.feature_dim_,
    }
    for c in range(det.n_classes):
        save_model(dir_path / f"class{c + 1}_clf.okrr", det.classifiers_[c])
        for k, name in enumerate(("tx", "ty", "tw", "th")):
            save_model(dir_path / f"class{c + 1}_{name}.okrr", det.regressors_[c][k])
    (dir_path / "model.json").write_text(json.dumps(meta, indent=1, sort_keys=True),
                                         encoding="utf-8")


def load_detector_model(dir_path, rpn: OnlineRpn | None = None) -> OnlineDetector:
    dir_path = Path(dir_path)
    meta = json.loads((dir_path / "model.json").read_text(encoding="utf-8"))
    if meta.get("kind") != "detector":
        raise ValueError(f"{dir_path} does not hold a detector model")
    det = OnlineDetector(
        rpn=rpn,
        n_classes=meta["n_classes"],
        pool_size=meta["params"]["pool_size"],
        pool_mode=meta["params"]["pool_mode"],
        samples_per_bin=meta["params"]["samples_per_bin"],
        score_threshold=meta["params"]["score_threshold"],
        nms_threshold=meta["params"]["nms_threshold"],
    )
    det.feature_dim_ = meta["feature_dim"]
    det.classifiers_ = []
    det.regressors_ = []
    det.minibootstrap_states_ = [None] * meta["n_classes"]
    for c in range(meta["n_classes"]):
        det.classifiers_.append(load_model(dir_path / f"class{c + 1}_clf.okrr"))
        det.regressors_.append(
            [load_model(dir_path / f"class{c + 1}_{name}.okrr") for name in ("tx", "ty", "tw", "th")]
        )
    return det


# -- config (de)serialization --------------------------------------------------

def config_to_dict(cfg: ExperimentConfig) -> dict:
    """The fully resolved configuration, defaults included, as plain JSON."""
    def stage(s: StageConfig):
        return {
            "hyper": dataclasses.asdict(s.hyper),
            "minibootstrap": dataclasses.asdict(s.minibootstrap),
            "ridge_lam": s.ridge_lam,
        }

    out = dataclasses.asdict(cfg)
    out["anchors"] = {
        "scales": list(cfg.anchors.scales),
        "aspect_ratios": list(cfg.anchors.aspect_ratios),
        "stride": cfg.anchors.stride,
    }
    out["rpn"] = stage(cfg.rpn)
    out["detector"] = stage(cfg.detector)
    out["proposal_counts"] = list(cfg.proposal_counts)
    out["search_sigmas"] = list(cfg.search_sigmas)
    out["search_lambdas"] = list(cfg.search_lambdas)
    return out


def config_from_dict(raw: dict) -> ExperimentConfig:
    """Build a config from a JSON dictionary; unknown keys are rejected."""
    raw = dict(raw)
    try:
        anchors = AnchorConfig(**raw.pop("anchors")) if "anchors" in raw else AnchorConfig()
        rpn = _stage_from_dict(raw.pop("rpn", {}))
        detector = _stage_from_dict(raw.pop("detector", {}))
        known = {f.name for f in dataclasses.fields(ExperimentConfig)}
        unknown = set(raw) - known
        if unknown:
            raise ConfigError(f"unknown config fields: {sorted(unknown)}")
        for key in ("proposal_counts", "search_sigmas", "search_lambdas"):
            if key in raw:
                raw[key] = tuple(raw[key])
        return ExperimentConfig(anchors=anchors, rpn=rpn, detector=detector, **raw)
    except TypeError as exc:
        raise ConfigError(f"invalid config: {exc}") from exc


def _stage_from_dict(raw: dict) -> StageConfig:
    hyper = KernelHyperParams(**raw.get("hyper", {}))
    mb = MinibootstrapConfig(**raw.get("minibootstrap", {}))
    return StageConfig(hyper=hyper, minibootstrap=mb, ridge_lam=raw.get("ridge_lam"))


def apply_overrides(raw: dict, overrides) -> dict:
    """Apply ``key.path=value`` overrides onto a raw config dictionary.

    Values parse as JSON when possible and fall back to plain strings, so
    ``--rpn.hyper.sigma 4.0`` and ``--detector.pool_mode mean_pool`` both
    work from the command line.
    """
    out = json.loads(json.dumps(raw))  # deep copy
    for dotted, value in overrides:
        try:
            parsed = json.loads(value)
        except json.JSONDecodeError:
            parsed = value
        node = out
        parts = dotted.split(".")
        for part in parts[:-1]:
            node = node.setdefault(part, {})
            if not isinstance(node, dict):
                raise ConfigError(f"cannot override {dotted}: {part} is not an object")
        node[parts[-1]] = parsed
    return out
