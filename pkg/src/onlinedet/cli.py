"""Command-line front end.

Subcommands: synth, train-rpn, train-detector, run, eval-ar, eval-map,
ar-curve, search. Commands that take ``--config`` accept additional
``--<dotted.name> <value>`` pairs overriding any config field, e.g.
``--rpn.hyper.sigma 4.0``. Exit codes: 0 success, 2 config error,
3 data error, 4 training error.
"""

from __future__ import annotations

import json
import sys
from pathlib import Path

import click

from .data import SynthConfig, generate_synthetic_dataset, load_dataset
from .detector import read_detections
from .exceptions import ConfigError, DataError, TrainingError
from .experiment import (
    apply_overrides,
    config_from_dict,
    hyperparameter_search,
    load_rpn_model,
    run_experiment,
    save_detector_model,
    save_rpn_model,
    _build_detector,
    _build_rpn,
)
from .metrics import ar_curve, average_recall, mean_ap
from .rpn import read_proposals

EXIT_CONFIG = 2
EXIT_DATA = 3
EXIT_TRAINING = 4


def _guarded(fn):
    """Run a command body, mapping package errors to exit codes."""
    try:
        fn()
    except ConfigError as exc:
        click.echo(f"config error: {exc}", err=True)
        sys.exit(EXIT_CONFIG)
    except DataError as exc:
        click.echo(f"data error: {exc}", err=True)
        sys.exit(EXIT_DATA)
    except TrainingError as exc:
        click.echo(f"training error: {exc}", err=True)
        sys.exit(EXIT_TRAINING)


def _load_config(config_path, extra_args, seed=None, output_dir=None):
    try:
        raw = json.loads(Path(config_path).read_text(encoding="utf-8"))
    except OSError as exc:
        raise ConfigError(f"cannot read config {config_path}: {exc}") from exc
    except json.JSONDecodeError as exc:
        raise ConfigError(f"config {config_path} is not valid JSON: {exc}") from exc
    raw = apply_overrides(raw, _parse_overrides(extra_args))
    if seed is not None:
        raw["seed"] = seed
    if output_dir is not None:
        raw["output_dir"] = str(output_dir)
    return config_from_dict(raw)


def _parse_overrides(tokens):
    """Turn ["--a.b", "1", "--c.d", "x"] into [("a.b", "1"), ("c.d", "x")]."""
    tokens = list(tokens)
    pairs = []
    i = 0
    while i < len(tokens):
        tok = tokens[i]
        if not tok.startswith("--"):
            raise ConfigError(f"unexpected argument {tok!r}; overrides look like --key.path value")
        key = tok[2:]
        if "=" in key:
            key, value = key.split("=", 1)
        else:
            i += 1
            if i == len(tokens):
                raise ConfigError(f"override {tok!r} is missing a value")
            value = tokens[i]
        pairs.append((key, value))
        i += 1
    return pairs


_OVERRIDE_SETTINGS = dict(ignore_unknown_options=True, allow_extra_args=True)


@click.group()
def main():
    """On-line region proposal and detection training over feature maps."""


@main.command()
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", required=True, type=int)
@click.option("--n-images", default=200, show_default=True)
@click.option("--classes", "n_classes", default=5, show_default=True)
@click.option("--map-h", default=20, show_default=True)
@click.option("--map-w", default=20, show_default=True)
@click.option("--map-f", default=16, show_default=True)
@click.option("--stride", default=16, show_default=True)
@click.option("--noise-sigma", default=1.0, show_default=True)
@click.option("--signature-strength", default=10.0, show_default=True)
@click.option("--objects", nargs=2, type=int, default=(1, 2), show_default=True,
              help="min/max objects per image")
@click.option("--size-range", nargs=2, type=int, default=(3, 5), show_default=True,
              help="min/max object side length in cells")
@click.option("--size-step", default=2, show_default=True)
@click.option("--split", default="train", show_default=True)
@click.option("--prototype-seed", default=None, type=int,
              help="seed for the class prototypes; reuse it across splits of one task")
def synth(out, seed, n_images, n_classes, map_h, map_w, map_f, stride, noise_sigma,
          signature_strength, objects, size_range, size_step, split, prototype_seed):
    """Generate a planted-signature synthetic dataset."""

    def body():
        cfg = SynthConfig(
            n_images=n_images, map_h=map_h, map_w=map_w, map_f=map_f, stride=stride,
            n_classes=n_classes, objects_per_image=tuple(objects),
            object_size_range=tuple(size_range), object_size_step=size_step,
            signature_strength=signature_strength, noise_sigma=noise_sigma,
            split=split, seed=seed, prototype_seed=prototype_seed,
        )
        manifest = generate_synthetic_dataset(cfg, out)
        click.echo(f"wrote {manifest}")

    _guarded(body)


@main.command(name="train-rpn", context_settings=_OVERRIDE_SETTINGS)
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.pass_context
def train_rpn(ctx, config_path, out, seed):
    """Train only the proposal stage and save its model."""

    def body():
        cfg = _load_config(config_path, ctx.args, seed=seed, output_dir=out)
        cfg.validate(require_test=False)
        train = load_dataset(cfg.train_manifest)
        rpn = _build_rpn(cfg).fit(train)
        save_rpn_model(Path(out) / "rpn_model", rpn)
        click.echo(f"saved {Path(out) / 'rpn_model'}")

    _guarded(body)


@main.command(name="train-detector", context_settings=_OVERRIDE_SETTINGS)
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--rpn-model", "rpn_dir", required=True, type=click.Path())
@click.option("--out", required=True, type=click.Path())
@click.option("--seed", type=int, default=None)
@click.pass_context
def train_detector(ctx, config_path, rpn_dir, out, seed):
    """Train the detection head on proposals from a saved proposal model."""

    def body():
        cfg = _load_config(config_path, ctx.args, seed=seed, output_dir=out)
        cfg.validate(require_test=False)
        train = load_dataset(cfg.train_manifest)
        rpn = load_rpn_model(rpn_dir)
        detector = _build_detector(cfg, rpn, train.num_classes).fit(train)
        save_detector_model(Path(out) / "detector_model", detector)
        click.echo(f"saved {Path(out) / 'detector_model'}")

    _guarded(body)


@main.command(context_settings=_OVERRIDE_SETTINGS)
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", required=True, type=int)
@click.option("--out", default=None, type=click.Path())
@click.pass_context
def run(ctx, config_path, seed, out):
    """Run the full two-stage protocol and evaluate it."""

    def body():
        cfg = _load_config(config_path, ctx.args, seed=seed, output_dir=out)
        report = run_experiment(cfg)
        metrics = report["metrics"]
        click.echo(json.dumps({
            "val_ar": metrics["val"]["ar"], "val_map": metrics["val"]["map"],
            "test_ar": metrics["test"]["ar"], "test_map": metrics["test"]["map"],
            "rpn_train_seconds": report["timing"]["rpn_train_seconds"],
            "detector_train_seconds": report["timing"]["detector_train_seconds"],
        }, indent=1, sort_keys=True))

    _guarded(body)


@main.command(context_settings=_OVERRIDE_SETTINGS)
@click.option("--config", "config_path", required=True, type=click.Path())
@click.option("--seed", required=True, type=int)
@click.option("--out", default=None, type=click.Path())
@click.pass_context
def search(ctx, config_path, seed, out):
    """Grid-search sigma/lambda on validation mAP, then retrain the best."""

    def body():
        cfg = _load_config(config_path, ctx.args, seed=seed, output_dir=out)
        report = hyperparameter_search(cfg)
        click.echo(json.dumps({
            "best": report["search"]["best"],
            "test_map": report["metrics"]["test"]["map"],
        }, indent=1, sort_keys=True))

    _guarded(body)


@main.command(name="eval-ar")
@click.option("--proposals", "proposals_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--top-n", default=None, type=int)
@click.option("--out", default=None, type=click.Path(), help="write a JSON result here")
def eval_ar(proposals_path, manifest_path, top_n, out):
    """Average recall of a proposal dump against a manifest's ground truth."""

    def body():
        dataset = load_dataset(manifest_path)
        dump = read_proposals(proposals_path)
        props, gts = [], []
        for rec in dataset.records:
            if rec.image_id not in dump:
                raise DataError(f"proposal dump is missing image {rec.image_id}")
            boxes, _ = dump[rec.image_id]
            props.append(boxes[:top_n] if top_n else boxes)
            gts.append(rec.boxes)
        try:
            ar = average_recall(props, gts)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        result = {"ar": ar, "top_n": top_n, "images": len(dataset)}
        if out:
            Path(out).write_text(json.dumps(result, indent=1, sort_keys=True), encoding="utf-8")
        click.echo(json.dumps(result, indent=1, sort_keys=True))

    _guarded(body)


@main.command(name="eval-map")
@click.option("--detections", "detections_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--iou-thr", default=0.5, show_default=True)
@click.option("--mode", default="voc07", type=click.Choice(["voc07", "all_points"]),
              show_default=True)
@click.option("--out", default=None, type=click.Path())
def eval_map(detections_path, manifest_path, iou_thr, mode, out):
    """Mean average precision of a detection dump against a manifest."""

    def body():
        dataset = load_dataset(manifest_path)
        dump = read_detections(detections_path)
        dets, gts = [], []
        for rec in dataset.records:
            if rec.image_id not in dump:
                raise DataError(f"detection dump is missing image {rec.image_id}")
            dets.append(dump[rec.image_id])
            gts.append((rec.boxes, rec.class_ids))
        try:
            map_value, per_class = mean_ap(dets, gts, iou_thr=iou_thr, mode=mode)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        result = {"map": map_value, "per_class_ap": per_class,
                  "iou_thr": iou_thr, "mode": mode}
        if out:
            Path(out).write_text(json.dumps(result, indent=1, sort_keys=True), encoding="utf-8")
        click.echo(json.dumps(result, indent=1, sort_keys=True))

    _guarded(body)


@main.command(name="ar-curve")
@click.option("--proposals", "proposals_path", required=True, type=click.Path())
@click.option("--manifest", "manifest_path", required=True, type=click.Path())
@click.option("--n-values", default="10,25,50,100,150,300", show_default=True)
@click.option("--csv", "csv_path", default=None, type=click.Path())
def ar_curve_cmd(proposals_path, manifest_path, n_values, csv_path):
    """AR at several proposal counts; optionally write the curve as CSV."""

    def body():
        dataset = load_dataset(manifest_path)
        dump = read_proposals(proposals_path)
        props, gts = [], []
        for rec in dataset.records:
            if rec.image_id not in dump:
                raise DataError(f"proposal dump is missing image {rec.image_id}")
            props.append(dump[rec.image_id][0])
            gts.append(rec.boxes)
        counts = [int(v) for v in n_values.split(",") if v]
        try:
            curve = ar_curve(props, gts, counts)
        except ValueError as exc:
            raise DataError(str(exc)) from exc
        if csv_path:
            with open(csv_path, "w", encoding="utf-8") as fh:
                fh.write("n_proposals,average_recall\n")
                for n, ar in curve:
                    fh.write(f"{n},{ar:.17g}\n")
        click.echo(json.dumps({"curve": curve}, indent=1, sort_keys=True))

    _guarded(body)


if __name__ == "__main__":
    main()
