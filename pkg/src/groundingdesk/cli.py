"""``groundingdesk`` command line: train, eval, convert, synth, sweep, inspect.

Exit codes: 0 success, 2 configuration error, 3 data error, 4 numeric error.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from pathlib import Path
from typing import Sequence

import numpy as np

from .checkpoint import load_checkpoint, read_manifest, save_checkpoint
from .data import (
    DatasetManifest,
    SynthSpec,
    convert_coco_style,
    load_pixels,
    load_unified,
    save_pixels,
    synth_generate,
    write_unified,
)
from .errors import ConfigError, GroundingError
from .inference import MODES, Predictor, check_mode, run_inference, score
from .metrics import EvalReport, read_predictions, write_predictions
from .model.detector import GroundingDetector
from .runconfig import RunConfig, version_string
from .training import build_vocabulary, prepare_example, train

log = logging.getLogger("groundingdesk")

ANNOTATIONS = "annotations.jsonl"
MANIFEST = "manifest.json"


# -- helpers -----------------------------------------------------------------------------------

def _load_config(args) -> RunConfig:
    cfg = RunConfig.load(args.config) if args.config else RunConfig()
    if args.seed is not None:
        cfg = cfg.with_seed(args.seed)
    if args.out:
        cfg.out_dir = args.out
    return cfg


def _prepare_run_dir(cfg: RunConfig, command: str) -> Path:
    out = Path(cfg.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    (out / "config.json").write_text(cfg.to_json(), encoding="utf-8")
    run = {"command": command, "seed": cfg.seed, "version": version_string()}
    (out / "run.json").write_text(json.dumps(run, indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return out


def _load_dataset(manifest_path: str | None, what: str):
    if not manifest_path:
        raise ConfigError(f"no {what} manifest given")
    manifest = DatasetManifest.load(manifest_path)
    samples = load_unified(manifest.annotation_file)
    return manifest, samples


def _pixels(manifest: DatasetManifest, samples) -> list[np.ndarray]:
    return [load_pixels(manifest.image_dir, s) for s in samples]


def _write_dataset(out: Path, name: str, task: str, samples, categories) -> DatasetManifest:
    out.mkdir(parents=True, exist_ok=True)
    write_unified(out / ANNOTATIONS, samples)
    manifest = DatasetManifest(name=name, task=task, path=ANNOTATIONS, categories=list(categories), root=out)
    manifest.save(out / MANIFEST)
    return manifest


# -- commands -----------------------------------------------------------------------------------

def cmd_train(cfg: RunConfig, steps: int | None = None) -> Path:
    """Train on ``cfg.train_manifest``; writes loss.csv, vocab.txt and checkpoint/ into the run dir."""
    manifest, samples = _load_dataset(cfg.train_manifest, "training")
    pixels = _pixels(manifest, samples)
    vocab = build_vocabulary(samples)
    if len(vocab) > cfg.model.vocab_size:
        raise ConfigError(f"dataset needs {len(vocab)} vocabulary entries, model.vocab_size is {cfg.model.vocab_size}")
    examples = [prepare_example(s, px, vocab, cfg.max_text_len) for s, px in zip(samples, pixels)]
    out = _prepare_run_dir(cfg, "train")
    model = GroundingDetector(cfg.model)
    vocab.save(out / "vocab.txt")
    result = train(model, examples, cfg.loss, cfg.optimizer, steps=steps, loss_csv=out / "loss.csv",
                   log_every=cfg.log_every)
    save_checkpoint(out / "checkpoint", model, vocab)
    log.info("trained %d steps; run directory %s", result.steps, out)
    return out


def cmd_eval(cfg: RunConfig, mode: str, checkpoint: str | None = None, manifest_path: str | None = None,
             threshold: float | None = None, sweep: bool = False, predictions: str | None = None,
             workers: int = 1) -> EvalReport:
    """Run (or read) predictions for a dataset and write predictions.jsonl plus report.{json,txt}."""
    manifest, samples = _load_dataset(manifest_path or cfg.eval_manifest, "evaluation")
    check_mode(mode, manifest, samples)
    if (threshold is not None or sweep) and mode != "rec":
        raise ConfigError("--threshold/--sweep apply to the rec mode only")
    if threshold is not None and not 0.0 <= threshold <= 1.0:
        raise ConfigError(f"threshold must lie in [0, 1], got {threshold}")
    floor = threshold if threshold is not None else cfg.metrics.score_floor
    if predictions:
        dets = [d for d in read_predictions(predictions) if d.score >= floor]
    else:
        if not checkpoint:
            raise ConfigError("eval needs --checkpoint or --predictions")
        model, vocab = load_checkpoint(checkpoint)
        predictor = Predictor(model, vocab, cfg.metrics, cfg.max_text_len)
        dets = run_inference(predictor, samples, _pixels(manifest, samples), mode, floor, workers)
    out = _prepare_run_dir(cfg, "eval")
    write_predictions(out / "predictions.jsonl", dets)
    report = score(mode, dets, samples, cfg.metrics, manifest, threshold, sweep)
    report.write(out)
    return report


def cmd_convert(source: str, out: str, name: str | None = None, split: str = "train") -> DatasetManifest:
    result = convert_coco_style(source, split)
    manifest = _write_dataset(Path(out), name or Path(source).stem, "OVD", result.samples, result.categories)
    log.info("converted %d images; dropped %d crowd annotations; clamped %d boxes",
             len(result.samples), result.dropped_crowd, result.clamped)
    return manifest


def cmd_synth(spec: SynthSpec, out: str, name: str = "synth") -> DatasetManifest:
    data = synth_generate(spec)
    root = Path(out)
    manifest = _write_dataset(root, name, "OVD", data.samples, data.categories)
    save_pixels(root, data.samples, data.pixels)
    (root / "synth.json").write_text(json.dumps(spec.to_dict(), indent=2, sort_keys=True) + "\n", encoding="utf-8")
    return manifest


def cmd_inspect(checkpoint: str) -> str:
    manifest = read_manifest(checkpoint)
    lines = ["config " + json.dumps(manifest.config.to_dict(), sort_keys=True),
             f"vocab_size {len(manifest.vocab)}"]
    for p in manifest.params:
        lines.append(f"{p.name} {'x'.join(map(str, p.shape)) or 'scalar'} {p.size}")
    lines.append(f"parameters {manifest.n_parameters}")
    return "\n".join(lines) + "\n"


# -- argument parsing ------------------------------------------------------------------------

def _common(p: argparse.ArgumentParser) -> None:
    p.add_argument("--config", help="run config JSON")
    p.add_argument("--seed", type=int, help="overrides the config seed")
    p.add_argument("--out", help="output directory")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="groundingdesk", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("train", help="train the toy detector")
    _common(p)
    p.add_argument("--steps", type=int, help="overrides optimizer.steps")

    p = sub.add_parser("eval", help="evaluate a checkpoint or a predictions file")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest", help="dataset manifest (default: config eval_manifest)")
    p.add_argument("--predictions", help="score an existing predictions.jsonl instead of running a model")
    p.add_argument("--mode", choices=MODES, default="ovd")
    p.add_argument("--threshold", type=float)
    p.add_argument("--sweep", action="store_true", help="gRefCOCO-style table over the configured thresholds")
    p.add_argument("--phrase-score", choices=("max", "mean"))
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("sweep", help="referring-expression threshold sweep (eval --mode rec --sweep)")
    _common(p)
    p.add_argument("--checkpoint")
    p.add_argument("--manifest")
    p.add_argument("--predictions")
    p.add_argument("--thresholds", type=float, nargs="+")

    p = sub.add_parser("convert", help="COCO detection JSON -> unified dataset")
    _common(p)
    p.add_argument("input")
    p.add_argument("--name")
    p.add_argument("--split", default="train")

    p = sub.add_parser("synth", help="generate a synthetic rectangles dataset")
    _common(p)
    p.add_argument("--n-images", type=int, default=4)
    p.add_argument("--n-categories", type=int, default=2)
    p.add_argument("--boxes-per-image", type=int, default=2)
    p.add_argument("--image-size", type=int, default=32)

    p = sub.add_parser("inspect", help="print a checkpoint manifest")
    p.add_argument("checkpoint")
    return parser


def _dispatch(args) -> None:
    if args.command == "inspect":
        sys.stdout.write(cmd_inspect(args.checkpoint))
        return
    if args.command in ("convert", "synth") and not args.out:
        raise ConfigError(f"{args.command} needs --out")
    if args.command == "convert":
        cmd_convert(args.input, args.out, args.name, args.split)
        return
    if args.command == "synth":
        seed = args.seed if args.seed is not None else (RunConfig.load(args.config).seed if args.config else 0)
        spec = SynthSpec(args.n_images, args.n_categories, args.boxes_per_image, args.image_size, seed)
        cmd_synth(spec, args.out)
        return
    cfg = _load_config(args)
    if args.command == "train":
        print(cmd_train(cfg, args.steps))
        return
    if args.command == "sweep":
        if args.thresholds:
            cfg.metrics.gref_thresholds = tuple(args.thresholds)
            cfg.metrics.__post_init__()
        report = cmd_eval(cfg, "rec", args.checkpoint, args.manifest, sweep=True, predictions=args.predictions)
    else:
        if args.phrase_score:
            cfg.metrics.phrase_score = args.phrase_score
        report = cmd_eval(cfg, args.mode, args.checkpoint, args.manifest, args.threshold, args.sweep,
                          args.predictions, args.workers)
    sys.stdout.write(report.to_text())


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        # overflow surfaces as NumericError from the explicit finiteness checks
        with np.errstate(over="ignore", invalid="ignore", divide="ignore"):
            _dispatch(args)
    except GroundingError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return exc.exit_code
    return 0


if __name__ == "__main__":
    sys.exit(main())
