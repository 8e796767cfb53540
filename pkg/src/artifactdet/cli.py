"""Command-line entry point: synth | train | eval | predict | report."""

from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path
from typing import Sequence

import numpy as np
import torch
from PIL import Image

from .backbone import BackboneError
from .compositor import load_pattern_bank, synthesize_sample
from .config import ConfigError, RunConfig, load_config
from .data import (DataValidationError, DatasetManifest, Sample, SampleRecord, class_table, load_manifest,
                   read_image, read_mask, sample_id, split_dataset, write_image, write_manifest, write_mask)
from .evaluation import MetricReport, evaluate, generalization_split_eval
from .model import MissingAnchorsError
from .prompts import PromptError
from .report import render_generalization, render_report
from .training import (CheckpointError, NumericError, SampleDataset, StageError, load_checkpoint,
                       resize_image, train_full)

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_NUMERIC = 0, 1, 2, 3
IMAGE_SUFFIXES = (".png", ".jpg", ".jpeg")
log = logging.getLogger("artifactdet")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _global_flags(suppress: bool) -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(add_help=False)
    default = argparse.SUPPRESS if suppress else None
    p.add_argument("--config", default=default, help="YAML run configuration")
    p.add_argument("--seed", type=int, default=default, help="root seed (overrides the config)")
    p.add_argument("--verbose", "-v", action="store_true", default=argparse.SUPPRESS if suppress else False)
    return p


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="artifactdet", parents=[_global_flags(False)],
                     description="Few-shot visual artifact classification and segmentation")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    common = [_global_flags(True)]

    p = sub.add_parser("synth", parents=common, help="composite artifact samples and write a manifest")
    p.add_argument("--clean-dir", help="directory of clean images")
    p.add_argument("--patterns", help="pattern bank directory (<class>/*.png, bank.yaml)")
    p.add_argument("--anchors", help="directory of anchor masks named like the clean images")
    p.add_argument("--out-manifest", required=True)
    p.add_argument("--per-class-count", type=int, default=10)
    p.add_argument("--toy", action="store_true", help="write the built-in toy dataset instead")

    p = sub.add_parser("train", parents=common, help="run the staged training schedule")
    p.add_argument("--manifest", required=True)
    p.add_argument("--out", required=True)
    p.add_argument("--stages", help="comma-separated subset of I,II,III")
    p.add_argument("--resume", help="checkpoint directory to continue from")

    p = sub.add_parser("eval", parents=common, help="score a checkpoint on a manifest split")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", default="test", choices=["train", "val", "test"])
    p.add_argument("--fpr-cap", type=float)
    p.add_argument("--out", required=True, help="report JSON path")
    p.add_argument("--generalization", action="store_true",
                   help="also report synthetic vs real-captured subsets")

    p = sub.add_parser("predict", parents=common, help="classify and segment images")
    p.add_argument("--checkpoint", required=True)
    p.add_argument("images", nargs="+")
    p.add_argument("--out-dir", required=True)

    p = sub.add_parser("report", parents=common, help="render an evaluation report")
    p.add_argument("--eval", required=True, dest="eval_json")
    p.add_argument("--anchor-stats")
    p.add_argument("--out", help="write the machine-readable rendering here")
    return parser


def _run_config(args) -> RunConfig:
    cfg = load_config(args.config)
    if args.seed is not None:
        cfg.seed = int(args.seed)
    return cfg.validate()


# ---- synth ------------------------------------------------------------------


def export_samples(samples: Sequence[Sample], manifest_path: Path, class_names) -> DatasetManifest:
    """Write images/masks beside ``manifest_path`` and return the (unsplit) manifest."""
    root = manifest_path.parent
    records = []
    names = list(class_names)
    for i, s in enumerate(samples):
        stem = f"{names[s.class_id]}_{i:05d}"
        img_rel = f"images/{stem}.png"
        write_image(root / img_rel, s.image)
        mask_rel = None
        if s.class_id != 0:
            mask_rel = f"masks/{stem}.png"
            write_mask(root / mask_rel, s.mask)
        records.append(SampleRecord(id=sample_id(img_rel), image_path=img_rel, class_id=s.class_id,
                                    origin=s.origin, mask_path=mask_rel, phi=s.phi, object_name=s.object_name))
    return DatasetManifest(tuple(records), class_table(names), root)


def cmd_synth(args, cfg: RunConfig) -> int:
    out = Path(args.out_manifest)
    rng = np.random.default_rng(cfg.subsystem_seed("synth"))
    if args.toy:
        from .toydata import make_toy_dataset
        samples = make_toy_dataset(per_class=max(3, args.per_class_count), size=cfg.input_size,
                                   seed=cfg.subsystem_seed("toydata"))
    else:
        if not args.clean_dir or not args.patterns:
            raise UsageError("synth needs --clean-dir and --patterns (or --toy)")
        clean_dir = Path(args.clean_dir)
        files = sorted(f for f in clean_dir.iterdir() if f.suffix.lower() in IMAGE_SUFFIXES) \
            if clean_dir.is_dir() else []
        if not files:
            raise DataValidationError(f"no clean images in {clean_dir}")
        bank = load_pattern_bank(args.patterns, cfg.class_names)
        cleans = [Sample(image=read_image(f), mask=None, class_id=0, origin="clean",
                         object_name=f.stem.split("_")[0]) for f in files]
        for s, f in zip(cleans, files):
            s.mask = np.zeros(s.image.shape[:2], dtype=bool)
        samples = list(cleans)
        for class_id in sorted({c for _, c in bank.patterns}):
            for j in range(args.per_class_count):
                k = int(rng.integers(len(cleans)))
                anchor = np.ones(cleans[k].image.shape[:2], dtype=bool)
                if args.anchors:
                    path = Path(args.anchors) / f"{files[k].stem}.png"
                    if not path.exists():
                        raise DataValidationError(f"anchor mask not found: {path}")
                    anchor = read_mask(path)
                samples.append(synthesize_sample(cleans[k], bank, class_id, anchor, rng))
    manifest = export_samples(samples, out, cfg.class_names)
    manifest = split_dataset(manifest, cfg.split_ratios, cfg.subsystem_seed("split"))
    write_manifest(manifest, out)
    (out.parent / "synth_config.yaml").write_text(json.dumps(cfg.to_dict(), indent=2))
    print(f"wrote {len(manifest)} samples to {out}: {manifest.class_histogram()}")
    return EXIT_OK


# ---- train / eval -----------------------------------------------------------------


def cmd_train(args, cfg: RunConfig) -> int:
    if args.stages:
        cfg.stages = [s.strip() for s in args.stages.split(",") if s.strip()]
        cfg.validate()
    torch.manual_seed(cfg.seed)
    manifest = load_manifest(args.manifest, cfg.class_names)
    resume = load_checkpoint(args.resume, cfg) if args.resume else None
    result = train_full(cfg, manifest, args.out, resume=resume)
    for stage_log in result.logs:
        if stage_log.steps:
            first, last = stage_log.steps[0]["total"], stage_log.steps[-1]["total"]
            print(f"stage {stage_log.stage}: total loss {first:.4f} -> {last:.4f} ({len(stage_log.steps)} steps)")
        else:
            print(f"stage {stage_log.stage}: no optimisation steps")
    print(f"final checkpoint: {result.checkpoints['final']}")
    return EXIT_OK


def cmd_eval(args, cfg_arg: RunConfig | None) -> int:
    model = load_checkpoint(args.checkpoint, cfg_arg)
    cfg = model.cfg
    fpr_cap = args.fpr_cap if args.fpr_cap is not None else cfg.fpr_cap
    manifest = load_manifest(args.manifest, cfg.class_names).subset(split=args.split)
    report = evaluate(model, SampleDataset(manifest, cfg.input_size), cfg.class_names, fpr_cap, cfg.batch_size)
    report.config["run_config"] = cfg.to_dict()
    report.config["split"] = args.split
    payload = report.to_dict()
    print(render_report(report, label=cfg.ablation))
    if args.generalization:
        synth = manifest.subset(origins=("synthetic", "clean"))
        real = manifest.subset(origins=("real", "clean"))
        paired = generalization_split_eval(model, SampleDataset(synth, cfg.input_size),
                                           SampleDataset(real, cfg.input_size), cfg.class_names, fpr_cap)
        payload["generalization"] = {k: v.to_dict() for k, v in paired.items()}
        print()
        print(render_generalization(paired))
    Path(args.out).parent.mkdir(parents=True, exist_ok=True)
    Path(args.out).write_text(json.dumps(payload, indent=2))
    return EXIT_OK


# ---- predict / report ---------------------------------------------------------------


def _to_png(arr01: np.ndarray) -> Image.Image:
    return Image.fromarray(np.rint(np.clip(arr01, 0, 1) * 255).astype(np.uint8), mode="L")


def cmd_predict(args, cfg_arg: RunConfig | None) -> int:
    model = load_checkpoint(args.checkpoint, cfg_arg)
    cfg = model.cfg
    out = Path(args.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    results = []
    for i, path in enumerate(args.images):
        try:
            image = read_image(path)
        except (OSError, ValueError) as exc:
            raise DataValidationError(f"cannot read image {path}: {exc}") from None
        with torch.no_grad():
            preds = model.predict(resize_image(image, cfg.input_size)[None], [None])
        probs = preds.class_probs[0].double().numpy()
        amap = preds.anomaly_map[0].double().numpy()
        pixel_cls = preds.pixel_probs[0].argmax(0).numpy()
        label = int(probs.argmax())
        stem = f"{i:03d}_{Path(path).stem}"
        _to_png(amap).save(out / f"{stem}_anomaly.png")
        binary = amap >= model.mask_threshold
        write_mask(out / f"{stem}_mask.png", binary)
        class_masks = {}
        for k, name in enumerate(cfg.class_names[1:], start=1):
            f = out / f"{stem}_mask_{name}.png"
            write_mask(f, binary & (pixel_cls == k))
            class_masks[name] = str(f)
        record = {
            "image": str(path),
            "class": cfg.class_names[label],
            "probability": float(probs[label]),
            "class_probabilities": dict(zip(cfg.class_names, map(float, probs))),
            "anomaly_map": str(out / f"{stem}_anomaly.png"),
            "mask": str(out / f"{stem}_mask.png"),
            "class_masks": class_masks,
            "mask_threshold": model.mask_threshold,
        }
        results.append(record)
        print(f"{path}\t{record['class']}\t{record['probability']:.4f}")
    (out / "predictions.json").write_text(
        json.dumps({"predictions": results, "config": cfg.to_dict()}, indent=2))
    return EXIT_OK


def cmd_report(args, cfg: RunConfig | None) -> int:
    try:
        data = json.loads(Path(args.eval_json).read_text())
        report = MetricReport.from_dict(data)
        stats = json.loads(Path(args.anchor_stats).read_text()) if args.anchor_stats else None
    except (OSError, json.JSONDecodeError, ValueError) as exc:
        raise DataValidationError(f"malformed report inputs: {exc}") from None
    text = render_report(report, stats)
    print(text)
    if args.out:
        Path(args.out).write_text(json.dumps(
            {"report": report.to_dict(), "anchor_stats": stats, "text": text}, indent=2))
    return EXIT_OK


COMMANDS = {"synth": cmd_synth, "train": cmd_train, "eval": cmd_eval, "predict": cmd_predict,
            "report": cmd_report}


def main(argv: Sequence[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.command in ("synth", "train"):
            cfg = _run_config(args)
        else:
            cfg = _run_config(args) if args.config else None
        return COMMANDS[args.command](args, cfg)
    except (UsageError, ConfigError) as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataValidationError, CheckpointError, MissingAnchorsError, StageError, PromptError,
            BackboneError, FileNotFoundError) as exc:
        print(f"data error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except (NumericError, FloatingPointError) as exc:
        print(f"numeric failure: {exc}", file=sys.stderr)
        return EXIT_NUMERIC


if __name__ == "__main__":
    sys.exit(main())
