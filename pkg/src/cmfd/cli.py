"""Command-line entry point: generate | train | detect | evaluate | render.

Exit codes: 0 success, 1 usage error, 2 data error, 3 internal error.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

import numpy as np

from .base import PluginUnavailable, SampleSkipped

log = logging.getLogger("cmfd")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_INTERNAL = 0, 1, 2, 3
CHECKPOINT_ENV = "CMFD_CHECKPOINT_DIR"
CHECKPOINT_NAME = "backbone.pt"


class DataError(Exception):
    """Bad or missing input data; maps to exit code 2."""


class UsageError(Exception):
    """Invalid command-line combination; maps to exit code 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_USAGE, f"{self.prog}: error: {message}\n")


def _default_checkpoint():
    d = os.environ.get(CHECKPOINT_ENV)
    return Path(d) / CHECKPOINT_NAME if d else None


def _config(args):
    from .config import load_config

    try:
        return load_config(args.config, args.set)
    except (OSError, json.JSONDecodeError) as exc:
        raise DataError(f"cannot read config: {exc}") from exc


# -- generate ----------------------------------------------------------------

def cmd_generate(args):
    from .synth import TransformRanges, build_dataset, load_corpus, procedural_corpus

    if args.corpus is not None:
        try:
            corpus = load_corpus(args.corpus)
        except (FileNotFoundError, OSError, ValueError) as exc:
            raise DataError(f"corpus error: {exc}") from exc
        if not corpus:
            raise DataError(f"corpus {args.corpus} holds no images")
    else:
        corpus = procedural_corpus(args.procedural, size=args.size, seed=args.seed)
    ranges = {"default": TransformRanges(), "easy": TransformRanges.easy(),
              "identity": TransformRanges.identity(), "mild": TransformRanges.mild()}[args.transforms]
    manifest = build_dataset(corpus, args.n, args.out, seed=args.seed, ranges=ranges, size=args.size,
                             resume=not args.overwrite)
    print(f"wrote {len(manifest)} samples to {manifest.path} ({manifest.skipped} skipped)")
    return EXIT_OK


# -- train -------------------------------------------------------------------

def cmd_train(args):
    from .synth import read_manifest

    cfg = _config(args)
    out = Path(args.out) if args.out else _default_checkpoint()
    if out is None:
        raise UsageError(f"give --out or set {CHECKPOINT_ENV}")
    try:
        manifest = read_manifest(args.manifest)
    except OSError as exc:
        raise DataError(f"cannot read manifest: {exc}") from exc
    entries = manifest.entries[: args.limit] if args.limit else manifest.entries
    if not entries:
        raise DataError(f"manifest {args.manifest} lists no samples")
    data = manifest.pairs()
    pairs = [data[i] for i in range(len(entries))]
    est = cfg.make_backbone()
    for name in ("epochs", "batch_size", "lr"):
        if getattr(args, name) is not None:
            est.set_params(**{name: getattr(args, name)})
    est.fit([p[0] for p in pairs], [p[1] for p in pairs])
    out.parent.mkdir(parents=True, exist_ok=True)
    est.save(out)
    tr = est.loss_trace_
    print(f"trained on {len(pairs)} samples; loss {tr[0]:.4f} -> {tr[-1]:.4f}; saved {out}")
    return EXIT_OK


# -- detect ------------------------------------------------------------------

def _image_ids(paths):
    ids, seen = [], {}
    for p in paths:
        stem = Path(p).stem
        n = seen.get(stem, 0)
        seen[stem] = n + 1
        ids.append(stem if n == 0 else f"{stem}_{n}")
    return ids


def _score_path(scores_arg, image_id, n_images):
    p = Path(scores_arg)
    if p.is_dir():
        return p / f"{image_id}.png"
    if n_images > 1:
        raise UsageError("--scores must be a directory of <image-id>.png maps when detecting several images")
    return p


def cmd_detect(args):
    from .backbone import SelfDeepMatcher
    from .io import read_image, read_score_map
    from .pipeline import TwoStageDetector
    from .records import write_record

    cfg = _config(args)
    if args.no_crf:
        cfg.refiner["use_crf"] = False
    refiner = cfg.make_refiner()
    backbone = None
    if args.scores is None:
        ckpt = Path(args.checkpoint) if args.checkpoint else _default_checkpoint()
        if ckpt is not None and ckpt.exists():
            backbone = SelfDeepMatcher.load(ckpt)
        elif args.random_init:
            log.warning("no checkpoint: using a randomly initialised backbone")
            backbone = cfg.make_backbone().initialize()
        else:
            where = ckpt if ckpt is not None else f"--checkpoint or ${CHECKPOINT_ENV}"
            raise DataError(f"no backbone checkpoint found ({where}); pass --random-init to run untrained")
    det = TwoStageDetector.from_parts(backbone, refiner, stage1_only=args.stage1_only)
    out = Path(args.out)
    failures = 0
    for path, image_id in zip(args.images, _image_ids(args.images)):
        try:
            image = read_image(path)
            scores = None
            if args.scores is not None:
                scores = read_score_map(_score_path(args.scores, image_id, len(args.images)))
            result = det.detect(image, scores)
        except (OSError, ValueError) as exc:
            failures += 1
            print(f"error: {path}: {exc}", file=sys.stderr)
            continue
        write_record(out / image_id, image_id, path, result, cfg.to_dict())
        if result.mask is not None:
            from .io import write_mask

            (out / "masks").mkdir(parents=True, exist_ok=True)
            write_mask(out / "masks" / f"{image_id}.png", result.mask)
        print(f"{image_id}: " + ", ".join(f"{k} {v:.3f}s" for k, v in result.timings.items()))
    return EXIT_DATA if failures else EXIT_OK


# -- evaluate ----------------------------------------------------------------

def _find_prediction(pred_dir, image_id):
    for cand in (pred_dir / f"{image_id}.png", pred_dir / "masks" / f"{image_id}.png",
                 pred_dir / image_id / "mask.png"):
        if cand.exists():
            return cand
    return None


def cmd_evaluate(args):
    from .io import read_mask
    from .metrics import aggregate, image_flag, image_level_metrics, pixel_metrics
    from .synth import read_manifest

    try:
        manifest = read_manifest(args.manifest)
    except OSError as exc:
        raise DataError(f"cannot read manifest: {exc}") from exc
    pred_dir = Path(args.predictions)
    root = manifest.path.parent
    rows, names, flags, labels = [], [], [], []
    for e in manifest.entries:
        image_id = Path(e["image"]).stem
        gt = read_mask(root / e["mask"])
        found = _find_prediction(pred_dir, image_id)
        if found is None:
            if not args.allow_missing:
                raise DataError(f"missing prediction for {image_id} (looked for {pred_dir / (image_id + '.png')})")
            pred = np.zeros_like(gt)
        else:
            pred = read_mask(found)
        rows.append(pixel_metrics(pred, gt))
        names.append(image_id)
        flags.append(image_flag(pred, args.min_area))
        labels.append(bool(gt.any()))
    report = aggregate(rows, names=names)
    report.image_level = image_level_metrics(flags, labels)
    out = Path(args.out) if args.out else pred_dir / "report.json"
    out.parent.mkdir(parents=True, exist_ok=True)
    out.write_text(report.to_json())
    out.with_suffix(".txt").write_text(report.table() + "\n")
    print(report.table())
    return EXIT_OK


# -- render ------------------------------------------------------------------

def cmd_render(args):
    from .io import write_image
    from .records import load_record_artifacts
    from .render import render_overlay

    try:
        image, scores, boxes, pairs, mask = load_record_artifacts(args.record)
    except (OSError, ValueError, KeyError) as exc:
        raise DataError(f"cannot load record: {exc}") from exc
    out = Path(args.out)
    out.parent.mkdir(parents=True, exist_ok=True)
    write_image(out, render_overlay(image, scores, boxes, pairs, mask))
    print(f"wrote {out}")
    return EXIT_OK


# -- parser ------------------------------------------------------------------

def build_parser():
    p = _Parser(prog="cmfd", description="Two-stage copy-move forgery detection.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="command", required=True, parser_class=_Parser)

    def with_config(sp):
        sp.add_argument("--config", help="JSON config file")
        sp.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                        help="override a config entry (value parsed as JSON when possible)")

    g = sub.add_parser("generate", help="synthesize a forgery dataset")
    src = g.add_mutually_exclusive_group()
    src.add_argument("--corpus", help="directory of <name>.png + <name>_regions.png source images")
    src.add_argument("--procedural", type=int, default=20, metavar="N",
                     help="use N procedurally generated source images (default)")
    g.add_argument("--n", type=int, required=True, help="number of samples")
    g.add_argument("--seed", type=int, default=0)
    g.add_argument("--size", type=int, default=512)
    g.add_argument("--transforms", choices=("default", "mild", "easy", "identity"), default="default")
    g.add_argument("--out", default="dataset")
    g.add_argument("--overwrite", action="store_true", help="ignore an existing manifest instead of resuming")
    g.set_defaults(func=cmd_generate)

    t = sub.add_parser("train", help="train the backbone on a generated dataset")
    with_config(t)
    t.add_argument("--manifest", required=True)
    t.add_argument("--out", help=f"checkpoint path (default ${CHECKPOINT_ENV}/{CHECKPOINT_NAME})")
    t.add_argument("--epochs", type=int)
    t.add_argument("--batch-size", type=int)
    t.add_argument("--lr", type=float)
    t.add_argument("--limit", type=int, help="use only the first N samples")
    t.set_defaults(func=cmd_train)

    d = sub.add_parser("detect", help="run the detector on images")
    with_config(d)
    d.add_argument("images", nargs="+")
    d.add_argument("--checkpoint")
    d.add_argument("--random-init", action="store_true", help="allow an untrained backbone")
    d.add_argument("--stage1-only", action="store_true", help="stop after the backbone score map")
    d.add_argument("--no-crf", action="store_true", help="threshold S_in at 0.5 instead of CRF")
    d.add_argument("--scores", help="external score map (file, or directory of <id>.png); skips the backbone")
    d.add_argument("--out", default="detections")
    d.set_defaults(func=cmd_detect)

    e = sub.add_parser("evaluate", help="score predicted masks against a manifest")
    e.add_argument("--manifest", required=True)
    e.add_argument("--predictions", required=True)
    e.add_argument("--allow-missing", action="store_true", help="count missing masks as empty")
    e.add_argument("--min-area", type=int, default=1, help="pixels needed to flag an image forged")
    e.add_argument("--out", help="report path (default <predictions>/report.json)")
    e.set_defaults(func=cmd_evaluate)

    r = sub.add_parser("render", help="draw a detection record as an overlay PNG")
    r.add_argument("--record", required=True)
    r.add_argument("--out", required=True)
    r.set_defaults(func=cmd_render)
    return p


def main(argv=None):
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        return args.func(args)
    except UsageError as exc:
        print(f"usage error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except (DataError, SampleSkipped, PluginUnavailable, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except ValueError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_DATA
    except Exception as exc:  # noqa: BLE001
        log.exception("internal error")
        print(f"internal error: {exc}", file=sys.stderr)
        return EXIT_INTERNAL


if __name__ == "__main__":
    sys.exit(main())
