"""Command-line entry point: dataset, distort, train, infer, eval, report and smoke."""
import argparse
import json
import logging
import sys
import time
from pathlib import Path

import torch

from . import checkpoint as ckpt
from .dataset import (DataError, VideoClip, build_dataset, load_clip, load_coco_corpus, manifest_path,
                      read_manifest, save_clip, write_manifest)
from .fixtures import write_coco_fixture
from .inference import detection_records, distorted_baseline, evaluate, load_trainer, run_clip, write_detections
from .metrics import EvalReport
from .report import write_report
from .trainer import TrainConfig, WindowDataset, read_log, train
from .turbsim import TurbulenceParams, apply_turbulence

log = logging.getLogger("turbdet")

EXIT_OK, EXIT_USAGE, EXIT_DATA, EXIT_MODEL = 0, 1, 2, 3


class UsageError(Exception):
    pass


class StageError(Exception):
    """Failure inside one pipeline stage; ``code`` is the exit status to report."""

    def __init__(self, stage, message, code):
        super().__init__(f"[{stage}] {message}")
        self.stage = stage
        self.code = code


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        raise UsageError(message)


# ------------------------------------------------------------------ stages

def stage_dataset(corpus_root, out_dir, subset="all", split="train", crop_size=256, frames=50, max_clips=None,
                  seed=0):
    corpus = load_coco_corpus(corpus_root, split)
    manifest = build_dataset(corpus, subset, split, out_dir, crop_size, frames, max_clips, seed)
    log.info("wrote %d clips to %s", len(manifest), out_dir)
    return manifest_path(out_dir, subset, split)


def stage_distort(manifest_file, params: TurbulenceParams):
    manifest = read_manifest(manifest_file)
    for e in manifest.entries:
        clean = load_clip(manifest.resolve(e.clean_path))
        rel = f"distorted/{e.clip_id}.npz"
        save_clip(apply_turbulence(clean, params), Path(manifest.root) / rel)
        e.distorted_path = rel
    write_manifest(manifest, manifest_file)
    log.info("distorted %d clips", len(manifest))
    return manifest


def stage_train(manifest_file, out_dir, config: TrainConfig, resume=False):
    manifest = read_manifest(manifest_file)
    data = WindowDataset.from_manifest(manifest, config.window, config.center_stride)
    trainer = train(config, data, out_dir, len(manifest.categories), resume=resume)
    return trainer


def stage_infer(checkpoint_file, clip_file, out_dir):
    trainer = load_trainer(checkpoint_file)
    clip = load_clip(clip_file)
    frames, dets = run_clip(trainer, clip)
    out = Path(out_dir)
    out.mkdir(parents=True, exist_ok=True)
    save_clip(VideoClip(frames, list(clip.boxes), clip.clip_id, is_distorted=False), out / f"{clip.clip_id}_mitigated.npz")
    records = detection_records(clip.clip_id, dets)
    write_detections(out / f"{clip.clip_id}_detections.jsonl", records)
    return frames, records


def stage_eval(checkpoint_file, manifest_file, out_file, variant=None, frame_stride=1):
    trainer = load_trainer(checkpoint_file)
    manifest = read_manifest(manifest_file)
    pairs = [(load_clip(manifest.resolve(e.clean_path)), load_clip(manifest.resolve(e.distorted_path)))
             for e in manifest.entries]
    frames = range(0, len(pairs[0][0]), frame_stride) if pairs else None
    report = evaluate(trainer, pairs, variant or trainer.config.pipeline, frames=frames)
    if out_file:
        report.save(out_file)
    return report


def stage_report(log_file, eval_files, out_dir):
    records = read_log(log_file) if log_file else []
    reports = [EvalReport.load(f) for f in eval_files or []]
    return write_report(reports, records, out_dir)


def _run_stage(name, fn, *args, **kwargs):
    try:
        return fn(*args, **kwargs)
    except DataError as exc:
        raise StageError(name, str(exc), EXIT_DATA) from exc
    except ckpt.CheckpointError as exc:
        raise StageError(name, str(exc), EXIT_MODEL) from exc
    except (ValueError, FileNotFoundError) as exc:
        code = EXIT_MODEL if name in ("train", "infer", "eval") else EXIT_DATA
        raise StageError(name, str(exc), code) from exc


def end_to_end_smoke(workdir, seed=0, manifest_hook=None):
    """dataset -> distort -> train (2 epochs) -> infer -> eval on a seeded tiny corpus.

    ``manifest_hook(path)`` runs after the manifest is written (tests use it
    to corrupt the file). Returns the EvalReport; raises StageError naming
    the failing stage.
    """
    work = Path(workdir)
    t0 = time.time()
    corpus = work / "corpus"
    write_coco_fixture(corpus, n_images=24, seed=seed, val_fraction=0.0, side_range=(64, 96),
                       object_range=(8, 20), max_objects=2)
    mf = _run_stage("dataset", stage_dataset, corpus, work / "data", "all", "train", 64, 12, 3, seed)
    if manifest_hook is not None:
        manifest_hook(mf)
    _run_stage("dataset", read_manifest, mf)
    _run_stage("distort", stage_distort, mf, TurbulenceParams(seed=seed))
    config = TrainConfig(epochs=2, seed=seed, model_scale="toy", token_stride=8, batch_size=2, center_stride=4)
    _run_stage("train", stage_train, mf, work / "run", config)
    last = work / "run" / "epoch_0002.pt"
    manifest = read_manifest(mf)
    first = manifest.resolve(manifest.entries[0].distorted_path)
    _run_stage("infer", stage_infer, last, first, work / "infer")
    report = _run_stage("eval", stage_eval, last, mf, work / "eval.json", "smoke")
    log.info("smoke finished in %.1f s", time.time() - t0)
    return report


# ------------------------------------------------------------------ parser

def build_parser():
    p = _Parser(prog="turbdet", description="Turbulence mitigation and detection pipeline.")
    p.add_argument("-v", "--verbose", action="store_true")
    sub = p.add_subparsers(dest="verb", parser_class=_Parser)

    d = sub.add_parser("dataset", help="crop-filter a COCO-format corpus into static clips")
    d.add_argument("--corpus", "--corpus-root", dest="corpus", help="corpus root with annotations/instances_<split>.json")
    d.add_argument("--out", required=True)
    d.add_argument("--subset", default="all", choices=["all", "top10", "carperson"])
    d.add_argument("--split", default="train")
    d.add_argument("--crop-size", "--crop", dest="crop_size", type=int, default=256)
    d.add_argument("--frames", type=int, default=50)
    d.add_argument("--max-clips", type=int)
    d.add_argument("--make-fixture", type=int, metavar="N",
                   help="first write an N-image synthetic fixture corpus at --corpus")
    d.add_argument("--seed", type=int, default=0)

    t = sub.add_parser("distort", help="apply the turbulence simulator to every clip of a manifest")
    t.add_argument("--manifest", required=True)
    t.add_argument("--warp-amp", "--warp-amplitude", dest="warp_amplitude", type=float, default=2.0,
                   help="RMS tilt in pixels")
    t.add_argument("--corr-len", "--correlation-length", dest="correlation_length", type=float, default=32.0)
    t.add_argument("--temporal-corr", type=float, default=0.5)
    t.add_argument("--blur-sigma", type=float, nargs=2, metavar=("MIN", "MAX"), default=(0.5, 1.5))
    t.add_argument("--seed", type=int, default=0)

    r = sub.add_parser("train", help="alternating training")
    r.add_argument("--manifest", required=True)
    r.add_argument("--out", required=True)
    r.add_argument("--config", help="JSON file with TrainConfig fields; flags override it")
    r.add_argument("--resume", action="store_true")
    r.add_argument("--seed", type=int)
    r.add_argument("--epochs", type=int)
    r.add_argument("--lr", type=float)
    r.add_argument("--batch-size", type=int)
    r.add_argument("--model-scale", choices=["paper", "toy"])
    r.add_argument("--detector-tier", choices=["tiny", "small", "medium"])
    r.add_argument("--token-stride", type=int, choices=[8, 16, 32])
    r.add_argument("--pipeline", choices=["alternating", "raw"])
    r.add_argument("--center-stride", type=int)
    r.add_argument("--max-steps", type=int)
    r.add_argument("--grad-clip", type=float)
    r.add_argument("--transformer-norm", choices=["batch", "layer"])
    r.add_argument("--device")

    i = sub.add_parser("infer", help="mitigate and detect on one clip")
    i.add_argument("--checkpoint", required=True)
    i.add_argument("--clip", required=True)
    i.add_argument("--out", required=True)
    i.add_argument("--seed", type=int, default=0)

    e = sub.add_parser("eval", help="score a checkpoint on a manifest")
    e.add_argument("--checkpoint")
    e.add_argument("--manifest", required=True)
    e.add_argument("--out")
    e.add_argument("--variant")
    e.add_argument("--frame-stride", type=int, default=1)
    e.add_argument("--distorted-baseline", action="store_true",
                   help="score the distorted frames themselves instead of a model")
    e.add_argument("--seed", type=int, default=0)

    o = sub.add_parser("report", help="plots and summary table from logs and eval reports")
    o.add_argument("--log")
    o.add_argument("--eval", nargs="*", default=[])
    o.add_argument("--out", required=True)

    s = sub.add_parser("smoke", help="run the whole pipeline on a tiny seeded corpus")
    s.add_argument("--workdir", required=True)
    s.add_argument("--seed", type=int, default=0)
    return p


def _train_config(args):
    overrides = {k: getattr(args, k) for k in ("seed", "epochs", "lr", "batch_size", "model_scale", "detector_tier",
                                               "token_stride", "pipeline", "center_stride", "max_steps", "device",
                                               "grad_clip", "transformer_norm")}
    if args.config:
        return TrainConfig.from_file(args.config, **overrides)
    return TrainConfig.from_dict({k: v for k, v in overrides.items() if v is not None})


def dispatch(args):
    v = args.verb
    if v == "dataset":
        if not args.corpus:
            raise UsageError("--corpus is required")
        if args.make_fixture:
            write_coco_fixture(args.corpus, n_images=args.make_fixture, seed=args.seed)
        mf = _run_stage("dataset", stage_dataset, args.corpus, args.out, args.subset, args.split, args.crop_size,
                        args.frames, args.max_clips, args.seed)
        print(mf)
    elif v == "distort":
        params = TurbulenceParams(args.warp_amplitude, args.correlation_length, args.temporal_corr,
                                  tuple(args.blur_sigma), args.seed)
        _run_stage("distort", stage_distort, args.manifest, params)
    elif v == "train":
        try:
            config = _train_config(args)
        except (ValueError, OSError, json.JSONDecodeError) as exc:
            raise UsageError(f"bad training config: {exc}") from exc
        _run_stage("train", stage_train, args.manifest, args.out, config, args.resume)
    elif v == "infer":
        torch.manual_seed(args.seed)
        frames, records = _run_stage("infer", stage_infer, args.checkpoint, args.clip, args.out)
        print(f"{len(frames)} frames, {len(records)} detection records")
    elif v == "eval":
        if args.distorted_baseline:
            def baseline():
                m = read_manifest(args.manifest)
                pairs = [(load_clip(m.resolve(e.clean_path)), load_clip(m.resolve(e.distorted_path)))
                         for e in m.entries]
                rep = distorted_baseline(pairs, args.variant or "distorted")
                if args.out:
                    rep.save(args.out)
                return rep
            report = _run_stage("eval", baseline)
        else:
            if not args.checkpoint:
                raise UsageError("--checkpoint is required unless --distorted-baseline is given")
            report = _run_stage("eval", stage_eval, args.checkpoint, args.manifest, args.out, args.variant,
                                args.frame_stride)
        print(report.to_json())
    elif v == "report":
        try:
            written = stage_report(args.log, args.eval, args.out)
        except (OSError, ValueError, json.JSONDecodeError) as exc:
            raise StageError("report", str(exc), EXIT_DATA) from exc
        for k, path in written.items():
            print(f"{k}: {path}")
    elif v == "smoke":
        report = end_to_end_smoke(args.workdir, args.seed)
        print(report.to_json())
    else:
        raise UsageError("a command is required")


def main(argv=None):
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(f"turbdet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except SystemExit as exc:  # --help
        return EXIT_OK if not exc.code else EXIT_USAGE
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        dispatch(args)
    except UsageError as exc:
        print(f"turbdet: error: {exc}", file=sys.stderr)
        return EXIT_USAGE
    except StageError as exc:
        print(f"turbdet: error: {exc}", file=sys.stderr)
        return exc.code
    return EXIT_OK


if __name__ == "__main__":
    sys.exit(main())
