"""Command-line entry point: ``islandseg <subcommand> [flags]``.

Exit codes: 0 success, 1 invalid input or arguments, 2 runtime failure.
Progress goes to stderr; results go to files under ``--out``.
"""

from __future__ import annotations

import argparse
import json
import logging
import sys
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, scene_io, shoreline, sweep, synthgen, trainer
from .decoder import DecoderConfig, SegmentationModel, UNetDecoder, predict_mask
from .encoder import EncoderConfig, MaeConfig, ViTEncoder, pretrain
from .scene_io import DataError

log = logging.getLogger("islandseg")


class UsageError(Exception):
    pass


class Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(f"{self.prog}: {message}")


def _ints(text: str) -> list[int]:
    return [int(t) for t in str(text).split(",") if t.strip()]


def _common() -> argparse.ArgumentParser:
    p = Parser(add_help=False)
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--out", default="out", help="output directory")
    p.add_argument("--config", help="JSON file of flag defaults (a provenance.json also works)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _encoder_flags(p):
    g = p.add_argument_group("encoder")
    g.add_argument("--encoder-checkpoint", help="pretrained encoder container")
    g.add_argument("--image-size", type=int, default=224)
    g.add_argument("--patch-size", type=int, default=16)
    g.add_argument("--embed-dim", type=int, default=192)
    g.add_argument("--depth", type=int, default=8)
    g.add_argument("--num-heads", type=int, default=3)
    g.add_argument("--mlp-ratio", type=float, default=4.0)
    g.add_argument("--tap-layers", type=_ints, default=[2, 4, 6, 8])


def _decoder_flags(p):
    g = p.add_argument_group("decoder")
    g.add_argument("--channel-widths", type=_ints, default=[512, 256, 128, 64])
    g.add_argument("--head-dropout", type=float, default=0.1)


def _train_flags(p):
    g = p.add_argument_group("training")
    g.add_argument("--max-epochs", "--epochs", dest="max_epochs", type=int, default=30)
    g.add_argument("--batch-size", type=int, default=4)
    g.add_argument("--learning-rate", "--lr", dest="learning_rate", type=float, default=1e-4)
    g.add_argument("--beta1", type=float, default=0.9)
    g.add_argument("--beta2", type=float, default=0.999)
    g.add_argument("--eps", type=float, default=1e-8)
    g.add_argument("--weight-decay", type=float, default=0.01)
    g.add_argument("--precision", choices=trainer.PRECISIONS, default="float32")
    g.add_argument("--freeze-encoder", action=argparse.BooleanOptionalAction, default=True)
    g.add_argument("--selection-scheme", default="macro-image-land")
    g.add_argument("--keep-checkpoints", choices=("all", "best"), default="all")


def build_parser() -> Parser:
    common = _common()
    parser = Parser(prog="islandseg", description=__doc__.splitlines()[0])
    sub = parser.add_subparsers(dest="command", required=True, parser_class=Parser)

    p = sub.add_parser("synth", parents=[common], help="generate a synthetic island dataset")
    p.add_argument("--n", type=int, default=225)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--noise-std", type=float, default=0.02)

    p = sub.add_parser("ingest", parents=[common], help="validate a manifest and compute normalization")
    p.add_argument("--manifest", required=True)
    p.add_argument("--size", type=int, default=224)
    p.add_argument("--convert", action="store_true", help="write resized pairs in the portable format")

    p = sub.add_parser("pretrain", parents=[common], help="MAE-pretrain an encoder on train-split scenes")
    p.add_argument("--manifest", required=True)
    _encoder_flags(p)
    p.add_argument("--steps", type=int, default=200)
    p.add_argument("--mae-batch-size", type=int, default=8)
    p.add_argument("--mae-lr", type=float, default=1.5e-4)
    p.add_argument("--mask-ratio", type=float, default=0.75)
    p.add_argument("--decoder-dim", type=int, default=128)
    p.add_argument("--decoder-depth", type=int, default=2)

    p = sub.add_parser("finetune", parents=[common], help="fine-tune the decoder on a training subset")
    p.add_argument("--manifest", required=True)
    p.add_argument("--train-size", type=int, help="random training subset size (default: all)")
    _encoder_flags(p)
    _decoder_flags(p)
    _train_flags(p)

    p = sub.add_parser("evaluate", parents=[common], help="score a checkpoint on one split")
    p.add_argument("--checkpoint", required=True, help="container path, or 'best' for <out>/checkpoints/best.pt")
    p.add_argument("--manifest", required=True)
    p.add_argument("--split", choices=scene_io.SPLITS, default="test")
    p.add_argument("--batch-size", type=int, default=8)
    p.add_argument("--save-masks", action="store_true")

    p = sub.add_parser("sweep", parents=[common], help="run the training-set-size ablation from a plan file")
    p.add_argument("--plan", required=True)
    p.add_argument("--jobs", type=int, help="parallel cells (overrides the plan)")

    p = sub.add_parser("extract", parents=[common], help="extract shoreline polylines")
    src = p.add_mutually_exclusive_group(required=True)
    src.add_argument("--mask", help="label mask raster")
    src.add_argument("--scene", help="scene raster to segment with --checkpoint")
    p.add_argument("--checkpoint")
    p.add_argument("--resolution", type=float, default=10.0, help="metres per pixel")
    p.add_argument("--tolerance", type=float, default=0.0, help="vertex decimation tolerance (pixels)")

    p = sub.add_parser("report", parents=[common], help="re-emit table and figures from results.json")
    p.add_argument("--results", required=True)
    return parser


def parse_args(argv) -> argparse.Namespace:
    """Parse ``argv``; a ``--config`` file supplies defaults (and required flags) for the chosen subcommand."""
    parser = build_parser()
    pre = argparse.ArgumentParser(add_help=False)
    pre.add_argument("--config")
    known, _ = pre.parse_known_args(argv)
    if known.config:
        path = Path(known.config)
        if not path.is_file():
            raise DataError(f"config file not found: {path}")
        cfg = json.loads(path.read_text())
        cfg = {k: v for k, v in cfg.get("args", cfg).items() if k not in ("command", "config")}
        subparsers = parser._subparsers._group_actions[0].choices
        command = next((a for a in argv if a in subparsers), None)
        if command is None:
            raise UsageError("islandseg: a subcommand is required")
        sub = subparsers[command]
        dests = {a.dest for a in sub._actions}
        unknown = sorted(set(cfg) - dests)
        if unknown:
            raise UsageError(f"unknown config key(s) for {command}: {', '.join(unknown)}")
        for action in sub._actions:
            if action.dest in cfg:
                action.required = False
        for group in sub._mutually_exclusive_groups:
            if any(a.dest in cfg and cfg[a.dest] is not None for a in group._group_actions):
                group.required = False
        sub.set_defaults(**cfg)
    return parser.parse_args(argv)


def _provenance(args, out: Path, **extra) -> None:
    out.mkdir(parents=True, exist_ok=True)
    record = {
        "command": args.command,
        "argv": sys.argv[1:],
        "args": {k: v for k, v in vars(args).items() if k not in ("command", "config")},
        "seed": args.seed,
        "versions": sweep.versions(),
        "timestamp": datetime.now(timezone.utc).isoformat(),
        **extra,
    }
    (out / f"provenance_{args.command}.json").write_text(json.dumps(record, indent=1, default=str))


def _encoder_config(args) -> EncoderConfig:
    return EncoderConfig(image_size=args.image_size, patch_size=args.patch_size, embed_dim=args.embed_dim,
                         depth=args.depth, num_heads=args.num_heads, mlp_ratio=args.mlp_ratio,
                         tap_layers=args.tap_layers)


def _load_encoder(args) -> ViTEncoder:
    if args.encoder_checkpoint:
        return checkpoint.load_encoder(args.encoder_checkpoint)
    torch.manual_seed(args.seed)
    return ViTEncoder(_encoder_config(args))


# ---------------------------------------------------------------------------
# subcommands


def cmd_synth(args) -> None:
    out = Path(args.out)
    manifest = synthgen.generate_dataset(args.n, args.size, args.seed, out, args.noise_std)
    _provenance(args, out, split_counts=manifest.counts())
    log.info("manifest %s: %s", manifest.path, manifest.counts())


def cmd_ingest(args) -> None:
    out = Path(args.out)
    manifest = scene_io.load_manifest(args.manifest)
    loaded = {tag: scene_io.load_split(manifest, tag, args.size) for tag in scene_io.SPLITS}
    stats = scene_io.compute_normalization(loaded["train"][0])
    out.mkdir(parents=True, exist_ok=True)
    (out / "stats.json").write_text(json.dumps(stats.to_dict(), indent=1))
    summary = {"manifest": str(manifest.path), "size": args.size, "split_counts": manifest.counts(),
               "land_fraction": {t: float(np.mean([m.classes.mean() for m in loaded[t][1]])) if loaded[t][1] else None
                                 for t in scene_io.SPLITS}}
    if args.convert:
        entries = []
        for tag, (scenes, masks) in loaded.items():
            for s, m in zip(scenes, masks):
                sp, mp = out / "scenes" / f"{s.scene_id}.msr", out / "masks" / f"{s.scene_id}.msr"
                sp.parent.mkdir(exist_ok=True)
                mp.parent.mkdir(exist_ok=True)
                scene_io.write_msr(sp, s.bands)
                scene_io.write_msr(mp, m.classes.astype(np.float32))
                entries.append(scene_io.ManifestEntry(s.scene_id, sp, mp, tag))
        summary["converted_manifest"] = str(scene_io.write_manifest(entries, out / "manifest.json"))
    (out / "ingest.json").write_text(json.dumps(summary, indent=1))
    _provenance(args, out)


def cmd_pretrain(args) -> None:
    out = Path(args.out)
    cfg = _encoder_config(args)
    manifest = scene_io.load_manifest(args.manifest)
    splits, stats = scene_io.prepare_dataset(manifest, cfg.image_size)
    if not len(splits["train"]):
        raise DataError("manifest has no train scenes to pretrain on")
    encoder = _load_encoder(args)
    mae = MaeConfig(args.mask_ratio, args.decoder_dim, args.decoder_depth)
    losses = pretrain(encoder, splits["train"].images, mae, steps=args.steps, batch_size=args.mae_batch_size,
                      lr=args.mae_lr, seed=args.seed, logger=log)
    out.mkdir(parents=True, exist_ok=True)
    checkpoint.save_encoder(encoder, out / "encoder.pt", extra={"mae": vars(mae), "norm_stats": stats.to_dict()})
    (out / "losses.json").write_text(json.dumps(losses))
    _provenance(args, out, first_loss=losses[0], last_loss=losses[-1])


def cmd_finetune(args) -> None:
    out = Path(args.out)
    manifest = scene_io.load_manifest(args.manifest)
    manifest.require_splits(("train", "val"))
    encoder = _load_encoder(args)
    cfg = encoder.config
    splits, stats = scene_io.prepare_dataset(manifest, cfg.image_size)
    train = splits["train"]
    if args.train_size is not None:
        train = train.subset(scene_io.sample_training_subset(train.ids, args.train_size, args.seed))
    torch.manual_seed(args.seed)
    model = SegmentationModel(encoder, UNetDecoder(cfg, DecoderConfig(args.channel_widths, args.head_dropout)))
    tc = trainer.TrainConfig(max_epochs=args.max_epochs, batch_size=args.batch_size,
                             learning_rate=args.learning_rate, beta1=args.beta1, beta2=args.beta2, eps=args.eps,
                             weight_decay=args.weight_decay, precision=args.precision, seed=args.seed,
                             freeze_encoder=args.freeze_encoder, selection_scheme=args.selection_scheme,
                             keep_checkpoints=args.keep_checkpoints)
    result = trainer.fit(model, train, splits["val"], tc, out, splits["test"] if len(splits["test"]) else None,
                         stats)
    _provenance(args, out, train_ids=train.ids, best_epoch=result.best_epoch,
                test_metrics=result.test_metrics)


def _resolve_checkpoint(value: str, out: Path) -> Path:
    if value == "best":
        return trainer.checkpoint_dir(out) / "best.pt"
    return Path(value)


def cmd_evaluate(args) -> None:
    out = Path(args.out)
    path = _resolve_checkpoint(args.checkpoint, out)
    if not path.is_file():
        raise DataError(f"checkpoint not found: {path}")
    model, stats, _ = checkpoint.load_model(path)
    manifest = scene_io.load_manifest(args.manifest)
    manifest.require_splits((args.split,))
    scenes, masks = scene_io.load_split(manifest, args.split, model.encoder.config.image_size)
    if stats is None:
        raise DataError(f"{path} carries no normalization stats")
    data = scene_io.stack(scenes, masks, stats)
    metrics = trainer.evaluate(model, data, args.batch_size)
    out.mkdir(parents=True, exist_ok=True)
    (out / f"eval_{args.split}.json").write_text(json.dumps({"checkpoint": str(path), "split": args.split,
                                                             "metrics": metrics}, indent=1))
    if args.save_masks:
        preds = trainer.predict_stack(model, data, args.batch_size)
        (out / "masks").mkdir(exist_ok=True)
        for sid, p in zip(data.ids, preds):
            scene_io.write_msr(out / "masks" / f"{sid}.msr", p.astype(np.float32))
    _provenance(args, out, metrics={k: {"iou": v["iou"], "f1": v["f1"]} for k, v in metrics.items()})
    for k, v in metrics.items():
        log.info("%s: iou %.4f f1 %.4f", k, v["iou"], v["f1"])


def cmd_sweep(args) -> None:
    plan = sweep.SweepPlan.load(args.plan)
    plan.out_dir = args.out
    if args.jobs:
        plan.jobs = args.jobs
    result = sweep.run_sweep(plan)
    sweep.emit_report(result, Path(args.out))
    _provenance(args, Path(args.out), partial=result.partial)
    sys.stderr.write(sweep.format_table(result))
    if result.partial:
        raise trainer.TrainingError("sweep finished with failed cells; see results.json")


def cmd_extract(args) -> None:
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    geo = None
    if args.mask:
        mask = scene_io.load_mask(args.mask)
        sid = mask.scene_id
        _, geo = scene_io.read_raster(args.mask)
    else:
        if not args.checkpoint:
            raise UsageError("--scene needs --checkpoint")
        model, stats, _ = checkpoint.load_model(args.checkpoint)
        scene = scene_io.load_scene(args.scene, resolution_m=args.resolution)
        geo = scene.geo
        size = model.encoder.config.image_size
        dummy = scene_io.LabelMask(scene.scene_id, np.zeros(scene.shape, np.uint8))
        if scene.shape != (size, size):
            log.warning("resizing %s from %s to %dx%d for the model", scene.scene_id, scene.shape, size, size)
            scene, _ = scene_io.resize_pair(scene, dummy, (size, size))
        x = torch.as_tensor(stats.apply(scene.bands))[None]
        model.eval()
        with torch.no_grad():
            mask = predict_mask(model(x)[0].numpy(), scene.scene_id)
        sid = scene.scene_id
        scene_io.write_msr(out / f"{sid}_mask.msr", mask.classes.astype(np.float32))
    polylines = shoreline.extract_shorelines(mask, args.tolerance)
    shoreline.write_shorelines(polylines, out / f"{sid}_shorelines.json", sid, args.resolution, geo)
    _provenance(args, out, n_polylines=len(polylines))
    log.info("%s: %d polyline(s)", sid, len(polylines))


def cmd_report(args) -> None:
    result = sweep.SweepResult.load(args.results)
    files = sweep.emit_report(result, Path(args.out))
    _provenance(args, Path(args.out), files={k: str(v) for k, v in files.items()})


COMMANDS = {
    "synth": cmd_synth, "ingest": cmd_ingest, "pretrain": cmd_pretrain, "finetune": cmd_finetune,
    "evaluate": cmd_evaluate, "sweep": cmd_sweep, "extract": cmd_extract, "report": cmd_report,
}


def main(argv=None) -> int:
    argv = sys.argv[1:] if argv is None else list(argv)
    try:
        args = parse_args(argv)
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    except (UsageError, DataError, json.JSONDecodeError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO, stream=sys.stderr,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        COMMANDS[args.command](args)
    except (UsageError, DataError, FileNotFoundError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 1
    except Exception as exc:
        log.exception("runtime failure")
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 2
    return 0
