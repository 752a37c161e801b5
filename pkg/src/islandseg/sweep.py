"""Training-set-size ablation: a fresh model per (size, variant) cell, fixed val/test splits."""

from __future__ import annotations

import csv
import hashlib
import json
import logging
import multiprocessing
import platform
import time
import traceback
from concurrent.futures import ProcessPoolExecutor
from dataclasses import asdict, dataclass, field
from datetime import datetime, timezone
from pathlib import Path

import numpy as np
import torch

from . import checkpoint, plotting
from .decoder import DecoderConfig, SegmentationModel, UNetDecoder
from .encoder import EncoderConfig, ViTEncoder
from .metrics import DEFAULT_SCHEME, SCHEMES
from .scene_io import load_manifest, prepare_dataset, sample_training_subset
from .trainer import TrainConfig, fit

log = logging.getLogger(__name__)

DEFAULT_SIZES = [5, 10, 25, 50, 75, 100, 125, 150, "full"]


@dataclass
class ModelVariant:
    name: str
    encoder: EncoderConfig
    decoder: DecoderConfig = field(default_factory=DecoderConfig)
    encoder_checkpoint: str | None = None

    def to_dict(self) -> dict:
        return {"name": self.name, "encoder": self.encoder.to_dict(), "decoder": self.decoder.to_dict(),
                "encoder_checkpoint": self.encoder_checkpoint}

    @classmethod
    def from_dict(cls, d: dict) -> ModelVariant:
        enc = d.get("encoder", {})
        if d.get("encoder_checkpoint") and not enc:
            enc = checkpoint.read(d["encoder_checkpoint"])["encoder_config"]
        return cls(d["name"], EncoderConfig(**enc), DecoderConfig(**d.get("decoder", {})),
                   d.get("encoder_checkpoint"))


@dataclass
class SweepPlan:
    manifest: str
    variants: list[ModelVariant]
    sizes: list = field(default_factory=lambda: list(DEFAULT_SIZES))
    train: TrainConfig = field(default_factory=TrainConfig)
    seed: int = 0
    out_dir: str = "sweep"
    jobs: int = 1

    def to_dict(self) -> dict:
        return {"manifest": str(self.manifest), "variants": [v.to_dict() for v in self.variants],
                "sizes": list(self.sizes), "train": self.train.to_dict(), "seed": self.seed,
                "out_dir": str(self.out_dir), "jobs": self.jobs}

    @classmethod
    def from_dict(cls, d: dict, base: Path | None = None) -> SweepPlan:
        base = base or Path(".")

        def rel(p):
            return str(p if p is None or Path(p).is_absolute() else base / p)

        variants = []
        for v in d["variants"]:
            v = dict(v)
            if v.get("encoder_checkpoint"):
                v["encoder_checkpoint"] = rel(v["encoder_checkpoint"])
            variants.append(ModelVariant.from_dict(v))
        return cls(manifest=rel(d["manifest"]), variants=variants, sizes=list(d.get("sizes", DEFAULT_SIZES)),
                   train=TrainConfig(**d.get("train", {})), seed=int(d.get("seed", 0)),
                   out_dir=rel(d.get("out_dir", "sweep")), jobs=int(d.get("jobs", 1)))

    @classmethod
    def load(cls, path) -> SweepPlan:
        path = Path(path)
        return cls.from_dict(json.loads(path.read_text()), path.parent)


@dataclass
class CellResult:
    size: int
    variant: str
    status: str  # "ok" | "failed"
    test_iou: float | None = None
    test_f1: float | None = None
    test_metrics: dict = field(default_factory=dict)
    final_test_metrics: dict = field(default_factory=dict)
    val_ious: list[float] = field(default_factory=list)
    best_epoch: int | None = None
    train_ids: list[str] = field(default_factory=list)
    test_ids: list[str] = field(default_factory=list)
    cell_seed: int = 0
    run_dir: str = ""
    encoder_checksum: str = ""
    decoder_checksum_init: str = ""
    decoder_checksum_final: str = ""
    error: str | None = None


@dataclass
class SweepResult:
    rows: dict[int, dict[str, CellResult]]
    provenance: dict = field(default_factory=dict)

    @property
    def sizes(self) -> list[int]:
        return sorted(self.rows)

    @property
    def variants(self) -> list[str]:
        seen = []
        for size in self.sizes:
            for v in self.rows[size]:
                if v not in seen:
                    seen.append(v)
        return seen

    @property
    def partial(self) -> bool:
        return any(c.status != "ok" for row in self.rows.values() for c in row.values())

    def cells(self):
        for size in self.sizes:
            yield from self.rows[size].values()

    def to_dict(self) -> dict:
        return {"rows": {str(s): {v: asdict(c) for v, c in row.items()} for s, row in self.rows.items()},
                "provenance": self.provenance}

    @classmethod
    def from_dict(cls, d: dict) -> SweepResult:
        rows = {int(s): {v: CellResult(**c) for v, c in row.items()} for s, row in d["rows"].items()}
        return cls(rows, d.get("provenance", {}))

    def save(self, path) -> Path:
        path = Path(path)
        path.write_text(json.dumps(self.to_dict(), indent=1))
        return path

    @classmethod
    def load(cls, path) -> SweepResult:
        return cls.from_dict(json.loads(Path(path).read_text()))


def cell_seed(seed: int, size: int, variant: str) -> int:
    digest = hashlib.sha256(f"{seed}:{size}:{variant}".encode()).digest()
    return int.from_bytes(digest[:4], "little")


def resolve_sizes(sizes, n_train: int) -> list[int]:
    out = [n_train if s == "full" else int(s) for s in sizes]
    if not out:
        raise ValueError("sweep needs at least one size")
    if any(b <= a for a, b in zip(out, out[1:])):
        raise ValueError(f"sizes must be strictly ascending, got {out}")
    if out[0] < 1 or out[-1] > n_train:
        raise ValueError(f"sizes must lie in 1..{n_train} (train split size), got {out}")
    return out


def build_model(variant: ModelVariant, encoder_seed: int, decoder_seed: int) -> SegmentationModel:
    if variant.encoder_checkpoint:
        encoder = checkpoint.load_encoder(variant.encoder_checkpoint)
    else:
        torch.manual_seed(encoder_seed)
        encoder = ViTEncoder(variant.encoder)
    torch.manual_seed(decoder_seed)
    return SegmentationModel(encoder, UNetDecoder(encoder.config, variant.decoder))


def run_cell(plan: SweepPlan, size: int, variant: ModelVariant, data=None) -> CellResult:
    seed = cell_seed(plan.seed, size, variant.name)
    run_dir = Path(plan.out_dir) / "runs" / f"{variant.name}_n{size:03d}"
    cell = CellResult(size, variant.name, "failed", cell_seed=seed, run_dir=str(run_dir))
    try:
        if data is None:
            data = prepare_dataset(load_manifest(plan.manifest), variant.encoder.image_size)
        splits, stats = data
        cell.train_ids = sample_training_subset(splits["train"].ids, size, plan.seed)
        cell.test_ids = list(splits["test"].ids)
        model = build_model(variant, plan.seed, seed)
        cfg = TrainConfig(**{**plan.train.to_dict(), "seed": seed})
        result = fit(model, splits["train"].subset(cell.train_ids), splits["val"], cfg, run_dir,
                     splits["test"], stats)
        cell.status = "ok"
        cell.test_iou, cell.test_f1 = result.test_score(DEFAULT_SCHEME)
        cell.test_metrics = result.test_metrics
        cell.final_test_metrics = result.final_test_metrics
        cell.val_ious = [r.val_iou for r in result.epochs]
        cell.best_epoch = result.best_epoch
        cell.encoder_checksum = result.encoder_checksum_after
        cell.decoder_checksum_init = result.decoder_checksum_init
        cell.decoder_checksum_final = result.decoder_checksum_final
    except Exception as exc:  # one failed cell must not sink the sweep
        cell.error = f"{type(exc).__name__}: {exc}"
        log.error("cell size=%d variant=%s failed: %s\n%s", size, variant.name, exc, traceback.format_exc())
    return cell


def _cell_worker(plan_dict: dict, size: int, variant_index: int) -> dict:
    torch.set_num_threads(1)
    plan = SweepPlan.from_dict(plan_dict)
    return asdict(run_cell(plan, size, plan.variants[variant_index]))


def run_sweep(plan: SweepPlan) -> SweepResult:
    if not plan.variants:
        raise ValueError("sweep needs at least one model variant")
    started = datetime.now(timezone.utc).isoformat()
    manifest = load_manifest(plan.manifest)
    manifest.require_splits()
    sizes = resolve_sizes(plan.sizes, len(manifest.split("train")))
    out = Path(plan.out_dir)
    out.mkdir(parents=True, exist_ok=True)

    rows: dict[int, dict[str, CellResult]] = {s: {} for s in sizes}
    todo = [(s, i) for s in sizes for i in range(len(plan.variants))]
    t0 = time.perf_counter()
    if plan.jobs > 1:
        ctx = multiprocessing.get_context("spawn")
        with ProcessPoolExecutor(plan.jobs, mp_context=ctx) as pool:
            futures = {(s, i): pool.submit(_cell_worker, plan.to_dict(), s, i) for s, i in todo}
            for (s, i), fut in futures.items():
                rows[s][plan.variants[i].name] = CellResult(**fut.result())
    else:
        cache = {}
        for s, i in todo:
            v = plan.variants[i]
            if v.encoder.image_size not in cache:
                cache[v.encoder.image_size] = prepare_dataset(manifest, v.encoder.image_size)
            log.info("cell size=%d variant=%s", s, v.name)
            rows[s][v.name] = run_cell(plan, s, v, cache[v.encoder.image_size])

    result = SweepResult(rows)
    trained = {c.decoder_checksum_final for c in result.cells() if c.status == "ok"}
    leaked = [f"{c.variant}/n{c.size}" for c in result.cells() if c.decoder_checksum_init in trained]
    result.provenance = {
        "seed": plan.seed,
        "plan": plan.to_dict(),
        "sizes": sizes,
        "selection": "best validation checkpoint, scored on test",
        "started": started,
        "finished": datetime.now(timezone.utc).isoformat(),
        "elapsed_s": time.perf_counter() - t0,
        "partial": result.partial,
        "weight_leakage": leaked,
        "versions": versions(),
    }
    return result


def versions() -> dict:
    from . import __version__

    return {"islandseg": __version__, "python": platform.python_version(), "torch": torch.__version__,
            "numpy": np.__version__}


# ---------------------------------------------------------------------------
# report


def format_table(result: SweepResult, scheme: str = DEFAULT_SCHEME) -> str:
    """Aligned table laid out like the results table: size rows, IoU and F1 column groups."""
    variants = result.variants
    score = {}
    for c in result.cells():
        m = c.test_metrics.get(scheme) if c.status == "ok" else None
        score[(c.size, c.variant)] = (m["iou"], m["f1"]) if m else (None, None)
    best = {}
    for k, metric in enumerate(("iou", "f1")):
        for v in variants:
            vals = [score[(s, v)][k] for s in result.sizes if score.get((s, v), (None, None))[k] is not None]
            best[(metric, v)] = max(vals) if vals else None

    w = max(10, *(len(v) + 2 for v in variants))
    first = 24

    def cell(val, metric, v):
        if val is None:
            return "failed".center(w)
        mark = "*" if val == best[(metric, v)] else " "
        return f"{val:.4f}{mark}".center(w)

    group = w * len(variants)
    lines = [
        f"Test scores ({scheme}); * marks the best size per column",
        f"{'Training Dataset Size':<{first}}|{'IoU'.center(group)}|{'F1'.center(group)}",
        f"{'':<{first}}|{''.join(v.center(w) for v in variants)}|{''.join(v.center(w) for v in variants)}",
        "-" * (first + 2 * group + 2),
    ]
    for s in result.sizes:
        iou_cells = "".join(cell(score.get((s, v), (None, None))[0], "iou", v) for v in variants)
        f1_cells = "".join(cell(score.get((s, v), (None, None))[1], "f1", v) for v in variants)
        lines.append(f"{f'{s} images':<{first}}|{iou_cells}|{f1_cells}")
    if result.partial:
        lines.append("PARTIAL: one or more cells failed")
    return "\n".join(lines) + "\n"


def emit_report(result: SweepResult, out_dir) -> dict[str, Path]:
    """Write table.txt, results.csv, results.json and the figures; returns their paths."""
    if not result.rows:
        raise ValueError("empty sweep result")
    out = Path(out_dir)
    try:
        out.mkdir(parents=True, exist_ok=True)
    except OSError as exc:
        raise OSError(f"cannot write report to {out}: {exc}") from exc

    files = {}
    schemes = [DEFAULT_SCHEME] + [s for s in SCHEMES if s != DEFAULT_SCHEME]
    files["table"] = out / "table.txt"
    files["table"].write_text("\n".join(format_table(result, s) for s in schemes))
    files["results"] = result.save(out / "results.json")

    files["csv"] = out / "results.csv"
    with files["csv"].open("w", newline="") as f:
        writer = csv.writer(f)
        writer.writerow(["size", "variant", "status", "scheme", "test_iou", "test_f1", "best_epoch",
                         "final_epoch_test_iou", "final_epoch_test_f1"])
        for c in result.cells():
            for s in schemes:
                m = c.test_metrics.get(s, {})
                fm = c.final_test_metrics.get(s, {})
                writer.writerow([c.size, c.variant, c.status, s, m.get("iou", ""), m.get("f1", ""),
                                 c.best_epoch or "", fm.get("iou", ""), fm.get("f1", "")])

    for metric, key in (("F1", "f1"), ("IoU", "iou")):
        series = {v: [(c.size, c.test_metrics[DEFAULT_SCHEME][key]) for c in result.cells()
                      if c.variant == v and c.status == "ok"] for v in result.variants}
        files[f"{key}_vs_size"] = plotting.score_vs_size(series, metric, out / f"{key}_vs_size.png")
    for v in result.variants:
        curves = {c.size: c.val_ious for c in result.cells() if c.variant == v and c.val_ious}
        best = {c.size: c.best_epoch for c in result.cells() if c.variant == v and c.best_epoch}
        files[f"epochs_{v}"] = plotting.iou_vs_epoch(curves, v, out / f"iou_vs_epoch_{v}.png", best)
    return files
