"""Fine-tuning loop: frozen encoder, cross-entropy, AdamW, per-epoch checkpoints,
best-validation-IoU selection."""

from __future__ import annotations

import contextlib
import json
import logging
import math
import os
import time
from dataclasses import asdict, dataclass, field
from pathlib import Path

import numpy as np
import torch
import torch.nn.functional as F

from . import checkpoint
from .decoder import SegmentationModel, predict_classes
from .encoder import freeze, parameter_checksum
from .metrics import DEFAULT_SCHEME, aggregate, all_schemes, confusion
from .scene_io import NormalizationStats, SceneStack

log = logging.getLogger(__name__)

PRECISIONS = ("float32", "bfloat16")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    max_epochs: int = 30
    batch_size: int = 4
    learning_rate: float = 1e-4
    beta1: float = 0.9
    beta2: float = 0.999
    eps: float = 1e-8
    weight_decay: float = 0.01
    precision: str = "float32"
    seed: int = 0
    freeze_encoder: bool = True
    selection_scheme: str = DEFAULT_SCHEME
    keep_checkpoints: str = "all"  # "all" or "best"

    def __post_init__(self):
        if self.max_epochs < 1:
            raise ValueError("max_epochs must be >= 1")
        if self.batch_size < 1:
            raise ValueError("batch_size must be >= 1")
        if not self.learning_rate > 0:
            raise ValueError("learning_rate must be > 0")
        if self.precision not in PRECISIONS:
            raise ValueError(f"precision must be one of {PRECISIONS}, got {self.precision!r}")
        if self.keep_checkpoints not in ("all", "best"):
            raise ValueError("keep_checkpoints must be 'all' or 'best'")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class EpochRecord:
    epoch: int
    train_loss: float
    val_iou: float
    val_f1: float
    wall_time_s: float
    checkpoint_path: str | None = None

    def log_fields(self) -> dict:
        """Fields that are deterministic for a fixed seed (no timing, no paths)."""
        return {"epoch": self.epoch, "train_loss": self.train_loss, "val_iou": self.val_iou, "val_f1": self.val_f1}


@dataclass
class TrainRunResult:
    epochs: list[EpochRecord]
    best_epoch: int
    best_checkpoint_path: str | None
    test_metrics: dict = field(default_factory=dict)
    final_test_metrics: dict = field(default_factory=dict)
    encoder_checksum_before: str = ""
    encoder_checksum_after: str = ""
    decoder_checksum_init: str = ""
    decoder_checksum_final: str = ""
    config: dict = field(default_factory=dict)

    def to_dict(self) -> dict:
        return asdict(self)

    @classmethod
    def from_dict(cls, d: dict) -> TrainRunResult:
        d = dict(d)
        d["epochs"] = [EpochRecord(**e) for e in d["epochs"]]
        return cls(**d)

    def test_score(self, scheme: str = DEFAULT_SCHEME) -> tuple[float, float]:
        m = self.test_metrics[scheme]
        return m["iou"], m["f1"]


# ---------------------------------------------------------------------------
# loss, optimiser reference, selection


def cross_entropy_loss(logit_map, mask) -> float:
    """Mean over pixels of -log softmax(logits)[true class], in float64."""
    logits = np.asarray(getattr(logit_map, "logits", logit_map), dtype=np.float64)
    labels = np.asarray(getattr(mask, "classes", mask)).astype(np.int64)
    if logits.shape[1:] != labels.shape:
        raise ValueError(f"logits {logits.shape} do not align with mask {labels.shape}")
    m = logits.max(axis=0)
    lse = m + np.log(np.exp(logits - m).sum(axis=0))
    picked = np.take_along_axis(logits, labels[None], axis=0)[0]
    return float((lse - picked).mean())


def adamw_step(params, grads, state: dict, config: TrainConfig):
    """Reference AdamW update on numpy arrays.

    ``state`` holds ``step``, ``m`` and ``v`` (start from ``{}``). Weight
    decay is decoupled and applied multiplicatively before the adaptive step.
    Returns ``(new_params, new_state)``.
    """
    p = np.asarray(params, dtype=np.float64)
    g = np.asarray(grads, dtype=np.float64)
    if p.shape != g.shape:
        raise ValueError(f"param shape {p.shape} != grad shape {g.shape}")
    if not np.all(np.isfinite(g)):
        raise FloatingPointError("non-finite gradient")
    t = state.get("step", 0) + 1
    m = state.get("m", np.zeros_like(p))
    v = state.get("v", np.zeros_like(p))
    lr, b1, b2 = config.learning_rate, config.beta1, config.beta2

    p = p * (1 - lr * config.weight_decay)
    m = b1 * m + (1 - b1) * g
    v = b2 * v + (1 - b2) * g * g
    m_hat = m / (1 - b1 ** t)
    v_hat = v / (1 - b2 ** t)
    p = p - lr * m_hat / (np.sqrt(v_hat) + config.eps)
    return p, {"step": t, "m": m, "v": v}


def select_best(val_ious) -> int:
    """1-based epoch of the highest validation IoU; earliest wins ties."""
    vals = list(val_ious)
    if not vals:
        raise ValueError("no validation scores")
    return int(np.argmax(vals)) + 1


# ---------------------------------------------------------------------------
# evaluation


def _autocast(precision: str):
    if precision == "bfloat16":
        return torch.autocast("cpu", dtype=torch.bfloat16)
    return contextlib.nullcontext()


@torch.no_grad()
def encode_stack(encoder, images: np.ndarray, batch_size: int = 8, precision: str = "float32") -> list[torch.Tensor]:
    """Run the encoder over all images once; returns four (N, T, D) float32 tap tensors."""
    encoder.eval()
    outs: list[list[torch.Tensor]] = [[] for _ in range(4)]
    x = torch.as_tensor(images)
    for i in range(0, len(x), batch_size):
        with _autocast(precision):
            feats = encoder(x[i:i + batch_size])
        for k, f in enumerate(feats):
            outs[k].append(f.float())
    return [torch.cat(o) for o in outs]


@torch.no_grad()
def predict_stack(model: SegmentationModel, data: SceneStack, batch_size: int = 8,
                  precision: str = "float32", taps: list[torch.Tensor] | None = None) -> np.ndarray:
    """Predicted (N, H, W) class maps, inference mode."""
    model.eval()
    if taps is None:
        taps = encode_stack(model.encoder, data.images, batch_size, precision)
    preds = []
    for i in range(0, len(data), batch_size):
        with _autocast(precision):
            logits = model.decoder([t[i:i + batch_size] for t in taps])
        preds.append(predict_classes(logits.float()).numpy())
    return np.concatenate(preds) if preds else np.zeros((0,) + data.masks.shape[1:], np.uint8)


def evaluate(model: SegmentationModel, data: SceneStack, batch_size: int = 8, precision: str = "float32",
             taps=None) -> dict:
    """Metrics under every aggregation scheme, as plain dicts."""
    preds = predict_stack(model, data, batch_size, precision, taps)
    counts = [confusion(p, g) for p, g in zip(preds, data.masks)]
    return {k: r.to_dict() for k, r in all_schemes(counts, data.ids).items()}


# ---------------------------------------------------------------------------
# fit


def checkpoint_dir(out_dir: Path) -> Path:
    cache = os.environ.get("ISLANDSEG_CACHE")
    if cache:
        return Path(cache) / Path(out_dir).resolve().name / "checkpoints"
    return Path(out_dir) / "checkpoints"


def fit(model: SegmentationModel, train: SceneStack, val: SceneStack, config: TrainConfig,
        out_dir: str | Path, test: SceneStack | None = None,
        norm_stats: NormalizationStats | None = None) -> TrainRunResult:
    """Fine-tune ``model.decoder`` (and the encoder only if not frozen).

    Writes ``metrics.jsonl`` (one line per epoch), per-epoch checkpoints,
    ``best.pt`` and ``result.json`` under ``out_dir``.
    """
    if len(train) == 0 or len(val) == 0:
        raise TrainingError(f"empty split: {len(train)} train / {len(val)} val scenes")
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    ckpt_dir = checkpoint_dir(out_dir)
    ckpt_dir.mkdir(parents=True, exist_ok=True)
    log_path = out_dir / "metrics.jsonl"
    log_path.write_text("")

    torch.manual_seed(config.seed)
    encoder, decoder = model.encoder, model.decoder
    if config.freeze_encoder:
        freeze(encoder)
        params = list(decoder.parameters())
    else:
        for p in encoder.parameters():
            p.requires_grad_(True)
        params = list(model.parameters())
    enc_before = parameter_checksum(encoder)
    dec_init = parameter_checksum(decoder)

    opt = torch.optim.AdamW(params, lr=config.learning_rate, betas=(config.beta1, config.beta2),
                            eps=config.eps, weight_decay=config.weight_decay)
    gen = torch.Generator().manual_seed(config.seed)

    # frozen encoder in inference mode is a fixed function: encode each split once
    cached = {}
    if config.freeze_encoder:
        cached["train"] = encode_stack(encoder, train.images, config.batch_size, config.precision)
        cached["val"] = encode_stack(encoder, val.images, config.batch_size, config.precision)
        if test is not None and len(test):
            cached["test"] = encode_stack(encoder, test.images, config.batch_size, config.precision)

    images = torch.as_tensor(train.images)
    labels = torch.as_tensor(train.masks.astype(np.int64))
    records: list[EpochRecord] = []
    best_path = ckpt_dir / "best.pt"
    best_iou = -math.inf

    for epoch in range(1, config.max_epochs + 1):
        t0 = time.perf_counter()
        model.train()
        if config.freeze_encoder:
            encoder.eval()
        order = torch.randperm(len(train), generator=gen)
        total, seen = 0.0, 0
        for step, start in enumerate(range(0, len(train), config.batch_size), start=1):
            idx = order[start:start + config.batch_size]
            with _autocast(config.precision):
                if config.freeze_encoder:
                    logits = decoder([t[idx] for t in cached["train"]])
                else:
                    logits = model(images[idx])
            loss = F.cross_entropy(logits.float(), labels[idx])
            if not torch.isfinite(loss):
                raise TrainingError(f"non-finite loss {loss.item()} at epoch {epoch}, step {step}")
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            total += loss.item() * len(idx)
            seen += len(idx)

        val_counts = [confusion(p, g) for p, g in zip(
            predict_stack(model, val, config.batch_size, config.precision, cached.get("val")), val.masks)]
        val_report = aggregate(val_counts, config.selection_scheme, val.ids)
        path = checkpoint.save_model(model, ckpt_dir / f"epoch_{epoch:03d}.pt", norm_stats,
                                     extra={"epoch": epoch, "val_iou": val_report.iou})
        rec = EpochRecord(epoch, total / seen, val_report.iou, val_report.f1,
                          time.perf_counter() - t0, str(path))
        records.append(rec)
        with log_path.open("a") as f:
            f.write(json.dumps({"epoch": rec.epoch, "loss": rec.train_loss, "val_iou": rec.val_iou,
                                "val_f1": rec.val_f1, "time": rec.wall_time_s}) + "\n")
        log.info("epoch %d/%d loss %.4f val_iou %.4f val_f1 %.4f (%.1fs)", epoch, config.max_epochs,
                 rec.train_loss, rec.val_iou, rec.val_f1, rec.wall_time_s)

        if rec.val_iou > best_iou:
            best_iou = rec.val_iou
            checkpoint.atomic_copy(path, best_path)
        if config.keep_checkpoints == "best":
            path.unlink()
            rec.checkpoint_path = None

    best_epoch = select_best(r.val_iou for r in records)
    enc_after = parameter_checksum(encoder)
    if config.freeze_encoder and enc_after != enc_before:
        raise TrainingError("encoder parameters changed while frozen")
    dec_final = parameter_checksum(decoder)

    final_test, best_test = {}, {}
    if test is not None and len(test):
        final_test = evaluate(model, test, config.batch_size, config.precision, cached.get("test"))
        best_model, _, _ = checkpoint.load_model(best_path)
        decoder.load_state_dict(best_model.decoder.state_dict())
        if not config.freeze_encoder:
            encoder.load_state_dict(best_model.encoder.state_dict())
        best_test = evaluate(model, test, config.batch_size, config.precision, cached.get("test"))

    result = TrainRunResult(records, best_epoch, str(best_path), best_test, final_test,
                            enc_before, enc_after, dec_init, dec_final, config.to_dict())
    (out_dir / "result.json").write_text(json.dumps(result.to_dict(), indent=1))
    return result
