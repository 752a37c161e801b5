"""Checkpoint container: config records, named tensors and parameter checksums.

A checkpoint is a ``torch.save`` dict with keys ``format``, ``encoder_config``,
``encoder_state``, ``encoder_checksum`` and, for fine-tuned models,
``decoder_config``, ``decoder_state``, ``decoder_checksum``, ``norm_stats``.
Writes go to a temporary file that is renamed into place.
"""

from __future__ import annotations

import os
import shutil
from pathlib import Path

import torch

from .decoder import DecoderConfig, SegmentationModel, UNetDecoder
from .encoder import EncoderConfig, ViTEncoder, parameter_checksum
from .scene_io import NormalizationStats

FORMAT = "islandseg-checkpoint/1"


def _atomic_save(obj, path: Path) -> Path:
    path = Path(path)
    path.parent.mkdir(parents=True, exist_ok=True)
    tmp = path.with_name(f".{path.name}.tmp{os.getpid()}")
    torch.save(obj, tmp)
    os.replace(tmp, path)
    return path


def atomic_copy(src: Path, dst: Path) -> Path:
    dst = Path(dst)
    tmp = dst.with_name(f".{dst.name}.tmp{os.getpid()}")
    shutil.copyfile(src, tmp)
    os.replace(tmp, dst)
    return dst


def save_encoder(encoder: ViTEncoder, path, extra: dict | None = None) -> Path:
    return _atomic_save({
        "format": FORMAT,
        "encoder_config": encoder.config.to_dict(),
        "encoder_state": encoder.state_dict(),
        "encoder_checksum": parameter_checksum(encoder),
        "extra": extra or {},
    }, path)


def save_model(model: SegmentationModel, path, norm_stats: NormalizationStats | None = None,
               extra: dict | None = None) -> Path:
    return _atomic_save({
        "format": FORMAT,
        "encoder_config": model.encoder.config.to_dict(),
        "encoder_state": model.encoder.state_dict(),
        "encoder_checksum": parameter_checksum(model.encoder),
        "decoder_config": model.decoder.config.to_dict(),
        "decoder_state": model.decoder.state_dict(),
        "decoder_checksum": parameter_checksum(model.decoder),
        "norm_stats": norm_stats.to_dict() if norm_stats else None,
        "extra": extra or {},
    }, path)


def read(path) -> dict:
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"checkpoint not found: {path}")
    ckpt = torch.load(path, map_location="cpu", weights_only=False)
    if not isinstance(ckpt, dict) or ckpt.get("format") != FORMAT:
        raise ValueError(f"{path} is not an {FORMAT} container")
    return ckpt


def load_encoder(path) -> ViTEncoder:
    ckpt = read(path)
    enc = ViTEncoder(EncoderConfig(**ckpt["encoder_config"]))
    enc.load_state_dict(ckpt["encoder_state"])
    if parameter_checksum(enc) != ckpt["encoder_checksum"]:
        raise ValueError(f"{path}: encoder checksum mismatch")
    return enc


def load_model(path) -> tuple[SegmentationModel, NormalizationStats | None, dict]:
    ckpt = read(path)
    if ckpt.get("decoder_state") is None:
        raise ValueError(f"{path} holds an encoder only; fine-tune it first")
    enc_cfg = EncoderConfig(**ckpt["encoder_config"])
    model = SegmentationModel(ViTEncoder(enc_cfg), UNetDecoder(enc_cfg, DecoderConfig(**ckpt["decoder_config"])))
    model.encoder.load_state_dict(ckpt["encoder_state"])
    model.decoder.load_state_dict(ckpt["decoder_state"])
    if parameter_checksum(model.decoder) != ckpt["decoder_checksum"]:
        raise ValueError(f"{path}: decoder checksum mismatch")
    stats = NormalizationStats.from_dict(ckpt["norm_stats"]) if ckpt.get("norm_stats") else None
    model.eval()
    return model, stats, ckpt.get("extra", {})
