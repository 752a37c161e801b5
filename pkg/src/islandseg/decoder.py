"""U-Net-style decoder over ViT tap tokens, and the full segmentation model."""

from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

from .encoder import EncoderConfig, TokenGrid, ViTEncoder
from .scene_io import LAND, WATER, LabelMask

NUM_TAPS = 4


@dataclass
class DecoderConfig:
    channel_widths: list[int] = field(default_factory=lambda: [512, 256, 128, 64])
    head_dropout: float = 0.1
    num_classes: int = 2

    def __post_init__(self):
        w = [int(v) for v in self.channel_widths]
        self.channel_widths = w
        if len(w) != NUM_TAPS:
            raise ValueError(f"decoder needs {NUM_TAPS} stage widths, got {w}")
        if any(b > a for a, b in zip(w, w[1:])) or min(w) < 1:
            raise ValueError(f"channel widths must be positive and non-increasing, got {w}")
        if not 0 <= self.head_dropout < 1:
            raise ValueError(f"head_dropout must lie in [0, 1), got {self.head_dropout}")

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class LogitMap:
    logits: np.ndarray  # (2, H, W)


def _groups(ch: int, max_groups: int = 8) -> int:
    return max(g for g in range(1, max_groups + 1) if ch % g == 0)


class ConvBlock(nn.Sequential):
    def __init__(self, cin: int, cout: int):
        super().__init__(
            nn.Conv2d(cin, cout, 3, padding=1, bias=False),
            nn.GroupNorm(_groups(cout), cout),
            nn.GELU(),
        )


class UNetDecoder(nn.Module):
    """Four-width decoder: a bottleneck at the token grid, then three upsampling
    stages that each concatenate one shallower tap, then a final learned
    upsample to input resolution and a dropout + 1x1 head.
    """

    def __init__(self, encoder_config: EncoderConfig, config: DecoderConfig | None = None):
        super().__init__()
        self.config = config = config or DecoderConfig()
        self.encoder_config = encoder_config
        d = encoder_config.embed_dim
        w = config.channel_widths
        p = encoder_config.patch_size
        n_up = NUM_TAPS - 1
        if p % (2 ** n_up):
            raise ValueError(f"patch size {p} must be divisible by {2 ** n_up} for the decoder")
        self.final_scale = p // (2 ** n_up)

        self.bottleneck = nn.Sequential(nn.Conv2d(d, w[0], 1), nn.GroupNorm(_groups(w[0]), w[0]), nn.GELU())
        self.ups = nn.ModuleList()
        self.skips = nn.ModuleList()
        self.blocks = nn.ModuleList()
        for i in range(n_up):
            cin, cout = w[i], w[i + 1]
            self.ups.append(nn.ConvTranspose2d(cin, cout, kernel_size=2, stride=2))
            self.skips.append(nn.Sequential(nn.Conv2d(d, cout, 1), nn.GroupNorm(_groups(cout), cout), nn.GELU()))
            self.blocks.append(nn.Sequential(ConvBlock(2 * cout, cout), ConvBlock(cout, cout)))
        if self.final_scale > 1:
            self.final_up = nn.ConvTranspose2d(w[-1], w[-1], kernel_size=self.final_scale, stride=self.final_scale)
        else:
            self.final_up = nn.Identity()
        self.dropout = nn.Dropout(config.head_dropout)
        self.head = nn.Conv2d(w[-1], config.num_classes, 1)

    def _grid(self, tokens: torch.Tensor) -> torch.Tensor:
        b, n, d = tokens.shape
        g = math.isqrt(n)
        if g * g != n:
            raise ValueError(f"{n} tokens do not form a square grid")
        return tokens.transpose(1, 2).reshape(b, d, g, g)

    def forward(self, taps: list[torch.Tensor]) -> torch.Tensor:
        """taps: four (B, N, D) tensors ordered shallow to deep -> (B, classes, H, W) logits."""
        if len(taps) != NUM_TAPS:
            raise ValueError(f"decoder expects {NUM_TAPS} taps, got {len(taps)}")
        shapes = {tuple(t.shape) for t in taps}
        if len(shapes) != 1:
            raise ValueError(f"tap grids have inconsistent shapes: {sorted(shapes)}")
        grids = [self._grid(t) for t in taps]
        x = self.bottleneck(grids[-1])
        for i, (up, skip, block) in enumerate(zip(self.ups, self.skips, self.blocks)):
            x = up(x)
            s = skip(grids[NUM_TAPS - 2 - i])
            s = F.interpolate(s, size=x.shape[-2:], mode="bilinear", align_corners=False)
            x = block(torch.cat([x, s], dim=1))
        x = self.final_up(x)
        return self.head(self.dropout(x))

    @torch.no_grad()
    def decode(self, taps: dict[int, TokenGrid]) -> LogitMap:
        """Decode one scene's TokenGrids (keyed by tap layer) into a LogitMap."""
        if len(taps) != NUM_TAPS:
            raise ValueError(f"decoder expects {NUM_TAPS} taps, got {len(taps)}")
        counts = {g.tokens.shape for g in taps.values()}
        if len(counts) != 1:
            raise ValueError(f"tap grids have inconsistent shapes: {sorted(counts)}")
        dtype = next(self.parameters()).dtype
        ts = [torch.as_tensor(taps[k].tokens, dtype=dtype)[None] for k in sorted(taps)]
        was_training = self.training
        self.eval()
        try:
            out = self(ts)[0]
        finally:
            self.train(was_training)
        return LogitMap(out.float().numpy())


def predict_mask(logit_map: LogitMap | np.ndarray, scene_id: str = "") -> LabelMask:
    """Per-pixel argmax; exact ties go to water."""
    logits = logit_map.logits if isinstance(logit_map, LogitMap) else np.asarray(logit_map)
    classes = np.where(logits[LAND] > logits[WATER], LAND, WATER)
    return LabelMask(scene_id, classes.astype(np.uint8))


def predict_classes(logits: torch.Tensor) -> torch.Tensor:
    """Batched tie-to-water argmax over (B, 2, H, W) logits."""
    return (logits[:, LAND] > logits[:, WATER]).to(torch.uint8)


class SegmentationModel(nn.Module):
    def __init__(self, encoder: ViTEncoder, decoder: UNetDecoder):
        super().__init__()
        self.encoder = encoder
        self.decoder = decoder

    @classmethod
    def build(cls, enc_cfg: EncoderConfig, dec_cfg: DecoderConfig | None = None) -> SegmentationModel:
        return cls(ViTEncoder(enc_cfg), UNetDecoder(enc_cfg, dec_cfg))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        return self.decoder(self.encoder(x))
