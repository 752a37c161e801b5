"""Patch-based ViT encoder over 6-band scenes with masked-autoencoder pretraining.

Single-timestamp input only; no class token. The encoder exposes token
outputs at four block indices (taps) that feed the segmentation decoder.
"""

from __future__ import annotations

import hashlib
import math
from dataclasses import asdict, dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .scene_io import NUM_BANDS


@dataclass
class EncoderConfig:
    image_size: int = 224
    patch_size: int = 16
    in_bands: int = NUM_BANDS
    embed_dim: int = 192
    depth: int = 8
    num_heads: int = 3
    mlp_ratio: float = 4.0
    tap_layers: list[int] = field(default_factory=lambda: [2, 4, 6, 8])

    def __post_init__(self):
        self.tap_layers = [int(t) for t in self.tap_layers]
        if self.image_size % self.patch_size:
            raise ValueError(f"image_size {self.image_size} not divisible by patch_size {self.patch_size}")
        if self.embed_dim % self.num_heads:
            raise ValueError(f"embed_dim {self.embed_dim} not divisible by num_heads {self.num_heads}")
        taps = self.tap_layers
        if len(taps) != 4 or any(b <= a for a, b in zip(taps, taps[1:])) or taps[0] < 1:
            raise ValueError(f"tap_layers must be 4 strictly increasing block indices, got {taps}")
        if taps[-1] != self.depth:
            raise ValueError(f"last tap layer must equal depth {self.depth}, got {taps[-1]}")

    @property
    def grid_size(self) -> int:
        return self.image_size // self.patch_size

    @property
    def num_patches(self) -> int:
        return self.grid_size ** 2

    def to_dict(self) -> dict:
        return asdict(self)


@dataclass
class MaeConfig:
    mask_ratio: float = 0.75
    decoder_dim: int = 128
    decoder_depth: int = 2
    decoder_heads: int = 4

    def __post_init__(self):
        if not 0 < self.mask_ratio < 1:
            raise ValueError(f"mask_ratio must lie in (0, 1), got {self.mask_ratio}")


@dataclass
class TokenGrid:
    tokens: np.ndarray  # (N, embed_dim)
    grid_shape: tuple[int, int]

    def __post_init__(self):
        g0, g1 = self.grid_shape
        if self.tokens.shape[0] != g0 * g1:
            raise ValueError(f"{self.tokens.shape[0]} tokens do not fill a {g0}x{g1} grid")


def patchify(x, patch_size: int):
    """(C, H, W) or (B, C, H, W) -> (N, C*p*p) or (B, N, C*p*p), row-major patches.

    Each patch vector is laid out channel-major (c, row, col), the same
    flattening as a Conv2d patch-embedding kernel.
    """
    single = x.ndim == 3
    if single:
        x = x[None]
    b, c, h, w = x.shape
    p = patch_size
    if h % p or w % p:
        raise ValueError(f"image {h}x{w} not divisible by patch size {p}")
    gh, gw = h // p, w // p
    x = x.reshape(b, c, gh, p, gw, p)
    x = x.transpose(0, 2, 4, 1, 3, 5) if isinstance(x, np.ndarray) else x.permute(0, 2, 4, 1, 3, 5)
    x = x.reshape(b, gh * gw, c * p * p)
    return x[0] if single else x


def unpatchify(patches, patch_size: int, channels: int = NUM_BANDS, grid: tuple[int, int] | None = None):
    single = patches.ndim == 2
    if single:
        patches = patches[None]
    b, n, _ = patches.shape
    p = patch_size
    gh, gw = grid or (math.isqrt(n), math.isqrt(n))
    if gh * gw != n:
        raise ValueError(f"{n} patches do not form a {gh}x{gw} grid")
    x = patches.reshape(b, gh, gw, channels, p, p)
    x = x.transpose(0, 3, 1, 4, 2, 5) if isinstance(x, np.ndarray) else x.permute(0, 3, 1, 4, 2, 5)
    x = x.reshape(b, channels, gh * p, gw * p)
    return x[0] if single else x


class Attention(nn.Module):
    def __init__(self, dim: int, num_heads: int):
        super().__init__()
        self.num_heads = num_heads
        self.qkv = nn.Linear(dim, dim * 3)
        self.proj = nn.Linear(dim, dim)

    def forward(self, x):
        b, n, d = x.shape
        qkv = self.qkv(x).reshape(b, n, 3, self.num_heads, d // self.num_heads).permute(2, 0, 3, 1, 4)
        q, k, v = qkv[0], qkv[1], qkv[2]
        attn = (q @ k.transpose(-2, -1)) * (q.shape[-1] ** -0.5)
        x = attn.softmax(dim=-1) @ v
        return self.proj(x.transpose(1, 2).reshape(b, n, d))


class Block(nn.Module):
    def __init__(self, dim: int, num_heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        hidden = int(dim * mlp_ratio)
        self.norm1 = nn.LayerNorm(dim)
        self.attn = Attention(dim, num_heads)
        self.norm2 = nn.LayerNorm(dim)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x):
        x = x + self.attn(self.norm1(x))
        return x + self.mlp(self.norm2(x))


def _init_weights(m: nn.Module) -> None:
    if isinstance(m, nn.Linear):
        nn.init.xavier_uniform_(m.weight)
        if m.bias is not None:
            nn.init.zeros_(m.bias)
    elif isinstance(m, nn.LayerNorm):
        nn.init.ones_(m.weight)
        nn.init.zeros_(m.bias)


class ViTEncoder(nn.Module):
    def __init__(self, config: EncoderConfig):
        super().__init__()
        self.config = config
        c = config
        # linear over patchified pixels; a strided Conv2d is equivalent but miscomputes under CPU bf16 autocast
        self.patch_embed = nn.Linear(c.in_bands * c.patch_size ** 2, c.embed_dim)
        self.pos_embed = nn.Parameter(torch.zeros(1, c.num_patches, c.embed_dim))
        self.blocks = nn.ModuleList(Block(c.embed_dim, c.num_heads, c.mlp_ratio) for _ in range(c.depth))
        self.norm = nn.LayerNorm(c.embed_dim)
        self.frozen_checksum: str | None = None

        nn.init.trunc_normal_(self.pos_embed, std=0.02)
        self.apply(_init_weights)

    def embed(self, x):
        c = self.config
        if x.shape[-2:] != (c.image_size, c.image_size):
            raise ValueError(f"encoder expects {c.image_size}x{c.image_size} input, got {tuple(x.shape[-2:])}")
        if x.shape[1] != c.in_bands:
            raise ValueError(f"encoder expects {c.in_bands} bands, got {x.shape[1]}")
        return self.patch_embed(patchify(x, c.patch_size)) + self.pos_embed

    def forward(self, x) -> list[torch.Tensor]:
        """Return token tensors (B, N, D) at each tap layer, shallow to deep."""
        h = self.embed(x)
        taps = set(self.config.tap_layers)
        out = []
        for i, blk in enumerate(self.blocks, start=1):
            h = blk(h)
            if i in taps:
                out.append(self.norm(h) if i == self.config.depth else h)
        return out

    @torch.no_grad()
    def encode(self, scene) -> dict[int, TokenGrid]:
        """Encode one normalized (6, H, W) scene into TokenGrids keyed by tap layer."""
        x = torch.as_tensor(np.asarray(scene), dtype=next(self.parameters()).dtype)[None]
        was_training = self.training
        self.eval()
        try:
            feats = self(x)
        finally:
            self.train(was_training)
        g = self.config.grid_size
        return {layer: TokenGrid(f[0].float().numpy(), (g, g))
                for layer, f in zip(self.config.tap_layers, feats)}


def parameter_checksum(module: nn.Module) -> str:
    """SHA-256 over every parameter and buffer, in name order, as raw bytes."""
    h = hashlib.sha256()
    state = module.state_dict()
    for name in sorted(state):
        t = state[name].detach().cpu().contiguous()
        h.update(name.encode())
        h.update(str(t.dtype).encode())
        h.update(t.view(torch.uint8).numpy().tobytes() if t.numel() else b"")
    return h.hexdigest()


def freeze(encoder: ViTEncoder) -> ViTEncoder:
    """Exclude encoder parameters from gradient updates and record their checksum."""
    for p in encoder.parameters():
        p.requires_grad_(False)
    encoder.eval()
    checksum = parameter_checksum(encoder)
    if encoder.frozen_checksum is None:
        encoder.frozen_checksum = checksum
    elif encoder.frozen_checksum != checksum:
        raise RuntimeError("frozen encoder parameters changed since freeze()")
    return encoder


def is_frozen(encoder: ViTEncoder) -> bool:
    return encoder.frozen_checksum is not None and not any(p.requires_grad for p in encoder.parameters())


# ---------------------------------------------------------------------------
# masked autoencoder


def num_masked(mask_ratio: float, num_patches: int) -> int:
    n = math.ceil(round(mask_ratio * num_patches, 9))
    if n <= 0 or n >= num_patches:
        raise ValueError(f"mask_ratio {mask_ratio} masks {n} of {num_patches} patches; "
                         "need at least one masked and one visible")
    return n


def random_mask(batch: int, num_patches: int, mask_ratio: float,
                generator: torch.Generator | None = None) -> torch.Tensor:
    """Boolean (B, N) mask, True = hidden, uniform without replacement per image."""
    n_mask = num_masked(mask_ratio, num_patches)
    noise = torch.rand(batch, num_patches, generator=generator)
    ranks = noise.argsort(dim=1).argsort(dim=1)
    return ranks < n_mask


def mae_loss(target: torch.Tensor, pred: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
    """Mean squared error over hidden patches only.

    target/pred are (B, N, C*p*p); mask is (B, N) bool with True = hidden.
    """
    per_patch = ((pred - target) ** 2).mean(dim=-1)
    m = mask.to(per_patch.dtype)
    return (per_patch * m).sum() / m.sum()


class MaskedAutoencoder(nn.Module):
    def __init__(self, encoder: ViTEncoder, config: MaeConfig | None = None):
        super().__init__()
        self.encoder = encoder
        self.config = config or MaeConfig()
        ec, mc = encoder.config, self.config
        self.decoder_embed = nn.Linear(ec.embed_dim, mc.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(1, 1, mc.decoder_dim))
        self.decoder_pos_embed = nn.Parameter(torch.zeros(1, ec.num_patches, mc.decoder_dim))
        self.decoder_blocks = nn.ModuleList(
            Block(mc.decoder_dim, mc.decoder_heads, ec.mlp_ratio) for _ in range(mc.decoder_depth))
        self.decoder_norm = nn.LayerNorm(mc.decoder_dim)
        self.decoder_pred = nn.Linear(mc.decoder_dim, ec.patch_size ** 2 * ec.in_bands)

        nn.init.normal_(self.mask_token, std=0.02)
        nn.init.trunc_normal_(self.decoder_pos_embed, std=0.02)
        for mod in (self.decoder_embed, self.decoder_blocks, self.decoder_norm, self.decoder_pred):
            mod.apply(_init_weights)

    def forward(self, x: torch.Tensor, mask: torch.Tensor):
        """Reconstruct every patch from the visible ones. Returns (pred, target)."""
        enc = self.encoder
        tokens = enc.embed(x)
        b, n, d = tokens.shape
        # visible tokens first, in original order; equal count per image
        keep_order = torch.argsort(mask.to(torch.int8), dim=1, stable=True)
        n_vis = int((~mask[0]).sum())
        vis_idx = keep_order[:, :n_vis]
        h = torch.gather(tokens, 1, vis_idx[..., None].expand(-1, -1, d))
        for blk in enc.blocks:
            h = blk(h)
        h = self.decoder_embed(enc.norm(h))

        full = self.mask_token.expand(b, n, -1).clone()
        full = full.scatter(1, vis_idx[..., None].expand(-1, -1, h.shape[-1]), h)
        full = full + self.decoder_pos_embed
        for blk in self.decoder_blocks:
            full = blk(full)
        pred = self.decoder_pred(self.decoder_norm(full))
        return pred, patchify(x, enc.config.patch_size)

    def loss(self, x: torch.Tensor, mask: torch.Tensor) -> torch.Tensor:
        pred, target = self(x, mask)
        return mae_loss(target, pred, mask)


def mae_pretrain_step(model: MaskedAutoencoder, batch: torch.Tensor, optimizer: torch.optim.Optimizer,
                      generator: torch.Generator | None = None) -> float:
    """One optimisation step on a batch of normalized scenes; returns the loss."""
    model.train()
    mask = random_mask(batch.shape[0], model.encoder.config.num_patches, model.config.mask_ratio, generator)
    loss = model.loss(batch, mask)
    if not torch.isfinite(loss):
        raise FloatingPointError(f"non-finite MAE loss {loss.item()}")
    optimizer.zero_grad(set_to_none=True)
    loss.backward()
    optimizer.step()
    return float(loss.detach())


def pretrain(encoder: ViTEncoder, images: np.ndarray, config: MaeConfig | None = None, *,
             steps: int = 200, batch_size: int = 8, lr: float = 1.5e-4, weight_decay: float = 0.05,
             seed: int = 0, log_every: int = 50, logger=None) -> list[float]:
    """MAE-pretrain ``encoder`` in place on normalized (N, 6, H, W) images; returns per-step losses."""
    torch.manual_seed(seed)
    model = MaskedAutoencoder(encoder, config)
    opt = torch.optim.AdamW(model.parameters(), lr=lr, betas=(0.9, 0.95), weight_decay=weight_decay)
    gen = torch.Generator().manual_seed(seed)
    data = torch.as_tensor(images, dtype=torch.float32)
    losses = []
    for step in range(1, steps + 1):
        idx = torch.randint(0, data.shape[0], (min(batch_size, data.shape[0]),), generator=gen)
        losses.append(mae_pretrain_step(model, data[idx], opt, gen))
        if logger is not None and (step % log_every == 0 or step == 1):
            logger.info("mae step %d/%d loss %.4f", step, steps, losses[-1])
    encoder.eval()
    return losses
