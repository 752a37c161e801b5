import numpy as np
import pytest
import torch

from islandseg import synthgen
from islandseg.encoder import (EncoderConfig, MaeConfig, MaskedAutoencoder, ViTEncoder, freeze, is_frozen,
                               mae_loss, mae_pretrain_step, num_masked, parameter_checksum, patchify, pretrain,
                               random_mask, unpatchify)

from conftest import TINY_ENC


class TestPatchify:
    def test_default_geometry(self):
        assert patchify(np.zeros((6, 224, 224)), 16).shape == (196, 1536)

    def test_small(self):
        assert patchify(np.zeros((6, 32, 32)), 16).shape == (4, 1536)

    def test_non_divisible(self):
        with pytest.raises(ValueError):
            patchify(np.zeros((6, 30, 30)), 16)

    @pytest.mark.parametrize("backend", ["numpy", "torch"])
    def test_roundtrip_exact(self, backend):
        x = np.random.rand(6, 48, 48).astype(np.float32)
        if backend == "torch":
            x = torch.from_numpy(x)
        y = unpatchify(patchify(x, 16), 16)
        assert (y == x).all()

    def test_row_major_order(self):
        x = np.zeros((6, 32, 32))
        x[:, 0:16, 16:32] = 1  # top-right patch is index 1
        p = patchify(x, 16)
        assert p[1].min() == 1 and p[0].max() == 0 and p[2].max() == 0

    def test_embedding_matches_strided_conv(self):
        cfg = EncoderConfig(**TINY_ENC)
        enc = ViTEncoder(cfg)
        x = torch.randn(2, 6, 32, 32)
        p = cfg.patch_size
        kernel = enc.patch_embed.weight.reshape(cfg.embed_dim, 6, p, p)
        conv = torch.nn.functional.conv2d(x, kernel, enc.patch_embed.bias, stride=p).flatten(2).transpose(1, 2)
        torch.testing.assert_close(enc.embed(x) - enc.pos_embed, conv, atol=1e-5, rtol=1e-5)


class TestConfig:
    def test_defaults(self):
        c = EncoderConfig()
        assert (c.image_size, c.patch_size, c.embed_dim, c.depth, c.num_heads) == (224, 16, 192, 8, 3)
        assert c.tap_layers == [2, 4, 6, 8]
        assert c.num_patches == 196

    @pytest.mark.parametrize("kw", [dict(image_size=100), dict(embed_dim=100),
                                    dict(tap_layers=[2, 2, 6, 8]), dict(tap_layers=[2, 4, 6, 7]),
                                    dict(tap_layers=[4, 8])])
    def test_invalid(self, kw):
        with pytest.raises(ValueError):
            EncoderConfig(**kw)

    def test_mask_ratio_range(self):
        with pytest.raises(ValueError):
            MaeConfig(mask_ratio=1.0)


class TestEncode:
    def test_default_shapes(self):
        enc = ViTEncoder(EncoderConfig())
        grids = enc.encode(np.random.randn(6, 224, 224).astype(np.float32))
        assert sorted(grids) == [2, 4, 6, 8]
        for g in grids.values():
            assert g.tokens.shape == (196, 192)
            assert g.grid_shape == (14, 14)
            assert np.isfinite(g.tokens).all()

    def test_deterministic(self):
        enc = ViTEncoder(EncoderConfig(**TINY_ENC))
        x = np.random.randn(6, 32, 32).astype(np.float32)
        a, b = enc.encode(x), enc.encode(x.copy())
        for k in a:
            assert np.array_equal(a[k].tokens, b[k].tokens)

    def test_size_mismatch(self):
        enc = ViTEncoder(EncoderConfig(**TINY_ENC))
        with pytest.raises(ValueError, match="expects 32x32"):
            enc.encode(np.zeros((6, 64, 64), np.float32))

    def test_bfloat16_close_to_float32(self):
        torch.manual_seed(1)
        enc = ViTEncoder(EncoderConfig(image_size=64, patch_size=16, embed_dim=64, depth=4, num_heads=4,
                                       tap_layers=[1, 2, 3, 4])).eval()
        x = torch.randn(2, 6, 64, 64)
        with torch.no_grad():
            ref = enc(x)
            with torch.autocast("cpu", dtype=torch.bfloat16):
                low = enc(x)
        for r, lo in zip(ref, low):
            assert lo.dtype == torch.bfloat16 or lo.dtype == torch.float32
            assert (r - lo.float()).abs().max().item() < 1e-1


class TestMae:
    def test_masked_count(self):
        assert num_masked(0.75, 196) == 147
        m = random_mask(3, 196, 0.75, torch.Generator().manual_seed(0))
        assert m.sum(1).tolist() == [147, 147, 147]

    def test_float_rounding_of_ratio(self):
        assert num_masked(0.7, 10) == 7

    @pytest.mark.parametrize("ratio,n", [(0.99, 4), (0.8, 1), (0.5, 1)])
    def test_degenerate_mask(self, ratio, n):
        with pytest.raises(ValueError):
            num_masked(ratio, n)

    def test_mask_uniform_without_replacement(self):
        gen = torch.Generator().manual_seed(0)
        counts = torch.zeros(16)
        for _ in range(2000):
            counts += random_mask(1, 16, 0.25, gen)[0].float()
        # each patch hidden with probability 4/16
        assert torch.allclose(counts / 2000, torch.full((16,), 0.25), atol=0.04)

    def test_perfect_reconstruction(self):
        t = torch.randn(2, 4, 12)
        m = random_mask(2, 4, 0.5)
        assert mae_loss(t, t.clone(), m).item() == 0.0

    def test_visible_predictions_ignored(self):
        t, p = torch.randn(2, 16, 12), torch.randn(2, 16, 12)
        m = random_mask(2, 16, 0.75, torch.Generator().manual_seed(3))
        p2 = p.clone()
        p2[~m] += 100 * torch.randn_like(p2[~m])
        assert mae_loss(t, p, m).item() == mae_loss(t, p2, m).item()

    def test_hand_value(self):
        t = torch.zeros(1, 2, 2)
        p = torch.tensor([[[1.0, 1.0], [2.0, 4.0]]])
        m = torch.tensor([[False, True]])
        assert mae_loss(t, p, m).item() == pytest.approx((4 + 16) / 2)

    def test_forward_shapes(self):
        cfg = EncoderConfig(**TINY_ENC)
        mae = MaskedAutoencoder(ViTEncoder(cfg), MaeConfig(decoder_dim=16, decoder_depth=1, decoder_heads=2))
        x = torch.randn(3, 6, 32, 32)
        pred, target = mae(x, random_mask(3, cfg.num_patches, 0.75))
        assert pred.shape == target.shape == (3, 16, 6 * 64)

    def test_step_updates_encoder(self):
        cfg = EncoderConfig(**TINY_ENC)
        enc = ViTEncoder(cfg)
        mae = MaskedAutoencoder(enc, MaeConfig(decoder_dim=16, decoder_depth=1, decoder_heads=2))
        opt = torch.optim.AdamW(mae.parameters(), lr=1e-3)
        before = parameter_checksum(enc)
        loss = mae_pretrain_step(mae, torch.randn(2, 6, 32, 32), opt, torch.Generator().manual_seed(0))
        assert np.isfinite(loss)
        assert parameter_checksum(enc) != before

    def test_pretraining_reduces_loss(self):
        scenes = [s.bands for s, _ in synthgen.generate_scenes(32, 32, seed=11)]
        x = np.stack(scenes)
        x = (x - x.mean(axis=(0, 2, 3), keepdims=True)) / x.std(axis=(0, 2, 3), keepdims=True)
        enc = ViTEncoder(EncoderConfig(**TINY_ENC))
        losses = pretrain(enc, x.astype(np.float32), MaeConfig(decoder_dim=32, decoder_depth=1, decoder_heads=2),
                          steps=200, batch_size=8, lr=1e-3, seed=0)
        assert np.mean(losses[-10:]) < losses[0]


class TestFreeze:
    def test_freeze_idempotent(self):
        enc = ViTEncoder(EncoderConfig(**TINY_ENC))
        freeze(enc)
        c = enc.frozen_checksum
        freeze(enc)
        assert enc.frozen_checksum == c == parameter_checksum(enc)
        assert is_frozen(enc)
        assert not any(p.requires_grad for p in enc.parameters())

    def test_refreeze_detects_mutation(self):
        enc = ViTEncoder(EncoderConfig(**TINY_ENC))
        freeze(enc)
        with torch.no_grad():
            enc.pos_embed.add_(1.0)
        with pytest.raises(RuntimeError):
            freeze(enc)

    def test_checksum_sensitive_to_one_bit(self):
        enc = ViTEncoder(EncoderConfig(**TINY_ENC))
        c = parameter_checksum(enc)
        with torch.no_grad():
            enc.norm.bias[0] = torch.nextafter(enc.norm.bias[0], torch.tensor(1.0))
        assert parameter_checksum(enc) != c


def central_difference(f, tensor, index, h=1e-6):
    """Independent numeric derivative of scalar f() w.r.t. tensor[index]."""
    with torch.no_grad():
        orig = tensor[index].item()
        tensor[index] = orig + h
        up = f().item()
        tensor[index] = orig - h
        down = f().item()
        tensor[index] = orig
    return (up - down) / (2 * h)


def rel_err(a, b):
    return abs(a - b) / max(abs(a), abs(b), 1e-8)


def test_mae_gradient_check():
    torch.manual_seed(0)
    # depth 4 rather than 2: four strictly increasing taps need at least four blocks
    cfg = EncoderConfig(image_size=32, patch_size=16, embed_dim=16, depth=4, num_heads=2, tap_layers=[1, 2, 3, 4])
    mae = MaskedAutoencoder(ViTEncoder(cfg), MaeConfig(mask_ratio=0.5, decoder_dim=16, decoder_depth=1,
                                                       decoder_heads=2)).double()
    x = torch.randn(2, 6, 32, 32, dtype=torch.float64)
    mask = random_mask(2, cfg.num_patches, 0.5, torch.Generator().manual_seed(1))

    def loss():
        return mae.loss(x, mask)

    mae.zero_grad()
    loss().backward()
    gen = torch.Generator().manual_seed(2)
    checked = 0
    for name, p in mae.named_parameters():
        for _ in range(2):
            idx = tuple(int(torch.randint(0, s, (1,), generator=gen)) for s in p.shape)
            analytic = p.grad[idx].item()
            numeric = central_difference(loss, p.data, idx)
            assert rel_err(analytic, numeric) < 1e-3, (name, idx, analytic, numeric)
            checked += 1
    assert checked > 40
