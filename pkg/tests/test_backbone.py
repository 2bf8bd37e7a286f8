import numpy as np
import pytest
import torch

from umami.backbone import Backbone, BackboneConfig, ConfigError
from umami.geometry import plucker_grid
from umami.model import HybridModel, ModelConfig, count_parameters
from umami.rng import np_generator, torch_generator
from umami.tokens import apply_mask, concat_sequences, tokenize

from helpers import finite_diff_gradcheck, random_pose, random_view, tiny_model, tiny_model_cfg


def build_inputs(rng, model, n_ctx=1, resolution=(16, 16), mask_all=True):
    p = model.cfg.patch_size
    ctx = []
    for _ in range(n_ctx):
        v = random_view(rng, resolution)
        ctx.append(tokenize(v, plucker_grid(v.pose), p, role="context"))
    tv = random_view(rng, resolution)
    tgt = tokenize(tv, plucker_grid(tv.pose), p, role="target")
    if mask_all:
        mask = np.ones(len(tgt), dtype=bool)
    else:
        mask = np_generator(0, "bb-mask").random(len(tgt)) < 0.8
    tgt = apply_mask(tgt, mask, model.mask_token.embedding.detach())
    return ctx, tgt


class TestShapes:
    def test_desk_config_latent_shape(self):
        cfg = ModelConfig(layers=4, hidden_dim=128, head_dim=32, head_width=256,
                          patch_size=8, max_patches=64)
        model = HybridModel(cfg, torch_generator(0, "desk"))
        rng = np_generator(1, "desk-shapes")
        ctx, tgt = build_inputs(rng, model, n_ctx=1, resolution=(64, 64))
        z = model.encode(concat_sequences(ctx), tgt)
        assert z.shape == (64, 128)

    def test_config_validation(self):
        with pytest.raises(ConfigError):
            BackboneConfig(layers=2, hidden_dim=30, head_dim=16)

    def test_token_dim_mismatch_rejected(self):
        model = tiny_model(0)
        bad = torch.zeros(4, 10, dtype=torch.float64)
        with pytest.raises(ConfigError):
            model.backbone(bad)


class TestPermutationProperties:
    def test_context_view_order_irrelevant_without_pos_embed(self):
        model = tiny_model(2)
        rng = np_generator(2, "bb-perm")
        ctx, tgt = build_inputs(rng, model, n_ctx=2)
        z_ab = model.encode(concat_sequences(ctx), tgt)
        z_ba = model.encode(concat_sequences(ctx[::-1]), tgt)
        assert float((z_ab - z_ba).detach().abs().max()) < 1e-5

    def test_target_token_order_equivariant(self):
        # content-based attention only: permuting token rows permutes latents
        model = tiny_model(3)
        rng = np_generator(3, "bb-equi")
        ctx, tgt = build_inputs(rng, model, mask_all=False)
        z = model.encode(concat_sequences(ctx), tgt)
        perm = np_generator(4, "bb-perm-idx").permutation(len(tgt))
        tgt2 = tgt.clone()
        tgt2.tokens = tgt.tokens[torch.from_numpy(perm)]
        tgt2.mask_flag = tgt.mask_flag[perm]
        tgt2.patch_index = tgt.patch_index[perm]
        z2 = model.encode(concat_sequences(ctx), tgt2)
        assert float((z2 - z[torch.from_numpy(perm)]).detach().abs().max()) < 1e-5

    def test_forward_deterministic(self):
        model = tiny_model(4)
        rng = np_generator(5, "bb-det")
        ctx, tgt = build_inputs(rng, model)
        z1 = model.encode(concat_sequences(ctx), tgt)
        z2 = model.encode(concat_sequences(ctx), tgt)
        assert torch.equal(z1, z2)

    def test_latents_finite(self):
        model = tiny_model(5)
        rng = np_generator(6, "bb-finite")
        ctx, tgt = build_inputs(rng, model)
        z = model.encode(concat_sequences(ctx), tgt)
        assert bool(torch.isfinite(z).all())


class TestOutputProjection:
    def test_zero_out_proj_gives_zero_latents(self):
        model = tiny_model(6)
        with torch.no_grad():
            model.backbone.out_proj.weight.zero_()
            model.backbone.out_proj.bias.zero_()
        rng = np_generator(7, "bb-zero")
        ctx, tgt = build_inputs(rng, model)
        z = model.encode(concat_sequences(ctx), tgt)
        assert torch.equal(z, torch.zeros_like(z))


class TestParameterCount:
    def test_zero_layer_closed_form(self):
        cfg = tiny_model_cfg(layers=0)
        n = sum(p.numel() for p in Backbone(cfg.backbone_config()).parameters())
        h, c = cfg.hidden_dim, cfg.input_dim
        # input projection + final norm + output projection
        assert n == (c * h + h) + h + (h * h + h)

    def test_doubling_hidden_quadruples_attention_blocks(self):
        def attn_params(hidden):
            cfg = BackboneConfig(layers=1, hidden_dim=hidden, head_dim=16,
                                 input_dim=144, qk_norm=False)
            block = Backbone(cfg).blocks[0]
            return sum(p.numel() for p in block.attn.parameters()
                       if p.ndim == 2)   # weight matrices only
        ratio = attn_params(64) / attn_params(32)
        assert abs(ratio - 4.0) < 1e-12

    def test_paper_scale_order_of_magnitude(self):
        cfg = ModelConfig()   # 24 x 768, head 64, patch 8
        n = count_parameters(cfg)
        print(f"\nfull-scale parameter count: {n / 1e6:.1f}M")
        assert 1e8 < n < 1e9

    def test_count_matches_live_model(self):
        cfg = tiny_model_cfg()
        model = HybridModel(cfg, torch_generator(8, "count"))
        assert count_parameters(cfg) == sum(p.numel() for p in model.parameters())


class TestPositionalEmbedding:
    def test_pos_embed_changes_latents_when_enabled(self):
        cfg = tiny_model_cfg(pos_embed=True)
        model = HybridModel(cfg, torch_generator(9, "pos"))
        rng = np_generator(10, "pos-inputs")
        ctx, tgt = build_inputs(rng, model)
        z1 = model.encode(concat_sequences(ctx), tgt)
        with torch.no_grad():
            model.backbone.pos_embed.add_(1.0)
        z2 = model.encode(concat_sequences(ctx), tgt)
        assert float((z1 - z2).detach().abs().max()) > 1e-6


class TestGradients:
    def test_backbone_gradients_match_finite_differences(self):
        cfg = tiny_model_cfg(layers=2, hidden_dim=16, head_dim=8, head_width=16)
        model = HybridModel(cfg, torch_generator(11, "grad"))
        g = torch_generator(12, "grad-rand")
        with torch.no_grad():
            for _, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
                p.copy_(torch.empty_like(p).normal_(0.0, 0.1, generator=g))
        rng = np_generator(13, "grad-inputs")
        ctx, tgt = build_inputs(rng, model, resolution=(8, 8))
        probe = torch.empty(len(tgt), cfg.hidden_dim, dtype=torch.float64).normal_(
            generator=torch_generator(14, "probe")
        )
        params = [p for _, p in sorted(model.backbone.named_parameters(),
                                       key=lambda kv: kv[0])]

        def loss_fn():
            z = model.encode(concat_sequences(ctx), tgt)
            return (z * probe).sum() + (z ** 2).sum()

        worst = finite_diff_gradcheck(params, loss_fn)
        assert worst < 1e-4, f"max relative gradient error {worst}"
