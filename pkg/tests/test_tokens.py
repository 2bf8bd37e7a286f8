import numpy as np
import pytest
import torch

from umami.geometry import plucker_grid
from umami.rng import np_generator, torch_generator
from umami.tokens import (
    TokenError,
    apply_mask,
    concat_sequences,
    detokenize,
    expand_patch_mask,
    to_image,
    tokenize,
    tokens_per_view,
)

from helpers import canonical_pose, random_pose


def make_seq(rng, resolution=(16, 16), patch=4, role="target", image=None):
    pose = random_pose(rng, resolution)
    if image is None:
        image = rng.random((resolution[1], resolution[0], 3)).astype(np.float32)
    return tokenize(image, plucker_grid(pose), patch, role=role), image


class TestTokenize:
    def test_paper_scale_shape(self):
        rng = np_generator(0, "tok-shape")
        seq, _ = make_seq(rng, (256, 256), 8)
        assert len(seq) == 1024
        assert seq.tokens.shape == (1024, 576)

    def test_single_patch_case(self):
        rng = np_generator(1, "tok-single")
        seq, img = make_seq(rng, (16, 16), 16)
        assert len(seq) == 1
        assert seq.tokens.shape == (1, 16 * 16 * 9)

    def test_constant_gray_maps_to_zero(self):
        rng = np_generator(2, "tok-gray")
        img = np.full((16, 16, 3), 0.5, dtype=np.float32)
        seq, _ = make_seq(rng, (16, 16), 4, image=img)
        assert torch.equal(seq.rgb, torch.zeros_like(seq.rgb))

    def test_resolution_mismatch_rejected(self):
        rng = np_generator(3, "tok-mismatch")
        pose = random_pose(rng, (8, 8))
        img = rng.random((16, 16, 3)).astype(np.float32)
        with pytest.raises(TokenError):
            tokenize(img, plucker_grid(pose), 4)

    def test_non_divisible_resolution_rejected(self):
        rng = np_generator(4, "tok-div")
        pose = random_pose(rng, (10, 10))
        img = rng.random((10, 10, 3)).astype(np.float32)
        with pytest.raises(TokenError):
            tokenize(img, plucker_grid(pose), 4)
        with pytest.raises(TokenError):
            tokens_per_view((10, 10), 4)

    def test_patch_order_row_major(self):
        rng = np_generator(5, "tok-order")
        seq, _ = make_seq(rng, (12, 8), 4)   # 3x2 patches
        assert [tuple(pi) for pi in seq.patch_index] == [
            (0, 0), (0, 1), (0, 2), (1, 0), (1, 1), (1, 2)
        ]

    def test_plucker_channels_carry_ray_values(self):
        rng = np_generator(6, "tok-ray")
        pose = random_pose(rng, (8, 8))
        grid = plucker_grid(pose)
        img = rng.random((8, 8, 3)).astype(np.float32)
        seq = tokenize(img, grid, 8)
        # single patch: channel-major layout, channels 3..8 are the ray planes
        block = seq.tokens[0, 192:].reshape(6, 8, 8).numpy()
        expect = grid.channels.transpose(2, 0, 1)
        assert np.array_equal(block, expect)


class TestMasking:
    def setup_method(self):
        self.rng = np_generator(7, "mask")
        self.seq, _ = make_seq(self.rng, (16, 16), 4)
        self.emb = torch.empty(48, dtype=torch.float64).normal_(
            generator=torch_generator(7, "mask-emb")
        )

    def test_all_false_mask_is_identity(self):
        out = apply_mask(self.seq, np.zeros(16, dtype=bool), self.emb)
        assert torch.equal(out.tokens, self.seq.tokens)
        assert not out.mask_flag.any()

    def test_all_true_mask_replaces_rgb_only(self):
        out = apply_mask(self.seq, np.ones(16, dtype=bool), self.emb)
        assert torch.equal(out.rgb, self.emb[None, :].expand(16, -1))
        assert torch.equal(out.plucker, self.seq.plucker)
        assert out.mask_flag.all()

    def test_single_token_mask_touches_only_that_token(self):
        mask = np.zeros(16, dtype=bool)
        mask[0] = True
        out = apply_mask(self.seq, mask, self.emb)
        diff = (out.tokens != self.seq.tokens).any(dim=1).numpy()
        assert diff[0] and not diff[1:].any()
        assert torch.equal(out.tokens[0, :48], self.emb)
        assert torch.equal(out.tokens[0, 48:], self.seq.tokens[0, 48:])

    def test_idempotent_for_same_mask(self):
        mask = np_generator(8, "mask-idem").random(16) < 0.5
        once = apply_mask(self.seq, mask, self.emb)
        twice = apply_mask(once, mask, self.emb)
        assert torch.equal(once.tokens, twice.tokens)
        assert np.array_equal(once.mask_flag, twice.mask_flag)

    def test_context_sequences_cannot_be_masked(self):
        ctx, _ = make_seq(self.rng, (16, 16), 4, role="context")
        with pytest.raises(TokenError):
            apply_mask(ctx, np.ones(16, dtype=bool), self.emb)

    def test_gradient_flows_to_mask_embedding(self):
        emb = self.emb.clone().requires_grad_(True)
        out = apply_mask(self.seq, np.ones(16, dtype=bool), emb)
        out.tokens.sum().backward()
        assert emb.grad is not None and float(emb.grad.abs().sum()) > 0

    def test_wrong_mask_length_rejected(self):
        with pytest.raises(TokenError):
            apply_mask(self.seq, np.ones(15, dtype=bool), self.emb)


class TestDetokenize:
    def test_round_trip_exact_on_random_float32(self):
        rng = np_generator(9, "detok-rt")
        for resolution, patch in [((16, 16), 4), ((24, 16), 8), ((32, 32), 8)]:
            seq, img = make_seq(rng, resolution, patch)
            back = to_image(detokenize(seq.tokens, resolution, patch))
            assert np.array_equal(back, img)

    def test_round_trip_exact_on_8bit_grid(self):
        levels = (np.arange(256, dtype=np.float32) / np.float32(255.0))
        img = np.stack([levels, levels, levels], axis=-1).reshape(16, 16, 3)
        pose = canonical_pose((16, 16))
        seq = tokenize(img, plucker_grid(pose), 4)
        back = to_image(detokenize(seq.tokens, (16, 16), 4))
        assert np.array_equal(back, img)

    def test_zero_tokens_give_mid_gray(self):
        img = detokenize(torch.zeros(16, 48, dtype=torch.float64), (16, 16), 4)
        assert torch.equal(img, torch.full((16, 16, 3), 0.5, dtype=torch.float64))

    def test_checkerboard_of_patch_constants(self):
        vals = torch.tensor([0.1, 0.9, 0.3, 0.7], dtype=torch.float64)
        tokens = torch.zeros(4, 48, dtype=torch.float64)
        for i, v in enumerate(vals):
            tokens[i] = 2 * v - 1
        img = detokenize(tokens, (8, 8), 4)
        expect = torch.empty(8, 8, 3, dtype=torch.float64)
        expect[:4, :4] = vals[0]
        expect[:4, 4:] = vals[1]
        expect[4:, :4] = vals[2]
        expect[4:, 4:] = vals[3]
        assert torch.allclose(img, expect, atol=1e-15)

    def test_count_mismatch_rejected(self):
        with pytest.raises(TokenError):
            detokenize(torch.zeros(5, 48, dtype=torch.float64), (16, 16), 4)


class TestSequenceOps:
    def test_concat_assigns_contiguous_view_ids(self):
        rng = np_generator(10, "concat")
        seqs = [make_seq(rng, (8, 8), 4)[0] for _ in range(3)]
        cat = concat_sequences(seqs)
        assert len(cat) == 12
        assert list(np.unique(cat.view_index)) == [0, 1, 2]
        assert cat.view_slice(1) == slice(4, 8)

    def test_concat_rejects_mixed_roles(self):
        rng = np_generator(11, "concat-roles")
        a, _ = make_seq(rng, (8, 8), 4, role="context")
        b, _ = make_seq(rng, (8, 8), 4, role="target")
        with pytest.raises(TokenError):
            concat_sequences([a, b])

    def test_expand_patch_mask(self):
        mask = np.array([True, False, False, True])
        px = expand_patch_mask(mask, (8, 8), 4)
        assert px.shape == (8, 8)
        assert px[:4, :4].all() and px[4:, 4:].all()
        assert not px[:4, 4:].any() and not px[4:, :4].any()
        assert px.sum() == 32
