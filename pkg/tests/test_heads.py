import numpy as np
import pytest
import torch

from umami.heads import (
    CONF_FLOOR,
    ConfidenceMap,
    HeadError,
    conf_pixel_map,
    patch_confidence,
    sinusoidal_embedding,
    timestep_table,
)
from umami.rng import np_generator, torch_generator

from helpers import finite_diff_gradcheck, tiny_model


class TestDeterministicHead:
    def test_zero_final_layer_gives_gray_and_half_confidence(self):
        model = tiny_model(0)
        with torch.no_grad():
            model.head.det.fc3.weight.zero_()
            model.head.det.fc3.bias.zero_()
        z = torch.randn(5, 32, generator=torch_generator(0, "det-z"), dtype=torch.float64)
        rgb, conf = model.predict_rgb_conf(z)
        assert torch.equal(rgb, torch.zeros_like(rgb))
        assert torch.equal(conf, torch.full_like(conf, 0.5))
        assert torch.equal(patch_confidence(conf), torch.full((5,), 0.5, dtype=torch.float64))

    def test_outputs_bounded(self):
        model = tiny_model(1, randomize_all=True)
        z = 5.0 * torch.randn(20, 32, generator=torch_generator(1, "det-b"), dtype=torch.float64)
        rgb, conf = model.predict_rgb_conf(z)
        assert float(rgb.abs().max()) <= 1.0
        assert float(conf.min()) >= CONF_FLOOR and float(conf.max()) <= 1.0

    def test_deterministic_bit_identical(self):
        model = tiny_model(2, randomize_all=True)
        z = torch.randn(7, 32, generator=torch_generator(2, "det-d"), dtype=torch.float64)
        a = model.predict_rgb_conf(z)
        b = model.predict_rgb_conf(z)
        assert torch.equal(a[0], b[0]) and torch.equal(a[1], b[1])

    def test_per_token_locality(self):
        model = tiny_model(3, randomize_all=True)
        z = torch.randn(9, 32, generator=torch_generator(3, "det-l"), dtype=torch.float64)
        rgb, conf = model.predict_rgb_conf(z)
        perm = torch.from_numpy(np_generator(3, "det-perm").permutation(9))
        rgb_p, conf_p = model.predict_rgb_conf(z[perm])
        assert torch.allclose(rgb_p, rgb[perm], atol=1e-12)
        assert torch.allclose(conf_p, conf[perm], atol=1e-12)


class TestConfidenceAggregation:
    def test_patch_score_is_min_over_pixels(self):
        scores = torch.full((1, 64), 0.9, dtype=torch.float64)
        scores[0, 37] = 0.2
        assert float(patch_confidence(scores)) == 0.2

    def test_confidence_map_assembly(self):
        # 2x2 patches of size 2 in a 4x4 image
        tokens = torch.arange(16, dtype=torch.float64).reshape(4, 4) / 16.0 + 0.01
        cm = ConfidenceMap.from_token_scores(tokens, (4, 4), 2)
        assert cm.pixel_scores.shape == (4, 4)
        assert cm.patch_scores.shape == (4,)
        # token 0 occupies the top-left 2x2 block, channel-major (row, col) order
        assert np.array_equal(
            cm.pixel_scores[:2, :2].reshape(-1), tokens[0].numpy()
        )
        assert np.allclose(cm.patch_scores, tokens.numpy().min(axis=1))

    def test_pixel_map_matches_confidence_map(self):
        tokens = torch.rand(4, 4, generator=torch_generator(4, "cm"), dtype=torch.float64)
        cm = ConfidenceMap.from_token_scores(tokens, (4, 4), 2)
        torch_map = conf_pixel_map(tokens, (4, 4), 2)
        assert np.array_equal(cm.pixel_scores, torch_map.numpy())


class TestDiffusionHead:
    def test_shape_preserved(self):
        model = tiny_model(5, randomize_all=True)
        d = model.cfg.token_dim
        x = torch.randn(6, d, generator=torch_generator(5, "dh-x"), dtype=torch.float64)
        t = torch.arange(6) % model.cfg.t_train
        z = torch.randn(6, 32, generator=torch_generator(5, "dh-z"), dtype=torch.float64)
        eps = model.predict_noise(x, t, z)
        assert eps.shape == (6, d)

    def test_null_branch_ignores_latent(self):
        model = tiny_model(6, randomize_all=True)
        d = model.cfg.token_dim
        x = torch.randn(4, d, generator=torch_generator(6, "dh-null"), dtype=torch.float64)
        t = torch.zeros(4, dtype=torch.long)
        z1 = torch.randn(4, 32, generator=torch_generator(7, "z1"), dtype=torch.float64)
        z2 = torch.randn(4, 32, generator=torch_generator(8, "z2"), dtype=torch.float64)
        null = torch.ones(4, dtype=torch.bool)
        assert torch.equal(
            model.predict_noise(x, t, z1, null), model.predict_noise(x, t, z2, null)
        )
        assert torch.equal(
            model.predict_noise(x, t, None), model.predict_noise(x, t, z1, null)
        )

    def test_timestep_out_of_range_rejected(self):
        model = tiny_model(7)
        d = model.cfg.token_dim
        x = torch.zeros(1, d, dtype=torch.float64)
        z = torch.zeros(1, 32, dtype=torch.float64)
        with pytest.raises(HeadError):
            model.predict_noise(x, torch.tensor([model.cfg.t_train]), z)
        with pytest.raises(HeadError):
            model.predict_noise(x, torch.tensor([-1]), z)

    def test_conditioning_sensitivity(self):
        model = tiny_model(8, randomize_all=True)
        d = model.cfg.token_dim
        g = torch_generator(9, "dh-sens")
        x = torch.randn(1, d, generator=g, dtype=torch.float64)
        t = torch.tensor([10])
        z = torch.randn(1, 32, generator=g, dtype=torch.float64)
        base = model.predict_noise(x, t, z)
        for _ in range(5):
            delta = torch.randn(1, 32, generator=g, dtype=torch.float64)
            delta = delta / delta.norm()
            out = model.predict_noise(x, t, z + delta)
            assert float((out - base).abs().max()) > 0

    def test_per_token_locality(self):
        model = tiny_model(9, randomize_all=True)
        d = model.cfg.token_dim
        g = torch_generator(10, "dh-loc")
        x = torch.randn(8, d, generator=g, dtype=torch.float64)
        t = torch.arange(8) % model.cfg.t_train
        z = torch.randn(8, 32, generator=g, dtype=torch.float64)
        out = model.predict_noise(x, t, z)
        perm = torch.from_numpy(np_generator(11, "dh-perm").permutation(8))
        out_p = model.predict_noise(x[perm], t[perm], z[perm])
        assert torch.allclose(out_p, out[perm], atol=1e-12)

    def test_gradients_match_finite_differences(self):
        model = tiny_model(10, randomize_all=True, layers=1, hidden_dim=16,
                           head_dim=8, head_width=16, patch_size=2)
        d = model.cfg.token_dim
        g = torch_generator(12, "dh-grad")
        x = torch.randn(3, d, generator=g, dtype=torch.float64)
        t = torch.tensor([3, 17, 40])
        z = torch.randn(3, 16, generator=g, dtype=torch.float64)
        eps = torch.randn(3, d, generator=g, dtype=torch.float64)
        params = [p for _, p in sorted(model.head.named_parameters(),
                                       key=lambda kv: kv[0])]

        def loss_fn():
            return ((eps - model.predict_noise(x, t, z)) ** 2).sum()

        worst = finite_diff_gradcheck(params, loss_fn)
        assert worst < 1e-4, f"max relative gradient error {worst}"


class TestTimeEmbedding:
    def test_injective_over_training_range(self):
        table = timestep_table(1000, 64)
        rows = {tuple(r.tolist()) for r in table}
        assert len(rows) == 1000

    def test_odd_dimension_padded(self):
        emb = sinusoidal_embedding(torch.arange(4), 7)
        assert emb.shape == (4, 7)
        assert torch.equal(emb[:, -1], torch.zeros(4, dtype=torch.float64))
