"""Fast self-check suite behind the `check` CLI subcommand.

Each check is a tiny-shape invariant that finishes in well under a second;
the whole battery stays comfortably inside a minute on one core.
"""

from __future__ import annotations

import math

import numpy as np
import torch

from . import diffusion, geometry, losses, metrics, sampler, tokens, trainer
from .heads import patch_confidence
from .model import HybridModel, ModelConfig
from .rng import np_generator, torch_generator


def _tiny_model() -> HybridModel:
    cfg = ModelConfig(layers=1, hidden_dim=32, head_dim=16, patch_size=4,
                      head_width=32, t_train=50, max_patches=16)
    return HybridModel(cfg, torch_generator(7, "check-init"))


def check_plucker() -> str:
    rng = np_generator(1, "check-plucker")
    for _ in range(5):
        axis = rng.normal(size=3)
        axis /= np.linalg.norm(axis)
        angle = rng.uniform(0, np.pi)
        k = np.array([[0, -axis[2], axis[1]], [axis[2], 0, -axis[0]], [-axis[1], axis[0], 0]])
        rot = np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)
        pose = geometry.CameraPose(rot, rng.normal(size=3), (8.0, 8.0), (4.0, 4.0), (8, 8))
        grid = geometry.plucker_grid(pose)
        dots = np.abs((grid.directions * grid.moments).sum(-1))
        assert dots.max() < 1e-6, "moment not orthogonal to direction"
        norms = np.linalg.norm(grid.directions, axis=-1)
        assert np.abs(norms - 1).max() < 1e-6, "direction not unit"
        u, v = int(rng.integers(0, 8)), int(rng.integers(0, 8))
        o, d = geometry.pixel_ray(pose, u, v)
        alpha = rng.uniform(-10, 10)
        m_slid = np.cross(o + alpha * d, d)
        assert np.abs(m_slid - grid.moments[v, u]).max() < 1e-6, "moment not slide-invariant"
    return "ray embeddings orthogonal, unit, slide-invariant"


def check_codec() -> str:
    rng = np_generator(2, "check-codec")
    img = rng.random((16, 16, 3)).astype(np.float32)
    pose = geometry.CameraPose(np.eye(3), np.zeros(3), (16.0, 16.0), (8.0, 8.0), (16, 16))
    seq = tokens.tokenize(img, geometry.plucker_grid(pose), 4)
    back = tokens.to_image(tokens.detokenize(seq.tokens, (16, 16), 4))
    assert np.array_equal(back, img), "codec round trip not exact"
    emb = torch.full((48,), 0.25, dtype=torch.float64)
    masked = tokens.apply_mask(seq, np.ones(len(seq), dtype=bool), emb)
    assert torch.equal(masked.plucker, seq.plucker), "masking altered ray channels"
    again = tokens.apply_mask(masked, np.ones(len(seq), dtype=bool), emb)
    assert torch.equal(again.tokens, masked.tokens), "masking not idempotent"
    return "tokenize/detokenize exact, masking idempotent"


def check_schedule() -> str:
    sch = diffusion.NoiseSchedule()
    assert bool((sch.betas > 0).all() and (sch.betas < 1).all())
    assert bool((sch.betas[1:] > sch.betas[:-1]).all()), "betas not increasing"
    ab = sch.alphas_cumprod
    assert bool((ab[1:] < ab[:-1]).all()), "alpha-bar not decreasing"
    assert float(ab[-1]) < 0.01, "terminal alpha-bar too large"
    steps = sch.sampling_steps
    assert steps[0] >= 0 and steps[-1] == sch.t_train - 1
    assert bool((np.diff(steps) > 0).all())
    return "noise schedule monotone with valid strided steps"


def check_budget_and_cosine() -> str:
    for t_max in (1, 8, 32):
        for n_s in range(0, 257, 16):
            got = sampler.step_budget(n_s, 256, t_max)
            assert got == math.ceil(n_s / 256 * t_max)
    for n in (1, 7, 64, 255):
        for t in (1, 3, 8):
            counts = sampler.cosine_unmask_counts(n, t)
            assert sum(counts) == n and min(counts) >= 0
    return "step budget exact, cosine counts conserve mass"


def check_cfg_identity() -> str:
    g = torch_generator(3, "check-cfg")
    for _ in range(20):
        c = torch.empty(8, dtype=torch.float64).normal_(generator=g)
        u = torch.empty(8, dtype=torch.float64).normal_(generator=g)
        assert torch.equal(diffusion.guided_noise(c, u, 1.0), c)
        s = float(torch.empty(1).uniform_(-3, 3, generator=g))
        expect = u + s * (c - u)
        assert torch.equal(diffusion.guided_noise(c, u, s), expect)
    return "guidance linear; scale 1 bit-identical to conditional"


def check_losses() -> str:
    img = torch.rand(8, 8, 3, generator=torch_generator(4, "check-loss"), dtype=torch.float64)
    assert float(losses.render_loss(img, img, 0.0)) == 0.0
    off = img + 0.1
    assert abs(float(losses.render_loss(off, img, 0.0)) - 0.01) < 1e-12
    s = torch.full((8, 8), 1.0, dtype=torch.float64)
    m = np.ones((8, 8), dtype=bool)
    cl = losses.confidence_loss(off, img, s, m, 0.1)
    assert abs(float(cl) - 0.03) < 1e-12, "s=1 confidence loss is masked channel-sum MSE"
    assert losses.optimal_confidence(0.04, 0.1) == 1.0
    parts = losses.LossParts(l2=1.0, perc=1.0, diff=1.0, conf=1.0)
    assert losses.total_loss(parts, losses.LossConfig()) == 12.5
    return "loss formulas match hand values"


def check_sampler_law() -> str:
    model = _tiny_model()
    scene_pose = geometry.CameraPose(np.eye(3), np.array([0.0, 0.0, -3.0]),
                                     (16.0, 16.0), (8.0, 8.0), (16, 16))
    img = np.full((16, 16, 3), 0.5, dtype=np.float32)
    ctx = [geometry.PosedImage(img, scene_pose)]
    for tau, want in ((0.0, 1), (1.0, 1 + 8)):
        cfg = sampler.SamplerConfig(tau=tau, t_max=8, t_sample=2, seed=11)
        _, trace, _ = sampler.hybrid_sample(ctx, scene_pose, model, cfg)
        assert trace.backbone_calls == want, f"tau={tau}: {trace.backbone_calls} != {want}"
    return "call-count law holds at both threshold extremes"


def check_metrics() -> str:
    rng = np_generator(5, "check-metrics")
    a = rng.random((16, 16, 3))
    assert metrics.psnr(a, a) == metrics.PSNR_CAP
    assert abs(metrics.psnr(np.zeros((4, 4)), np.ones((4, 4)))) < 1e-12
    assert abs(metrics.ssim(a, a) - 1.0) < 1e-12
    return "psnr/ssim identity cases exact"


def check_optimizer() -> str:
    theta = torch.tensor([1.0, -2.0], dtype=torch.float64, requires_grad=True)
    opt = torch.optim.AdamW([theta], lr=0.1, betas=(0.9, 0.95), weight_decay=0.02, eps=1e-8)
    loss = 0.5 * (theta ** 2).sum()
    loss.backward()
    g = theta.detach().clone()
    expect = theta.detach() * (1 - 0.1 * 0.02)
    m_hat = (0.1 * g) / 0.1
    v_hat = (0.05 * g * g) / 0.05
    expect = expect - 0.1 * m_hat / (v_hat.sqrt() + 1e-8)
    opt.step()
    assert float((theta.detach() - expect).abs().max()) < 1e-12
    return "one optimizer step matches the closed-form update"


ALL_CHECKS = [
    check_plucker, check_codec, check_schedule, check_budget_and_cosine,
    check_cfg_identity, check_losses, check_sampler_law, check_metrics,
    check_optimizer,
]


def run_checks(verbose: bool = True) -> bool:
    ok = True
    for fn in ALL_CHECKS:
        name = fn.__name__.removeprefix("check_")
        try:
            detail = fn()
            if verbose:
                print(f"ok   {name}: {detail}")
        except Exception as e:  # noqa: BLE001 - report and keep going
            ok = False
            print(f"FAIL {name}: {e}")
    return ok
