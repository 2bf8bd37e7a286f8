"""Shared test utilities: random poses, tiny models, small scenes."""

from __future__ import annotations

import numpy as np
import torch

from umami.geometry import CameraPose, PosedImage
from umami.model import HybridModel, ModelConfig
from umami.rng import np_generator, torch_generator


def random_rotation(rng: np.random.Generator) -> np.ndarray:
    axis = rng.normal(size=3)
    axis /= np.linalg.norm(axis)
    angle = rng.uniform(0, np.pi)
    k = np.array([
        [0, -axis[2], axis[1]],
        [axis[2], 0, -axis[0]],
        [-axis[1], axis[0], 0],
    ])
    return np.eye(3) + np.sin(angle) * k + (1 - np.cos(angle)) * (k @ k)


def random_pose(rng: np.random.Generator, resolution=(8, 8)) -> CameraPose:
    w, h = resolution
    return CameraPose(
        rotation=random_rotation(rng),
        translation=rng.normal(scale=2.0, size=3),
        focal=(float(rng.uniform(0.5, 3.0) * w), float(rng.uniform(0.5, 3.0) * h)),
        principal_point=(w / 2 + rng.uniform(-1, 1), h / 2 + rng.uniform(-1, 1)),
        resolution=resolution,
    )


def canonical_pose(resolution=(16, 16), distance=3.0) -> CameraPose:
    w, h = resolution
    return CameraPose(
        rotation=np.eye(3),
        translation=np.array([0.0, 0.0, -distance]),
        focal=(float(w), float(h)),
        principal_point=(w / 2, h / 2),
        resolution=resolution,
    )


def tiny_model_cfg(**kw) -> ModelConfig:
    base = dict(layers=2, hidden_dim=32, head_dim=16, patch_size=4,
                head_width=32, t_train=50, max_patches=16)
    base.update(kw)
    return ModelConfig(**base)


def tiny_model(seed: int = 0, randomize_all: bool = False, **kw) -> HybridModel:
    model = HybridModel(tiny_model_cfg(**kw), torch_generator(seed, "test-init"))
    if randomize_all:
        g = torch_generator(seed, "test-randomize")
        with torch.no_grad():
            for _, p in sorted(model.named_parameters(), key=lambda kv: kv[0]):
                p.copy_(torch.empty_like(p).normal_(0.0, 0.1, generator=g))
    return model


def random_view(rng: np.random.Generator, resolution=(16, 16)) -> PosedImage:
    w, h = resolution
    img = rng.random((h, w, 3)).astype(np.float32)
    return PosedImage(img, random_pose(rng, resolution))


def rel_err(a: np.ndarray, b: np.ndarray, floor: float = 1e-3) -> np.ndarray:
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    return np.abs(a - b) / np.maximum(floor, np.maximum(np.abs(a), np.abs(b)))


def finite_diff_gradcheck(params, loss_fn, step: float = 1e-4, floor: float = 1e-3):
    """Max relative error between autograd and central finite differences.

    Checks every element of every parameter; the relative error uses a small
    magnitude floor so near-zero gradient pairs compare in absolute terms.
    """
    import torch

    for p in params:
        p.grad = None
    loss = loss_fn()
    loss.backward()
    analytic = [p.grad.detach().clone() if p.grad is not None else torch.zeros_like(p)
                for p in params]
    worst = 0.0
    with torch.no_grad():
        for p, g in zip(params, analytic):
            flat = p.view(-1)
            gflat = g.view(-1)
            for i in range(flat.numel()):
                orig = float(flat[i])
                flat[i] = orig + step
                hi = float(loss_fn())
                flat[i] = orig - step
                lo = float(loss_fn())
                flat[i] = orig
                fd = (hi - lo) / (2 * step)
                a = float(gflat[i])
                err = abs(a - fd) / max(floor, abs(a), abs(fd))
                worst = max(worst, err)
    return worst
