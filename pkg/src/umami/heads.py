"""Per-token output heads.

Both heads act on each token latent independently:
  * DeterministicHead regresses the RGB patch content (tanh-bounded) plus a
    per-pixel confidence score (sigmoid, clamped away from zero).
  * DiffusionHead is an adaptively-modulated MLP denoiser that predicts the
    noise added to an RGB patch token, conditioned on the latent and a
    sinusoidal timestep embedding.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn
import torch.nn.functional as F

CONF_FLOOR = 1e-6


class HeadError(ValueError):
    pass


@dataclass
class ConfidenceMap:
    """Pixel scores assembled to image shape plus per-patch minima."""

    pixel_scores: np.ndarray   # (H, W) in (CONF_FLOOR, 1]
    patch_scores: np.ndarray   # (T,) min over each patch's pixels

    @staticmethod
    def from_token_scores(
        conf_tokens: torch.Tensor, resolution: tuple[int, int], patch_size: int
    ) -> "ConfidenceMap":
        w, h = resolution
        p = patch_size
        c = conf_tokens.detach().cpu().numpy()
        patch = c.min(axis=1)
        pixels = c.reshape(h // p, w // p, p, p).transpose(0, 2, 1, 3).reshape(h, w)
        return ConfidenceMap(pixel_scores=pixels, patch_scores=patch)


def patch_confidence(conf_tokens: torch.Tensor) -> torch.Tensor:
    """Patch score = minimum confidence among the patch's pixels."""
    return conf_tokens.min(dim=1).values


def conf_pixel_map(
    conf_tokens: torch.Tensor, resolution: tuple[int, int], patch_size: int
) -> torch.Tensor:
    """Assemble per-token pixel scores (T, P*P) to an (H, W) map; differentiable."""
    w, h = resolution
    p = patch_size
    x = conf_tokens.reshape(h // p, w // p, p, p)
    return x.permute(0, 2, 1, 3).reshape(h, w)


def timestep_table(t_train: int, dim: int, dtype=torch.float64) -> torch.Tensor:
    """Sinusoidal embeddings for timesteps 0..t_train-1, (t_train, dim)."""
    return sinusoidal_embedding(torch.arange(t_train), dim, dtype=dtype)


def sinusoidal_embedding(t: torch.Tensor, dim: int, dtype=torch.float64) -> torch.Tensor:
    half = dim // 2
    freqs = torch.exp(
        -math.log(10000.0) * torch.arange(half, dtype=dtype) / half
    )
    args = t.to(dtype)[:, None] * freqs[None, :]
    emb = torch.cat([torch.cos(args), torch.sin(args)], dim=-1)
    if dim % 2:
        emb = torch.cat([emb, torch.zeros_like(emb[:, :1])], dim=-1)
    return emb


class DeterministicHead(nn.Module):
    """z -> (rgb token in [-1,1], per-pixel confidence in (CONF_FLOOR, 1])."""

    def __init__(self, hidden_dim: int, patch_size: int, width: int, dtype=torch.float64):
        super().__init__()
        self.patch_size = patch_size
        self.rgb_dim = 3 * patch_size * patch_size
        self.conf_dim = patch_size * patch_size
        self.fc1 = nn.Linear(hidden_dim, width, dtype=dtype)
        self.fc2 = nn.Linear(width, width, dtype=dtype)
        self.fc3 = nn.Linear(width, self.rgb_dim + self.conf_dim, dtype=dtype)

    def forward(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        h = F.silu(self.fc1(z))
        h = F.silu(self.fc2(h))
        out = self.fc3(h)
        rgb = torch.tanh(out[:, : self.rgb_dim])
        conf = torch.sigmoid(out[:, self.rgb_dim:]).clamp(min=CONF_FLOOR)
        return rgb, conf


def _modulate(x, shift, scale):
    return x * (1 + scale) + shift


class DenoiserBlock(nn.Module):
    def __init__(self, width: int, dtype=torch.float64):
        super().__init__()
        self.norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6, dtype=dtype)
        self.fc1 = nn.Linear(width, width, dtype=dtype)
        self.fc2 = nn.Linear(width, width, dtype=dtype)
        self.ada = nn.Linear(width, 3 * width, dtype=dtype)

    def forward(self, x, cond):
        shift, scale, gate = self.ada(F.silu(cond)).chunk(3, dim=-1)
        h = _modulate(self.norm(x), shift, scale)
        h = self.fc2(F.silu(self.fc1(h)))
        return x + gate * h


class DiffusionHead(nn.Module):
    """Noise prediction eps_hat(x_t | t, cond) for a single token.

    `cond` is the backbone latent (or a learned null latent for the
    guidance-free branch; the substitution happens in the model wrapper).
    """

    def __init__(
        self,
        token_dim: int,
        hidden_dim: int,
        width: int,
        depth: int = 3,
        t_train: int = 1000,
        dtype=torch.float64,
    ):
        super().__init__()
        self.token_dim = token_dim
        self.t_train = t_train
        self.input_proj = nn.Linear(token_dim, width, dtype=dtype)
        self.cond_proj = nn.Linear(hidden_dim, width, dtype=dtype)
        self.time_fc1 = nn.Linear(width, width, dtype=dtype)
        self.time_fc2 = nn.Linear(width, width, dtype=dtype)
        self.register_buffer(
            "time_table", timestep_table(t_train, width, dtype=dtype), persistent=False
        )
        self.blocks = []
        for i in range(depth):
            block = DenoiserBlock(width, dtype=dtype)
            self.add_module(f"block{i}", block)
            self.blocks.append(block)
        self.final_norm = nn.LayerNorm(width, elementwise_affine=False, eps=1e-6, dtype=dtype)
        self.final_ada = nn.Linear(width, 2 * width, dtype=dtype)
        self.final_proj = nn.Linear(width, token_dim, dtype=dtype)

    def forward(self, x_t: torch.Tensor, t: torch.Tensor, cond: torch.Tensor) -> torch.Tensor:
        if x_t.shape[-1] != self.token_dim:
            raise HeadError(f"token dim {x_t.shape[-1]} != {self.token_dim}")
        t = torch.as_tensor(t, dtype=torch.long)
        if t.ndim == 0:
            t = t[None]
        if bool((t < 0).any()) or bool((t >= self.t_train).any()):
            raise HeadError(f"timestep out of range [0, {self.t_train})")
        temb = self.time_fc2(F.silu(self.time_fc1(self.time_table[t])))
        c = temb + self.cond_proj(cond)
        h = self.input_proj(x_t)
        for block in self.blocks:
            h = block(h, c)
        shift, scale = self.final_ada(F.silu(c)).chunk(2, dim=-1)
        return self.final_proj(_modulate(self.final_norm(h), shift, scale))
