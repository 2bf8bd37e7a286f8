"""Bidirectional transformer over concatenated context + target patch tokens.

Pre-norm blocks with RMS normalization, optional QK normalization, SiLU MLPs,
and full all-to-all attention (no causal mask). Positional information comes
from the Plücker channels of the tokens themselves; an optional learned
per-patch-index embedding can be switched on for ablations.
"""

from __future__ import annotations

import math
from dataclasses import dataclass

import torch
import torch.nn as nn
import torch.nn.functional as F


class ConfigError(ValueError):
    pass


@dataclass
class BackboneConfig:
    layers: int = 24
    hidden_dim: int = 768
    head_dim: int = 64
    qk_norm: bool = True
    input_dim: int = 8 * 8 * 9
    mlp_ratio: float = 4.0
    pos_embed: bool = False      # learned per-patch-index embedding (ablation)
    max_patches: int = 1024

    def __post_init__(self):
        if self.hidden_dim % self.head_dim:
            raise ConfigError(
                f"hidden_dim {self.hidden_dim} not divisible by head_dim {self.head_dim}"
            )
        if self.layers < 0 or self.hidden_dim <= 0 or self.input_dim <= 0:
            raise ConfigError("layer/width settings must be positive")

    @property
    def n_heads(self) -> int:
        return self.hidden_dim // self.head_dim


class RMSNorm(nn.Module):
    def __init__(self, dim: int, eps: float = 1e-6, dtype=torch.float64):
        super().__init__()
        self.eps = eps
        self.weight = nn.Parameter(torch.ones(dim, dtype=dtype))

    def forward(self, x):
        scale = torch.rsqrt(x.pow(2).mean(dim=-1, keepdim=True) + self.eps)
        return x * scale * self.weight


class Attention(nn.Module):
    def __init__(self, cfg: BackboneConfig, dtype=torch.float64):
        super().__init__()
        self.n_heads = cfg.n_heads
        self.head_dim = cfg.head_dim
        self.qkv = nn.Linear(cfg.hidden_dim, 3 * cfg.hidden_dim, dtype=dtype)
        self.proj = nn.Linear(cfg.hidden_dim, cfg.hidden_dim, dtype=dtype)
        if cfg.qk_norm:
            self.q_norm = RMSNorm(cfg.head_dim, dtype=dtype)
            self.k_norm = RMSNorm(cfg.head_dim, dtype=dtype)
        else:
            self.q_norm = None
            self.k_norm = None

    def forward(self, x):
        s = x.shape[0]
        qkv = self.qkv(x).reshape(s, 3, self.n_heads, self.head_dim)
        q, k, v = qkv[:, 0], qkv[:, 1], qkv[:, 2]   # (S, nh, hd)
        if self.q_norm is not None:
            q = self.q_norm(q)
            k = self.k_norm(k)
        q = q.transpose(0, 1)                        # (nh, S, hd)
        k = k.transpose(0, 1)
        v = v.transpose(0, 1)
        attn = (q @ k.transpose(-2, -1)) / math.sqrt(self.head_dim)
        attn = F.softmax(attn, dim=-1)
        out = (attn @ v).transpose(0, 1).reshape(s, -1)
        return self.proj(out)


class Mlp(nn.Module):
    def __init__(self, cfg: BackboneConfig, dtype=torch.float64):
        super().__init__()
        inner = int(cfg.hidden_dim * cfg.mlp_ratio)
        self.fc1 = nn.Linear(cfg.hidden_dim, inner, dtype=dtype)
        self.fc2 = nn.Linear(inner, cfg.hidden_dim, dtype=dtype)

    def forward(self, x):
        return self.fc2(F.silu(self.fc1(x)))


class Block(nn.Module):
    def __init__(self, cfg: BackboneConfig, dtype=torch.float64):
        super().__init__()
        self.norm = nn.Module()
        self.norm.attn = RMSNorm(cfg.hidden_dim, dtype=dtype)
        self.norm.mlp = RMSNorm(cfg.hidden_dim, dtype=dtype)
        self.attn = Attention(cfg, dtype=dtype)
        self.mlp = Mlp(cfg, dtype=dtype)

    def forward(self, x):
        x = x + self.attn(self.norm.attn(x))
        x = x + self.mlp(self.norm.mlp(x))
        return x


class Backbone(nn.Module):
    """Maps a (S, input_dim) token sequence to (S, hidden_dim) latents."""

    def __init__(self, cfg: BackboneConfig, dtype=torch.float64):
        super().__init__()
        self.cfg = cfg
        self.input_proj = nn.Linear(cfg.input_dim, cfg.hidden_dim, dtype=dtype)
        self.blocks = []
        for i in range(cfg.layers):
            block = Block(cfg, dtype=dtype)
            self.add_module(f"layer{i}", block)   # checkpoint key: backbone.layer{i}.*
            self.blocks.append(block)
        self.final_norm = RMSNorm(cfg.hidden_dim, dtype=dtype)
        self.out_proj = nn.Linear(cfg.hidden_dim, cfg.hidden_dim, dtype=dtype)
        if cfg.pos_embed:
            self.pos_embed = nn.Parameter(
                torch.zeros(cfg.max_patches, cfg.hidden_dim, dtype=dtype)
            )
        else:
            self.pos_embed = None

    def forward(self, tokens: torch.Tensor, patch_ids: torch.Tensor | None = None):
        if tokens.ndim != 2 or tokens.shape[1] != self.cfg.input_dim:
            raise ConfigError(
                f"tokens have dim {tuple(tokens.shape)}, expected (S, {self.cfg.input_dim})"
            )
        h = self.input_proj(tokens)
        if self.pos_embed is not None:
            if patch_ids is None:
                raise ConfigError("pos_embed enabled but no patch ids supplied")
            h = h + self.pos_embed[patch_ids]
        for block in self.blocks:
            h = block(h)
        return self.out_proj(self.final_norm(h))
