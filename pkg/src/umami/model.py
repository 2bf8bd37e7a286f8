"""The full hybrid model: backbone + two heads + learnable mask token.

Parameter initialization is fully explicit and driven by a caller-supplied
generator, so model construction is reproducible from a seed alone.
State-dict keys double as the checkpoint tensor names:
  backbone.input_proj.*, backbone.layer{i}.{norm|attn|mlp}.*,
  backbone.final_norm.*, backbone.out_proj.*,
  head.det.*, head.diff.*, head.null_latent, mask_token.embedding
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np
import torch
import torch.nn as nn

from .backbone import Backbone, BackboneConfig, ConfigError
from .diffusion import NoiseSchedule
from .heads import DeterministicHead, DiffusionHead
from .tokens import TokenSequence, concat_sequences


@dataclass
class ModelConfig:
    layers: int = 24
    hidden_dim: int = 768
    head_dim: int = 64
    qk_norm: bool = True
    mlp_ratio: float = 4.0
    patch_size: int = 8
    head_depth: int = 3
    head_width: int = 0         # 0 -> 2 * hidden_dim
    pos_embed: bool = False
    max_patches: int = 1024
    t_train: int = 1000

    def __post_init__(self):
        if self.patch_size < 1:
            raise ConfigError("patch_size must be >= 1")

    @property
    def token_dim(self) -> int:
        """Noise-space token dimension: the RGB patch content only."""
        return 3 * self.patch_size * self.patch_size

    @property
    def input_dim(self) -> int:
        return 9 * self.patch_size * self.patch_size

    @property
    def width(self) -> int:
        return self.head_width if self.head_width else 2 * self.hidden_dim

    def backbone_config(self) -> BackboneConfig:
        return BackboneConfig(
            layers=self.layers,
            hidden_dim=self.hidden_dim,
            head_dim=self.head_dim,
            qk_norm=self.qk_norm,
            input_dim=self.input_dim,
            mlp_ratio=self.mlp_ratio,
            pos_embed=self.pos_embed,
            max_patches=self.max_patches,
        )


class MaskToken(nn.Module):
    """One shared learnable embedding replacing the RGB part of masked tokens."""

    def __init__(self, rgb_dim: int, dtype=torch.float64):
        super().__init__()
        self.embedding = nn.Parameter(torch.zeros(rgb_dim, dtype=dtype))


class Heads(nn.Module):
    def __init__(self, cfg: ModelConfig, dtype=torch.float64):
        super().__init__()
        self.det = DeterministicHead(cfg.hidden_dim, cfg.patch_size, cfg.width, dtype=dtype)
        self.diff = DiffusionHead(
            cfg.token_dim, cfg.hidden_dim, cfg.width,
            depth=cfg.head_depth, t_train=cfg.t_train, dtype=dtype,
        )
        self.null_latent = nn.Parameter(torch.zeros(cfg.hidden_dim, dtype=dtype))


class HybridModel(nn.Module):
    def __init__(self, cfg: ModelConfig, generator: torch.Generator | None = None,
                 dtype=torch.float64):
        super().__init__()
        self.cfg = cfg
        self.dtype = dtype
        self.backbone = Backbone(cfg.backbone_config(), dtype=dtype)
        self.head = Heads(cfg, dtype=dtype)
        self.mask_token = MaskToken(cfg.token_dim, dtype=dtype)
        if generator is not None:
            self.init_parameters(generator)

    def init_parameters(self, generator: torch.Generator) -> None:
        """Deterministic init: N(0, 0.02) weights, zero biases, unit norm gains.

        The denoiser's modulation layers and final projection start at zero so
        the diffusion branch begins as an identity-like residual stack.
        """
        from .backbone import RMSNorm

        norm_params = set()
        zero_params = set()
        for mod_name, mod in self.named_modules():
            if isinstance(mod, RMSNorm):
                norm_params.add(f"{mod_name}.weight")
            elif mod_name.startswith("head.diff") and (
                mod_name.endswith(".ada") or mod_name.endswith("final_ada")
                or mod_name.endswith("final_proj")
            ):
                zero_params.update(f"{mod_name}.{n}" for n, _ in mod.named_parameters())
        for name, p in sorted(self.named_parameters(), key=lambda kv: kv[0]):
            with torch.no_grad():
                if name in norm_params:
                    p.fill_(1.0)
                elif name in zero_params or name.endswith(".bias"):
                    p.zero_()
                else:
                    p.copy_(torch.empty_like(p).normal_(0.0, 0.02, generator=generator))

    # --- core passes -----------------------------------------------------

    def encode(self, context: TokenSequence | None, target: TokenSequence) -> torch.Tensor:
        """Latents for the target positions, attending over context + target."""
        if context is not None:
            tokens = torch.cat([context.tokens, target.tokens])
            ids = np.concatenate([self._patch_ids(context), self._patch_ids(target)])
            n_ctx = len(context)
        else:
            tokens = target.tokens
            ids = self._patch_ids(target)
            n_ctx = 0
        patch_ids = torch.from_numpy(ids) if self.backbone.pos_embed is not None else None
        z = self.backbone(tokens.to(self.dtype), patch_ids)
        if not bool(torch.isfinite(z).all()):
            raise FloatingPointError("backbone produced non-finite latents")
        return z[n_ctx:]

    def _patch_ids(self, seq: TokenSequence) -> np.ndarray:
        cols = seq.resolution[0] // seq.patch_size
        return seq.patch_index[:, 0] * cols + seq.patch_index[:, 1]

    def predict_rgb_conf(self, z: torch.Tensor) -> tuple[torch.Tensor, torch.Tensor]:
        return self.head.det(z)

    def predict_noise(
        self,
        x_t: torch.Tensor,
        t: torch.Tensor,
        z: torch.Tensor | None = None,
        null_mask: torch.Tensor | None = None,
    ) -> torch.Tensor:
        """Denoiser call; null rows (or z=None) use the learned null latent."""
        n = x_t.shape[0]
        null = self.head.null_latent[None, :].expand(n, -1)
        if z is None:
            cond = null
        elif null_mask is None:
            cond = z
        else:
            cond = torch.where(null_mask[:, None], null, z)
        return self.head.diff(x_t, t, cond)

    def encode_views(
        self, context_views: list[TokenSequence], target_views: list[TokenSequence]
    ) -> tuple[TokenSequence, TokenSequence, torch.Tensor]:
        """Convenience: concat per-view sequences, encode, return z for targets."""
        context = concat_sequences(context_views) if context_views else None
        target = concat_sequences(target_views)
        return context, target, self.encode(context, target)

    def schedule(self, t_sample: int = 50) -> NoiseSchedule:
        return NoiseSchedule(t_train=self.cfg.t_train, t_sample=t_sample)


def count_parameters(cfg: ModelConfig) -> int:
    """Exact count of trainable scalars across backbone, heads, mask token."""
    model = HybridModel(cfg)
    return sum(p.numel() for p in model.parameters() if p.requires_grad)
