"""Hybrid inference: one-shot deterministic fill + cosine-scheduled diffusion.

A first backbone pass predicts every target token deterministically along
with a confidence map. Patches whose confidence clears the threshold tau are
committed from that pass; the rest are generated by iterative per-token DDPM
sampling under a cosine unmasking schedule, re-encoding the partially filled
sequence before every unmasking step. The step budget scales linearly with
the stochastic fraction, so fully-confident targets cost a single call.
"""

from __future__ import annotations

import math
import time
from dataclasses import dataclass, field

import numpy as np
import torch

from .diffusion import NoiseSchedule, sample_tokens
from .geometry import CameraPose, PosedImage, plucker_grid
from .heads import patch_confidence
from .model import HybridModel
from .rng import np_generator, torch_generator
from .tokens import TokenSequence, apply_mask, concat_sequences, detokenize, to_image, tokenize


class SamplerError(ValueError):
    pass


@dataclass
class SamplerConfig:
    tau: float = 0.95
    t_max: int = 32
    cfg_scale: float = 2.0
    temperature: float = 0.9
    t_sample: int = 50
    seed: int = 0
    max_targets: int = 3

    def __post_init__(self):
        if not 0.0 <= self.tau <= 1.0:
            raise SamplerError("tau must lie in [0, 1]")
        if self.t_max < 1:
            raise SamplerError("t_max must be >= 1")


@dataclass
class SamplerTrace:
    backbone_calls: int = 0
    deterministic_token_count: int = 0
    stochastic_token_count: int = 0
    per_step_unmask: list[int] = field(default_factory=list)
    per_view_deterministic: list[int] = field(default_factory=list)
    wall_time_s: float = 0.0
    seed: int = 0

    def to_json_dict(self) -> dict:
        """Persisted fields only; wall time stays in memory (not reproducible)."""
        return {
            "backbone_calls": self.backbone_calls,
            "deterministic_token_count": self.deterministic_token_count,
            "stochastic_token_count": self.stochastic_token_count,
            "per_step_unmask": list(self.per_step_unmask),
            "per_view_deterministic": list(self.per_view_deterministic),
            "seed": self.seed,
        }


def step_budget(n_stochastic: int, n_total: int, t_max: int) -> int:
    """ceil(n_stochastic / n_total * t_max), exactly, in integer arithmetic."""
    if n_total <= 0:
        raise SamplerError("n_total must be positive")
    if not 0 <= n_stochastic <= n_total:
        raise SamplerError("need 0 <= n_stochastic <= n_total")
    if t_max < 1:
        raise SamplerError("t_max must be >= 1")
    return (n_stochastic * t_max + n_total - 1) // n_total


def cosine_unmask_counts(n: int, t_steps: int) -> list[int]:
    """Per-step unmask counts: few tokens early, most late, summing to n.

    Cumulative unmasked after step k is n - floor(n * cos(pi * k / (2 * t_steps)));
    per-step counts are the successive differences, so the final step absorbs
    all rounding and the total is exact.
    """
    if n < 1 or t_steps < 1:
        raise SamplerError("need n >= 1 and t_steps >= 1")
    cumulative = [n - math.floor(n * math.cos(math.pi * k / (2 * t_steps)))
                  for k in range(t_steps + 1)]
    return [cumulative[k] - cumulative[k - 1] for k in range(1, t_steps + 1)]


def masked_target_sequence(
    pose: CameraPose, patch_size: int, mask_embedding: torch.Tensor
) -> TokenSequence:
    """All-masked target tokens: mask embedding in RGB, pose rays in Plücker."""
    blank = np.zeros((pose.height, pose.width, 3), dtype=np.float32)
    seq = tokenize(blank, plucker_grid(pose), patch_size, role="target")
    return apply_mask(seq, np.ones(len(seq), dtype=bool), mask_embedding)


def partition_image(
    det_mask: np.ndarray, resolution: tuple[int, int], patch_size: int
) -> np.ndarray:
    """Two-color patch map: deterministic patches green, diffusion patches red."""
    w, h = resolution
    cols = w // patch_size
    img = np.zeros((h, w, 3), dtype=np.uint8)
    for i, is_det in enumerate(det_mask):
        r, c = divmod(i, cols)
        color = (64, 200, 64) if is_det else (210, 64, 64)
        img[r * patch_size:(r + 1) * patch_size, c * patch_size:(c + 1) * patch_size] = color
    return img


def multi_target_sample(
    context_views: list[PosedImage],
    target_poses: list[CameraPose],
    model: HybridModel,
    config: SamplerConfig,
    schedule: NoiseSchedule | None = None,
) -> tuple[list[np.ndarray], SamplerTrace, np.ndarray]:
    """Jointly synthesize 1..max_targets views sharing every backbone call.

    Returns (images, trace, per-token deterministic mask over the pooled
    target tokens). The budget and cosine schedule are computed over the
    pooled token counts, so backbone_calls = 1 + step_budget(|stochastic|,
    |total|, t_max) regardless of how many targets are requested.
    """
    if not 1 <= len(target_poses) <= config.max_targets:
        raise SamplerError(
            f"got {len(target_poses)} target poses, limit is {config.max_targets}"
        )
    if schedule is None:
        schedule = model.schedule(config.t_sample)
    t0 = time.perf_counter()
    p = model.cfg.patch_size
    mask_emb = model.mask_token.embedding.detach()
    context = concat_sequences(
        [tokenize(v, plucker_grid(v.pose), p, role="context") for v in context_views]
    ) if context_views else None
    per_view = [masked_target_sequence(pose, p, mask_emb) for pose in target_poses]
    view_lens = [len(s) for s in per_view]
    target = concat_sequences(per_view)
    n_total = len(target)
    trace = SamplerTrace(seed=config.seed)
    write_count = np.zeros(n_total, dtype=np.int64)

    with torch.no_grad():
        z = model.encode(context, target)
        trace.backbone_calls += 1
        rgb_pred, conf = model.predict_rgb_conf(z)
        scores = patch_confidence(conf).cpu().numpy()
        det_mask = scores >= config.tau      # ties go to the deterministic side
        det_idx = np.nonzero(det_mask)[0]
        sto_idx = np.nonzero(~det_mask)[0]
        trace.deterministic_token_count = int(det_idx.size)
        trace.stochastic_token_count = int(sto_idx.size)
        starts = np.cumsum([0] + view_lens)
        trace.per_view_deterministic = [
            int(det_mask[starts[i]:starts[i + 1]].sum()) for i in range(len(view_lens))
        ]
        if det_idx.size:
            sel = torch.from_numpy(det_idx)
            target.tokens[sel, : target.rgb_dim] = rgb_pred[sel]
            target.mask_flag[det_idx] = False
            write_count[det_idx] += 1

        t_steps = step_budget(int(sto_idx.size), n_total, config.t_max)
        counts = cosine_unmask_counts(int(sto_idx.size), t_steps) if sto_idx.size else []
        for k, count in enumerate(counts, start=1):
            z = model.encode(context, target)
            trace.backbone_calls += 1
            trace.per_step_unmask.append(int(count))
            if count == 0:
                continue
            remaining = np.nonzero(target.mask_flag)[0]
            pick = np_generator(config.seed, "select", k).choice(
                remaining, size=count, replace=False
            )
            pick = np.sort(pick)
            sel = torch.from_numpy(pick)
            z_sel = z[sel]

            def denoise(x_t, t, _z=z_sel):
                t_vec = torch.full((x_t.shape[0],), t, dtype=torch.long)
                eps_cond = model.predict_noise(x_t, t_vec, _z)
                if config.cfg_scale == 1.0:
                    return eps_cond, None
                return eps_cond, model.predict_noise(x_t, t_vec, None)

            def noise(label, _pick=pick):
                rows = [
                    torch.empty(model.cfg.token_dim, dtype=model.dtype).normal_(
                        generator=torch_generator(config.seed, "ddpm", int(i), str(label))
                    )
                    for i in _pick
                ]
                return torch.stack(rows)

            x0 = sample_tokens(denoise, noise, schedule, config.cfg_scale, config.temperature)
            target.tokens[sel, : target.rgb_dim] = x0
            target.mask_flag[pick] = False
            write_count[pick] += 1

    if bool(target.mask_flag.any()):
        raise SamplerError("sampling finished with masked tokens remaining")
    if not np.all(write_count == 1):
        raise SamplerError("token write counters are not all exactly one")
    images = []
    for i, pose in enumerate(target_poses):
        sl = slice(starts[i], starts[i + 1])
        images.append(
            to_image(detokenize(target.tokens[sl], pose.resolution, p))
        )
    trace.wall_time_s = time.perf_counter() - t0
    return images, trace, det_mask


def hybrid_sample(
    context_views: list[PosedImage],
    target_pose: CameraPose,
    model: HybridModel,
    config: SamplerConfig,
    schedule: NoiseSchedule | None = None,
) -> tuple[np.ndarray, SamplerTrace, np.ndarray]:
    """Single-target convenience wrapper over multi_target_sample."""
    images, trace, det_mask = multi_target_sample(
        context_views, [target_pose], model, config, schedule=schedule
    )
    return images[0], trace, det_mask
