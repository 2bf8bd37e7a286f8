"""End-to-end training: mask sampling, joint losses, AdamW with warmup +
cosine decay, gradient clipping, and resume-exact checkpointing.

Every random draw is derived from (seed, purpose, step, example), so a run is
a pure function of (config, seed, dataset) and resuming from a checkpoint
reproduces the uninterrupted trajectory bit for bit.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
import torch

from .checkpoint import CheckpointError, load_checkpoint, save_checkpoint
from .dataset import NVSDataset, SceneData
from .diffusion import NoiseSchedule
from .geometry import plucker_grid
from .heads import conf_pixel_map, patch_confidence
from .losses import (
    DiffusionDraws,
    LossConfig,
    LossParts,
    PerceptualProxy,
    confidence_loss,
    diffusion_loss,
    make_diffusion_draws,
    render_loss,
    total_loss,
)
from .model import HybridModel, ModelConfig
from .rng import np_generator, torch_generator
from .tokens import TokenSequence, apply_mask, detokenize, expand_patch_mask, tokenize

log = logging.getLogger(__name__)

LOG_COLUMNS = ("step", "l2", "perc", "diff", "conf", "total")


class TrainingError(RuntimeError):
    pass


@dataclass
class TrainConfig:
    batch_size: int = 4
    lr: float = 2e-4
    beta1: float = 0.9
    beta2: float = 0.95
    weight_decay: float = 0.02
    grad_clip_norm: float = 3.0
    warmup_steps: int = 1000
    total_steps: int = 5000
    mask_ratio_min: float = 0.7
    context_views_min: int = 1
    context_views_max: int = 2
    target_views_min: int = 1
    target_views_max: int = 3
    seed: int = 0
    checkpoint_every: int = 0     # 0 -> final checkpoint only
    t_sample: int = 50            # sampling stride recorded alongside training

    def __post_init__(self):
        if not 0 < self.mask_ratio_min <= 1.0:
            raise TrainingError("mask_ratio_min must lie in (0, 1]")
        if self.warmup_steps > self.total_steps:
            raise TrainingError("warmup_steps must not exceed total_steps")
        if self.context_views_min < 1 or self.context_views_max < self.context_views_min:
            raise TrainingError("bad context view range")
        if self.target_views_min < 1 or self.target_views_max < self.target_views_min:
            raise TrainingError("bad target view range")


def lr_at(step: int, cfg: TrainConfig) -> float:
    """Linear 0 -> lr over warmup, then cosine lr -> 0 at total_steps."""
    if step <= cfg.warmup_steps:
        if cfg.warmup_steps == 0:
            return cfg.lr
        return cfg.lr * step / cfg.warmup_steps
    span = max(1, cfg.total_steps - cfg.warmup_steps)
    frac = (step - cfg.warmup_steps) / span
    return cfg.lr * 0.5 * (1.0 + math.cos(math.pi * min(frac, 1.0)))


def mask_from_ratio(n_tokens: int, ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Mask exactly ceil(ratio * n_tokens) uniformly chosen tokens."""
    k = math.ceil(ratio * n_tokens)
    mask = np.zeros(n_tokens, dtype=bool)
    if k:
        mask[rng.choice(n_tokens, size=min(k, n_tokens), replace=False)] = True
    return mask


def sample_mask(
    n_tokens: int, rng: np.random.Generator, ratio_range: tuple[float, float]
) -> np.ndarray:
    """Draw r uniform over ratio_range, then mask ceil(r * n) tokens."""
    if n_tokens < 1:
        raise TrainingError("n_tokens must be >= 1")
    lo, hi = ratio_range
    return mask_from_ratio(n_tokens, float(rng.uniform(lo, hi)), rng)


def clip_gradients(params: list[torch.Tensor], max_norm: float) -> float:
    """Scale all gradients so the global L2 norm is at most max_norm.

    Exact scaling (no epsilon fudge): a pre-clip norm of 2 * max_norm lands
    exactly on max_norm. Returns the pre-clip norm.
    """
    grads = [p.grad for p in params if p.grad is not None]
    if not grads:
        return 0.0
    total = math.sqrt(sum(float((g ** 2).sum()) for g in grads))
    if total > max_norm > 0:
        scale = max_norm / total
        with torch.no_grad():
            for g in grads:
                g.mul_(scale)
    return total


# --- data plumbing --------------------------------------------------------


@dataclass
class TrainExample:
    scene: int
    context: list[int]
    targets: list[int]


def draw_batch(dataset: NVSDataset, cfg: TrainConfig, rng: np.random.Generator) -> list[TrainExample]:
    batch = []
    for _ in range(cfg.batch_size):
        s = int(rng.integers(0, len(dataset.scenes)))
        scene = dataset.scenes[s]
        ctx_pool = scene.indices("context")
        n_ctx = int(rng.integers(cfg.context_views_min, cfg.context_views_max + 1))
        n_ctx = min(n_ctx, len(ctx_pool))
        context = sorted(int(i) for i in rng.choice(ctx_pool, size=n_ctx, replace=False))
        rest = [i for i in range(scene.n_views) if i not in context]
        n_tgt = int(rng.integers(cfg.target_views_min, cfg.target_views_max + 1))
        n_tgt = min(n_tgt, len(rest))
        targets = sorted(int(i) for i in rng.choice(rest, size=n_tgt, replace=False))
        batch.append(TrainExample(scene=s, context=context, targets=targets))
    return batch


class TokenCache:
    """Per-(scene, view) tokenization cache; sequences share the cached tensor."""

    def __init__(self, dataset: NVSDataset, patch_size: int):
        self.dataset = dataset
        self.patch_size = patch_size
        self._cache: dict[tuple[int, int, str], TokenSequence] = {}

    def get(self, scene: int, view: int, role: str) -> TokenSequence:
        key = (scene, view, role)
        if key not in self._cache:
            pv = self.dataset.scenes[scene].views[view]
            self._cache[key] = tokenize(pv, plucker_grid(pv.pose), self.patch_size, role=role)
        return self._cache[key]


@dataclass
class ExampleBatch:
    """One example's tensors plus its frozen randomness."""

    context_seqs: list[TokenSequence]
    target_seqs: list[TokenSequence]          # unmasked ground truth
    gt_images: list[torch.Tensor]             # (H, W, 3) in [0, 1], float64
    masks: list[np.ndarray]                   # per-view patch masks
    diff_draws: DiffusionDraws | None


def prepare_example(
    cache: TokenCache,
    ex: TrainExample,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    t_train: int,
    mask_rng: np.random.Generator,
    draw_rng: torch.Generator,
) -> ExampleBatch:
    scene: SceneData = cache.dataset.scenes[ex.scene]
    ctx = [cache.get(ex.scene, v, "context") for v in ex.context]
    tgt = [cache.get(ex.scene, v, "target") for v in ex.targets]
    gts = [
        torch.from_numpy(scene.views[v].image.astype(np.float64)) for v in ex.targets
    ]
    masks = [
        sample_mask(len(s), mask_rng, (cfg.mask_ratio_min, 1.0)) for s in tgt
    ]
    n_masked = int(sum(m.sum() for m in masks))
    draws = None
    if n_masked:
        draws = make_diffusion_draws(
            n_masked, tgt[0].rgb_dim, t_train, draw_rng,
            cond_drop_prob=loss_cfg.cond_drop_prob, n_draws=loss_cfg.diffusion_draws,
        )
    return ExampleBatch(ctx, tgt, gts, masks, draws)


def compute_example_loss(
    model: HybridModel,
    batch: ExampleBatch,
    loss_cfg: LossConfig,
    schedule: NoiseSchedule,
    proxy: PerceptualProxy | None,
) -> LossParts:
    """Joint losses for one example; pure given the frozen draws in `batch`."""
    p = model.cfg.patch_size
    masked = [
        apply_mask(seq, m, model.mask_token.embedding)
        for seq, m in zip(batch.target_seqs, batch.masks)
    ]
    context, target, z = model.encode_views(batch.context_seqs, masked)
    rgb_pred, conf_tokens = model.predict_rgb_conf(z)

    l2_terms, perc_terms = [], []
    conf_sum, conf_count = None, 0
    offset = 0
    for seq, gt, m in zip(batch.target_seqs, batch.gt_images, batch.masks):
        n = len(seq)
        res = seq.resolution
        pred_img = detokenize(rgb_pred[offset:offset + n], res, p)
        l2_terms.append(((pred_img - gt) ** 2).mean())
        if proxy is not None and loss_cfg.w_perc + loss_cfg.lambda_p > 0:
            perc_terms.append(proxy.distance(pred_img, gt))
        pixel_mask = expand_patch_mask(m, res, p)
        n_px = int(pixel_mask.sum())
        if n_px:
            scores = conf_pixel_map(conf_tokens[offset:offset + n], res, p)
            c = confidence_loss(pred_img, gt, scores, pixel_mask, loss_cfg.lambda_s)
            conf_sum = c * n_px if conf_sum is None else conf_sum + c * n_px
            conf_count += n_px
        offset += n

    zero = rgb_pred.new_zeros(())
    l2 = torch.stack(l2_terms).mean() if l2_terms else zero
    perc = torch.stack(perc_terms).mean() if perc_terms else zero
    conf = conf_sum / conf_count if conf_count else zero

    pooled_mask = np.concatenate(batch.masks)
    if batch.diff_draws is not None and pooled_mask.any():
        x0 = torch.cat([seq.rgb for seq in batch.target_seqs])
        scores = patch_confidence(conf_tokens)
        diff = diffusion_loss(
            x0, z, pooled_mask, scores, schedule, loss_cfg.lambda_d,
            model.predict_noise, draws=batch.diff_draws,
        )
    else:
        diff = zero
    return LossParts(l2=l2, perc=perc, diff=diff, conf=conf)


# --- checkpoint glue ------------------------------------------------------


def _optimizer_tensors(model: HybridModel, opt: torch.optim.AdamW) -> tuple[dict, int]:
    names = {id(p): n for n, p in model.named_parameters()}
    out = {}
    steps = set()
    for p in opt.param_groups[0]["params"]:
        state = opt.state.get(p)
        if not state:
            continue
        n = names[id(p)]
        out[f"opt.{n}.exp_avg"] = state["exp_avg"]
        out[f"opt.{n}.exp_avg_sq"] = state["exp_avg_sq"]
        steps.add(int(state["step"].item() if torch.is_tensor(state["step"]) else state["step"]))
    if len(steps) > 1:
        raise CheckpointError(f"optimizer step counters diverged: {steps}")
    return out, (steps.pop() if steps else 0)


def save_training_checkpoint(
    path: Path, model: HybridModel, opt: torch.optim.AdamW | None,
    step: int, config_echo: dict,
) -> None:
    tensors = {name: p for name, p in model.state_dict().items()}
    opt_step = 0
    if opt is not None:
        opt_tensors, opt_step = _optimizer_tensors(model, opt)
        tensors.update(opt_tensors)
    meta = {
        "step": step,
        "optimizer_step": opt_step,
        "rng": {"base_seed": config_echo.get("train", {}).get("seed", 0),
                "derivation": "per-(seed,purpose,step,example) streams"},
        "config": config_echo,
    }
    save_checkpoint(path, tensors, meta)


def load_model(path: Path, dtype=torch.float64) -> tuple[HybridModel, dict]:
    """Rebuild the model from a checkpoint's config echo and weights."""
    tensors, meta = load_checkpoint(path)
    mc = ModelConfig(**meta["config"]["model"])
    model = HybridModel(mc, dtype=dtype)
    state = {
        k: torch.from_numpy(v).to(dtype)
        for k, v in tensors.items() if not k.startswith("opt.")
    }
    model.load_state_dict(state)
    return model, meta


def _restore_optimizer(model: HybridModel, opt: torch.optim.AdamW,
                       tensors: dict, opt_step: int) -> None:
    for name, p in model.named_parameters():
        ea = tensors.get(f"opt.{name}.exp_avg")
        if ea is None:
            continue
        opt.state[p] = {
            "step": torch.tensor(float(opt_step)),
            "exp_avg": torch.from_numpy(tensors[f"opt.{name}.exp_avg"]).to(p.dtype),
            "exp_avg_sq": torch.from_numpy(tensors[f"opt.{name}.exp_avg_sq"]).to(p.dtype),
        }


# --- the loop -------------------------------------------------------------


@dataclass
class FitResult:
    checkpoint_path: Path
    log_path: Path
    steps_run: int
    last: dict = field(default_factory=dict)


def fit(
    dataset: NVSDataset,
    model_cfg: ModelConfig,
    cfg: TrainConfig,
    loss_cfg: LossConfig,
    out_dir: Path,
    config_echo: dict | None = None,
    resume: Path | None = None,
    use_perceptual: bool = True,
) -> FitResult:
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    echo = config_echo or {"model": vars(model_cfg), "train": vars(cfg), "loss": vars(loss_cfg)}
    schedule = NoiseSchedule(t_train=model_cfg.t_train, t_sample=cfg.t_sample)
    proxy = PerceptualProxy() if use_perceptual else None
    cache = TokenCache(dataset, model_cfg.patch_size)

    start_step = 0
    if resume is not None:
        model, meta = load_model(resume)
        tensors, _ = load_checkpoint(resume)
        opt = _make_optimizer(model, cfg)
        _restore_optimizer(model, opt, tensors, meta["optimizer_step"])
        start_step = int(meta["step"])
    else:
        model = HybridModel(model_cfg, torch_generator(cfg.seed, "init"))
        opt = _make_optimizer(model, cfg)

    params = [p for _, p in sorted(model.named_parameters(), key=lambda kv: kv[0])]
    log_path = out_dir / "train_log.csv"
    mode = "a" if resume is not None and log_path.exists() else "w"
    log_file = open(log_path, mode)
    if mode == "w":
        log_file.write(",".join(LOG_COLUMNS) + "\n")

    consecutive_bad = 0
    last = {}
    ckpt_path = out_dir / "ckpt_final.bin"
    try:
        for step in range(start_step + 1, cfg.total_steps + 1):
            lr = lr_at(step, cfg)
            for group in opt.param_groups:
                group["lr"] = lr
            batch = draw_batch(dataset, cfg, np_generator(cfg.seed, "batch", step))
            opt.zero_grad(set_to_none=True)
            parts_acc = []
            for j, ex in enumerate(batch):
                eb = prepare_example(
                    cache, ex, cfg, loss_cfg, model_cfg.t_train,
                    np_generator(cfg.seed, "mask", step, j),
                    torch_generator(cfg.seed, "diff", step, j),
                )
                parts_acc.append(compute_example_loss(model, eb, loss_cfg, schedule, proxy))
            n = len(parts_acc)
            parts = LossParts(
                l2=sum(p.l2 for p in parts_acc) / n,
                perc=sum(p.perc for p in parts_acc) / n,
                diff=sum(p.diff for p in parts_acc) / n,
                conf=sum(p.conf for p in parts_acc) / n,
            )
            loss = total_loss(parts, loss_cfg)
            if not bool(torch.isfinite(loss)):
                consecutive_bad += 1
                log.warning("non-finite loss at step %d (%d consecutive); step skipped",
                            step, consecutive_bad)
                if consecutive_bad >= 3:
                    raise TrainingError(f"3 consecutive non-finite losses ending at step {step}")
                continue
            consecutive_bad = 0
            loss.backward()
            clip_gradients(params, cfg.grad_clip_norm)
            opt.step()
            last = {
                "step": step,
                "l2": float(parts.l2.detach()), "perc": float(parts.perc.detach()),
                "diff": float(parts.diff.detach()), "conf": float(parts.conf.detach()),
                "total": float(loss.detach()),
            }
            log_file.write(",".join(repr(last[c]) if c != "step" else str(step)
                                    for c in LOG_COLUMNS) + "\n")
            if cfg.checkpoint_every and step % cfg.checkpoint_every == 0 and step < cfg.total_steps:
                save_training_checkpoint(
                    out_dir / f"ckpt_step{step:06d}.bin", model, opt, step, echo
                )
    finally:
        log_file.close()
    save_training_checkpoint(ckpt_path, model, opt, cfg.total_steps, echo)
    return FitResult(checkpoint_path=ckpt_path, log_path=log_path,
                     steps_run=cfg.total_steps - start_step, last=last)


def _make_optimizer(model: HybridModel, cfg: TrainConfig) -> torch.optim.AdamW:
    return torch.optim.AdamW(
        model.parameters(), lr=cfg.lr, betas=(cfg.beta1, cfg.beta2),
        weight_decay=cfg.weight_decay, eps=1e-8,
    )
