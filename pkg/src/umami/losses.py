"""Training objectives: photometric, confidence-aware, and denoising losses.

The perceptual term is a frozen, seed-pinned random convolutional feature
pyramid (no pretrained weights enter the build); its feature-space MSE is a
stand-in for a pretrained perceptual network and is labeled as such wherever
it is reported.
"""

from __future__ import annotations

import logging
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F

from .diffusion import NoiseSchedule, forward_noise_batch
from .rng import torch_generator

log = logging.getLogger(__name__)

PROXY_SEED = 90210  # pins the random feature pyramid; never change casually


class LossError(ValueError):
    pass


@dataclass
class LossConfig:
    lambda_p: float = 0.5        # perceptual weight inside the render loss
    lambda_s: float = 0.1        # confidence regularizer (non-default-free; see docs)
    lambda_d: float = 0.25       # diffusion-weighting floor
    w_l2: float = 1.0
    w_perc: float = 0.5
    w_diff: float = 10.0
    w_conf: float = 1.0
    cond_drop_prob: float = 0.1  # null-conditioning rate for the denoiser
    diffusion_draws: int = 1     # (eps, t) draws per masked token per step

    def __post_init__(self):
        for name in ("lambda_p", "lambda_s", "w_l2", "w_perc", "w_diff", "w_conf"):
            if getattr(self, name) < 0:
                raise LossError(f"{name} must be >= 0")
        if not 0 < self.lambda_d <= 1:
            raise LossError("lambda_d must lie in (0, 1]")
        if self.diffusion_draws < 1:
            raise LossError("diffusion_draws must be >= 1")


class PerceptualProxy:
    """Three-level random conv pyramid, frozen at construction from PROXY_SEED.

    distance(a, b) = mean over levels of feature-map MSE. Differentiable in
    its inputs; the weights never train.
    """

    CHANNELS = (3, 8, 16, 32)
    STRIDES = (1, 2, 2)

    def __init__(self, seed: int = PROXY_SEED, dtype=torch.float64):
        g = torch_generator(seed, "perceptual-proxy")
        self.weights = []
        self.biases = []
        for i, (cin, cout) in enumerate(zip(self.CHANNELS[:-1], self.CHANNELS[1:])):
            w = torch.empty(cout, cin, 3, 3, dtype=dtype)
            w.normal_(0.0, 1.0 / np.sqrt(cin * 9), generator=g)
            b = torch.empty(cout, dtype=dtype)
            b.normal_(0.0, 0.1, generator=g)
            self.weights.append(w)
            self.biases.append(b)

    def features(self, img: torch.Tensor) -> list[torch.Tensor]:
        """img: (H, W, 3) in [0, 1] -> list of (C, H', W') feature maps."""
        x = img.permute(2, 0, 1)[None]
        feats = []
        for w, b, stride in zip(self.weights, self.biases, self.STRIDES):
            x = torch.tanh(F.conv2d(x, w.to(img.dtype), b.to(img.dtype), stride=stride, padding=1))
            feats.append(x[0])
        return feats

    def distance(self, a: torch.Tensor, b: torch.Tensor) -> torch.Tensor:
        fa = self.features(a)
        fb = self.features(b)
        return sum(((x - y) ** 2).mean() for x, y in zip(fa, fb)) / len(fa)


def render_loss(
    pred_image: torch.Tensor,
    gt_image: torch.Tensor,
    lambda_p: float,
    proxy: PerceptualProxy | None = None,
) -> torch.Tensor:
    """Full-image MSE plus weighted perceptual-proxy distance."""
    if pred_image.shape != gt_image.shape:
        raise LossError(f"image shapes differ: {tuple(pred_image.shape)} vs {tuple(gt_image.shape)}")
    mse = ((pred_image - gt_image) ** 2).mean()
    if lambda_p == 0 or proxy is None:
        return mse
    return mse + lambda_p * proxy.distance(pred_image, gt_image)


def confidence_loss(
    pred_image: torch.Tensor,
    gt_image: torch.Tensor,
    pixel_scores: torch.Tensor,
    pixel_mask: torch.Tensor | np.ndarray,
    lambda_s: float,
) -> torch.Tensor:
    """Mean over masked pixels of s * ||err||^2 - lambda_s * log s.

    ||err||^2 is the squared RGB error summed over channels at each pixel;
    the mask is the pixel-wise expansion of the patch mask.
    """
    if pred_image.shape != gt_image.shape:
        raise LossError("image shapes differ")
    if pixel_scores.shape != pred_image.shape[:2]:
        raise LossError("pixel scores must be (H, W)")
    if bool((pixel_scores <= 0).any()):
        raise LossError("pixel scores must be strictly positive")
    mask = torch.as_tensor(np.asarray(pixel_mask, dtype=bool))
    if not bool(mask.any()):
        log.warning("confidence loss over empty mask; returning 0")
        return pred_image.new_zeros(())
    err = ((pred_image - gt_image) ** 2).sum(dim=-1)
    term = pixel_scores * err - lambda_s * torch.log(pixel_scores)
    return term[mask].mean()


def optimal_confidence(sq_err: float, lambda_s: float) -> float:
    """1-D minimizer of s * e^2 - lambda_s * log s over s in (0, 1]."""
    if sq_err <= 0:
        return 1.0
    return min(lambda_s / sq_err, 1.0)


@dataclass
class DiffusionDraws:
    """Frozen randomness for one diffusion-loss evaluation (gradcheck-safe)."""

    t: torch.Tensor          # (M,) long
    eps: torch.Tensor        # (M, d)
    null_mask: torch.Tensor  # (M,) bool


def make_diffusion_draws(
    n_tokens: int,
    token_dim: int,
    t_train: int,
    generator: torch.Generator,
    cond_drop_prob: float = 0.0,
    n_draws: int = 1,
    dtype=torch.float64,
) -> DiffusionDraws:
    m = n_tokens * n_draws
    t = torch.randint(0, t_train, (m,), generator=generator)
    eps = torch.empty(m, token_dim, dtype=dtype).normal_(generator=generator)
    null = torch.rand(m, generator=generator) < cond_drop_prob
    return DiffusionDraws(t=t, eps=eps, null_mask=null)


def diffusion_loss(
    tokens_x0: torch.Tensor,
    z: torch.Tensor,
    mask: np.ndarray | torch.Tensor,
    patch_scores: torch.Tensor,
    schedule: NoiseSchedule,
    lambda_d: float,
    predict_noise,
    draws: DiffusionDraws | None = None,
    rng: torch.Generator | None = None,
    cond_drop_prob: float = 0.0,
    n_draws: int = 1,
) -> torch.Tensor:
    """Confidence-weighted denoising loss over the masked tokens.

    Per masked token i (repeated n_draws times with fresh (eps, t)):
        w_i * mean_d((eps - eps_hat(x_t | t, z_i))^2),
        w_i = max(s_i, lambda_d) / lambda_d
    averaged over all rows. Unmasked tokens contribute nothing. The patch
    scores enter as constants (stop-gradient); timesteps are uniform over
    the schedule. Either `draws` or `rng` must be supplied.
    """
    mask = np.asarray(mask, dtype=bool)
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        log.warning("diffusion loss over empty mask; returning 0")
        return tokens_x0.new_zeros(())
    if draws is None:
        if rng is None:
            raise LossError("diffusion_loss needs either pinned draws or an rng")
        draws = make_diffusion_draws(
            idx.size, tokens_x0.shape[1], schedule.t_train, rng,
            cond_drop_prob=cond_drop_prob, n_draws=n_draws, dtype=tokens_x0.dtype,
        )
    n_rep = draws.t.shape[0] // idx.size
    if n_rep * idx.size != draws.t.shape[0]:
        raise LossError("draw count is not a multiple of the masked-token count")
    sel = torch.from_numpy(idx)
    x0 = tokens_x0[sel].repeat(n_rep, 1)
    z_m = z[sel].repeat(n_rep, 1)
    weights = (patch_scores.detach()[sel].clamp(min=lambda_d) / lambda_d).repeat(n_rep)
    x_t = forward_noise_batch(x0, draws.t, draws.eps, schedule)
    eps_hat = predict_noise(x_t, draws.t, z_m, draws.null_mask)
    sq = ((draws.eps - eps_hat) ** 2).mean(dim=1)
    return (weights * sq).mean()


@dataclass
class LossParts:
    l2: torch.Tensor | float
    perc: torch.Tensor | float
    diff: torch.Tensor | float
    conf: torch.Tensor | float


def total_loss(parts: LossParts, cfg: LossConfig):
    """Weighted sum of the four objectives."""
    return (
        cfg.w_l2 * parts.l2
        + cfg.w_perc * parts.perc
        + cfg.w_diff * parts.diff
        + cfg.w_conf * parts.conf
    )
