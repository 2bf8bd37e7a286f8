"""Image quality metrics and the evaluation/ablation harness.

PSNR on [0, 1] images with a +inf cap; SSIM on BT.601 luminance with a
Gaussian window over valid positions. The perceptual column in reports is
the frozen random-feature proxy distance (it is NOT a pretrained-network
metric and is labeled `perc_proxy` everywhere).
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np
import torch

from .dataset import NVSDataset
from .losses import PerceptualProxy
from .model import HybridModel
from .rng import derive_seed
from .sampler import SamplerConfig, hybrid_sample

PSNR_CAP = 99.0
LUMA = (0.299, 0.587, 0.114)   # BT.601


class MetricError(ValueError):
    pass


def psnr(pred: np.ndarray, gt: np.ndarray, cap: float = PSNR_CAP) -> float:
    pred = np.asarray(pred, dtype=np.float64)
    gt = np.asarray(gt, dtype=np.float64)
    if pred.shape != gt.shape:
        raise MetricError(f"shape mismatch: {pred.shape} vs {gt.shape}")
    mse = float(((pred - gt) ** 2).mean())
    if mse == 0.0:
        return cap
    return min(10.0 * math.log10(1.0 / mse), cap)


def _luminance(img: np.ndarray) -> np.ndarray:
    img = np.asarray(img, dtype=np.float64)
    if img.ndim == 3:
        return img[..., 0] * LUMA[0] + img[..., 1] * LUMA[1] + img[..., 2] * LUMA[2]
    return img


def gaussian_kernel(window: int, sigma: float) -> np.ndarray:
    ax = np.arange(window, dtype=np.float64) - (window - 1) / 2.0
    g = np.exp(-(ax ** 2) / (2.0 * sigma ** 2))
    k = np.outer(g, g)
    return k / k.sum()


def _local_mean(x: np.ndarray, kernel: np.ndarray) -> np.ndarray:
    w = kernel.shape[0]
    windows = np.lib.stride_tricks.sliding_window_view(x, (w, w))
    return np.tensordot(windows, kernel, axes=([2, 3], [0, 1]))


def ssim(
    pred: np.ndarray, gt: np.ndarray, window: int = 11, sigma: float = 1.5
) -> float:
    """Mean local SSIM over BT.601 luminance, Gaussian-weighted windows."""
    a = _luminance(pred)
    b = _luminance(gt)
    if a.shape != b.shape:
        raise MetricError(f"shape mismatch: {a.shape} vs {b.shape}")
    if min(a.shape) < window:
        raise MetricError(f"image {a.shape} smaller than SSIM window {window}")
    k = gaussian_kernel(window, sigma)
    mu_a = _local_mean(a, k)
    mu_b = _local_mean(b, k)
    var_a = _local_mean(a * a, k) - mu_a ** 2
    var_b = _local_mean(b * b, k) - mu_b ** 2
    cov = _local_mean(a * b, k) - mu_a * mu_b
    c1 = 0.01 ** 2
    c2 = 0.03 ** 2
    num = (2 * mu_a * mu_b + c1) * (2 * cov + c2)
    den = (mu_a ** 2 + mu_b ** 2 + c1) * (var_a + var_b + c2)
    return float((num / den).mean())


# --- evaluation harness ---------------------------------------------------


@dataclass
class EvalRow:
    scene: int
    view: int
    psnr: float
    ssim: float
    perc_proxy: float
    backbone_calls: int
    deter_tokens: int
    stochastic_tokens: int
    wall_time_s: float


@dataclass
class EvalReport:
    rows: list[EvalRow] = field(default_factory=list)
    context_count: int = 0
    split: str = ""
    tau: float = 0.0

    def mean(self, attr: str) -> float:
        if not self.rows:
            return float("nan")
        return sum(getattr(r, attr) for r in self.rows) / len(self.rows)

    def to_json_dict(self) -> dict:
        return {
            "split": self.split,
            "context_count": self.context_count,
            "tau": self.tau,
            "n_images": len(self.rows),
            "mean_psnr": self.mean("psnr"),
            "mean_ssim": self.mean("ssim"),
            "mean_perc_proxy": self.mean("perc_proxy"),
            "mean_backbone_calls": self.mean("backbone_calls"),
            "mean_deter_tokens": self.mean("deter_tokens"),
            "rows": [
                {k: getattr(r, k) for k in
                 ("scene", "view", "psnr", "ssim", "perc_proxy",
                  "backbone_calls", "deter_tokens", "stochastic_tokens")}
                for r in self.rows
            ],
        }


def evaluate(
    model: HybridModel,
    dataset: NVSDataset,
    split: str,
    config: SamplerConfig,
    context_count: int = 2,
    targets_per_scene: int = 2,
    seed: int = 0,
    proxy: PerceptualProxy | None = None,
) -> EvalReport:
    """Hybrid-sample every eval target and score it against ground truth."""
    if split not in ("target-interp", "target-extra"):
        raise MetricError(f"split must be target-interp or target-extra, got {split!r}")
    proxy = proxy or PerceptualProxy()
    report = EvalReport(context_count=context_count, split=split, tau=config.tau)
    for si, scene in enumerate(dataset.scenes):
        ctx_idx = scene.indices("context")[:context_count]
        if not ctx_idx:
            continue
        context = [scene.views[i] for i in ctx_idx]
        for vi in scene.indices(split)[:targets_per_scene]:
            run_cfg = SamplerConfig(
                tau=config.tau, t_max=config.t_max, cfg_scale=config.cfg_scale,
                temperature=config.temperature, t_sample=config.t_sample,
                seed=derive_seed(seed, "eval", si, vi),
                max_targets=config.max_targets,
            )
            img, trace, _ = hybrid_sample(context, scene.views[vi].pose, model, run_cfg)
            gt = scene.views[vi].image
            d = float(proxy.distance(
                torch.from_numpy(img.astype(np.float64)),
                torch.from_numpy(gt.astype(np.float64)),
            ))
            report.rows.append(EvalRow(
                scene=si, view=vi,
                psnr=psnr(img, gt), ssim=ssim(img, gt), perc_proxy=d,
                backbone_calls=trace.backbone_calls,
                deter_tokens=trace.deterministic_token_count,
                stochastic_tokens=trace.stochastic_token_count,
                wall_time_s=trace.wall_time_s,
            ))
    return report


TAU_CSV_COLUMNS = ("tau", "mean_backbone_calls", "mean_deter_tokens",
                   "mean_psnr", "mean_ssim", "mean_perc_proxy")
CONTEXT_CSV_COLUMNS = ("context_views", "mean_deter_tokens", "mean_backbone_calls",
                       "mean_psnr", "mean_ssim", "mean_perc_proxy")


def ablate_tau(
    model: HybridModel,
    dataset: NVSDataset,
    taus: list[float],
    config: SamplerConfig,
    split: str = "target-interp",
    context_count: int = 2,
    targets_per_scene: int = 1,
    seed: int = 0,
) -> tuple[list[dict], list[EvalReport]]:
    """Threshold sweep: quality vs. backbone calls, one row per tau."""
    rows, reports = [], []
    proxy = PerceptualProxy()
    for tau in taus:
        cfg = SamplerConfig(
            tau=float(tau), t_max=config.t_max, cfg_scale=config.cfg_scale,
            temperature=config.temperature, t_sample=config.t_sample,
            seed=config.seed, max_targets=config.max_targets,
        )
        rep = evaluate(model, dataset, split, cfg, context_count=context_count,
                       targets_per_scene=targets_per_scene, seed=seed, proxy=proxy)
        rows.append({
            "tau": float(tau),
            "mean_backbone_calls": rep.mean("backbone_calls"),
            "mean_deter_tokens": rep.mean("deter_tokens"),
            "mean_psnr": rep.mean("psnr"),
            "mean_ssim": rep.mean("ssim"),
            "mean_perc_proxy": rep.mean("perc_proxy"),
        })
        reports.append(rep)
    return rows, reports


def ablate_context(
    model: HybridModel,
    dataset: NVSDataset,
    counts: list[int],
    config: SamplerConfig,
    split: str = "target-interp",
    targets_per_scene: int = 1,
    seed: int = 0,
) -> tuple[list[dict], list[EvalReport]]:
    """Context-view sweep: deterministic-token share vs. call count per count."""
    rows, reports = [], []
    proxy = PerceptualProxy()
    for nc in counts:
        rep = evaluate(model, dataset, split, config, context_count=int(nc),
                       targets_per_scene=targets_per_scene, seed=seed, proxy=proxy)
        rows.append({
            "context_views": int(nc),
            "mean_deter_tokens": rep.mean("deter_tokens"),
            "mean_backbone_calls": rep.mean("backbone_calls"),
            "mean_psnr": rep.mean("psnr"),
            "mean_ssim": rep.mean("ssim"),
            "mean_perc_proxy": rep.mean("perc_proxy"),
        })
        reports.append(rep)
    return rows, reports


def write_csv(path, columns: tuple[str, ...], rows: list[dict]) -> None:
    with open(path, "w") as f:
        f.write(",".join(columns) + "\n")
        for row in rows:
            f.write(",".join(_fmt(row[c]) for c in columns) + "\n")


def _fmt(v) -> str:
    if isinstance(v, float):
        return repr(v)
    return str(v)
