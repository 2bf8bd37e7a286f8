"""Single entry point: dataset generation, training, sampling, evaluation,
ablation sweeps, and the fast self-check.

All artifact-writing subcommands echo the effective merged config into the
run directory and write a trace.json describing the run. Run directories are
append-only: rerunning into a non-empty directory requires --force. Wall
clock timings are printed to the console but never persisted, so identical
seeded invocations produce byte-identical artifacts.
"""

from __future__ import annotations

import argparse
import json
import sys
from pathlib import Path

import numpy as np

from . import checks, metrics
from .config import (
    RunConfig,
    load_run_config,
    parse_dotted_overrides,
    write_effective_config,
)
from .dataset import load_dataset, make_dataset, save_image
from .sampler import hybrid_sample, partition_image
from .trainer import fit, load_model


class CLIError(RuntimeError):
    pass


def _prepare_out_dir(path: str, force: bool) -> Path:
    out = Path(path)
    if out.exists() and any(out.iterdir()) and not force:
        raise CLIError(
            f"output directory {out} is not empty; run dirs are append-only "
            f"(pick a new directory or pass --force)"
        )
    out.mkdir(parents=True, exist_ok=True)
    return out


def _write_json(path: Path, obj) -> None:
    path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")


def _common_args(p: argparse.ArgumentParser, with_out: bool = True) -> None:
    p.add_argument("--config", type=str, default=None, help="config file (sectioned key = value)")
    p.add_argument("--set", action="append", default=[], metavar="SECTION.KEY=VALUE",
                   help="override a single config value (repeatable)")
    p.add_argument("--seed", type=int, default=None, help="override all seeds")
    if with_out:
        p.add_argument("--out", type=str, required=True, help="run directory")
        p.add_argument("--force", action="store_true", help="allow writing into a non-empty directory")


def _load_cfg(args) -> RunConfig:
    cfg = load_run_config(args.config, parse_dotted_overrides(args.set))
    if getattr(args, "seed", None) is not None:
        cfg.set_seed(args.seed)
    return cfg


def build_parser() -> argparse.ArgumentParser:
    ap = argparse.ArgumentParser(prog="umami", description=__doc__)
    sub = ap.add_subparsers(dest="command", required=True)

    p = sub.add_parser("gen-data", help="generate a synthetic posed multi-view dataset")
    _common_args(p)
    p.add_argument("--scenes", type=int, default=None)
    p.add_argument("--views", type=int, default=None)

    p = sub.add_parser("train", help="train a model")
    _common_args(p)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--resume", type=str, default=None)

    p = sub.add_parser("sample", help="synthesize one novel view from a checkpoint")
    _common_args(p)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--scene", type=int, default=0)
    p.add_argument("--pose-index", type=int, required=True, help="target view index within the scene")
    p.add_argument("--context-count", type=int, default=2)
    p.add_argument("--tau", type=float, default=None)
    p.add_argument("--partition-viz", action="store_true",
                   help="also write the deterministic/diffusion patch map")

    p = sub.add_parser("eval", help="score hybrid samples against ground truth")
    _common_args(p)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--split", choices=["interp", "extra"], required=True)
    p.add_argument("--context-count", type=int, default=2)
    p.add_argument("--targets-per-scene", type=int, default=2)

    p = sub.add_parser("ablate-tau", help="confidence-threshold sweep")
    _common_args(p)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--taus", type=str, default="0,0.5,0.8,0.9,0.95,1")
    p.add_argument("--context-count", type=int, default=2)

    p = sub.add_parser("ablate-context", help="context-view-count sweep")
    _common_args(p)
    p.add_argument("--ckpt", type=str, required=True)
    p.add_argument("--data", type=str, required=True)
    p.add_argument("--context-counts", type=str, default="1,2")

    p = sub.add_parser("check", help="run the fast invariant self-check suite")
    _common_args(p, with_out=False)
    return ap


def cmd_gen_data(args) -> int:
    cfg = _load_cfg(args)
    if args.scenes is not None:
        cfg.data.scenes = args.scenes
    if args.views is not None:
        cfg.data.views_per_scene = args.views
    out = _prepare_out_dir(args.out, args.force)
    make_dataset(out, cfg.data.scenes, cfg.data.views_per_scene,
                 (cfg.data.width, cfg.data.height), cfg.train.seed)
    write_effective_config(out, cfg)
    _write_json(out / "trace.json", {
        "subcommand": "gen-data", "seed": cfg.train.seed,
        "scenes": cfg.data.scenes, "views_per_scene": cfg.data.views_per_scene,
    })
    print(f"wrote {cfg.data.scenes} scenes to {out}")
    return 0


def cmd_train(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out_dir(args.out, args.force or args.resume is not None)
    dataset = load_dataset(Path(args.data))
    write_effective_config(out, cfg)
    result = fit(dataset, cfg.model, cfg.train, cfg.loss, out,
                 config_echo=cfg.to_dict(),
                 resume=Path(args.resume) if args.resume else None)
    _write_json(out / "trace.json", {
        "subcommand": "train", "seed": cfg.train.seed,
        "steps": cfg.train.total_steps,
        "checkpoint": result.checkpoint_path.name,
        "final_losses": {k: v for k, v in result.last.items() if k != "step"},
    })
    print(f"trained to step {cfg.train.total_steps}; checkpoint {result.checkpoint_path}")
    return 0


def cmd_sample(args) -> int:
    cfg = _load_cfg(args)
    if args.tau is not None:
        cfg.sampler.tau = args.tau
    out = _prepare_out_dir(args.out, args.force)
    model, _ = load_model(Path(args.ckpt))
    dataset = load_dataset(Path(args.data))
    scene = dataset.scenes[args.scene]
    ctx_idx = scene.indices("context")[: args.context_count]
    if not ctx_idx:
        raise CLIError(f"scene {args.scene} has no context-tagged views")
    context = [scene.views[i] for i in ctx_idx]
    target_pose = scene.views[args.pose_index].pose
    image, trace, det_mask = hybrid_sample(context, target_pose, model, cfg.sampler)
    save_image(out / "image.png", image)
    if args.partition_viz:
        viz = partition_image(det_mask, target_pose.resolution, model.cfg.patch_size)
        save_image(out / "partition.png", viz.astype(np.float32) / np.float32(255.0))
    write_effective_config(out, cfg)
    _write_json(out / "trace.json", {
        "subcommand": "sample", **trace.to_json_dict(),
        "scene": args.scene, "pose_index": args.pose_index,
        "context_views": [int(i) for i in ctx_idx],
        "config": cfg.to_dict(),
    })
    print(f"sampled view in {trace.wall_time_s:.2f}s "
          f"({trace.backbone_calls} backbone calls) -> {out / 'image.png'}")
    return 0


def cmd_eval(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out_dir(args.out, args.force)
    model, _ = load_model(Path(args.ckpt))
    dataset = load_dataset(Path(args.data))
    split = {"interp": "target-interp", "extra": "target-extra"}[args.split]
    report = metrics.evaluate(
        model, dataset, split, cfg.sampler,
        context_count=args.context_count,
        targets_per_scene=args.targets_per_scene,
        seed=cfg.sampler.seed,
    )
    write_effective_config(out, cfg)
    _write_json(out / "report.json", report.to_json_dict())
    _write_json(out / "trace.json", {
        "subcommand": "eval", "seed": cfg.sampler.seed, "split": args.split,
        "n_images": len(report.rows),
    })
    mean_t = report.mean("wall_time_s")
    print(f"eval[{args.split}] n={len(report.rows)} "
          f"psnr={report.mean('psnr'):.2f} ssim={report.mean('ssim'):.3f} "
          f"calls={report.mean('backbone_calls'):.2f} ({mean_t:.2f}s/img)")
    return 0


def cmd_ablate_tau(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out_dir(args.out, args.force)
    model, _ = load_model(Path(args.ckpt))
    dataset = load_dataset(Path(args.data))
    taus = [float(t) for t in args.taus.split(",") if t != ""]
    rows, reports = metrics.ablate_tau(
        model, dataset, taus, cfg.sampler,
        context_count=args.context_count, seed=cfg.sampler.seed,
    )
    metrics.write_csv(out / "tau_sweep.csv", metrics.TAU_CSV_COLUMNS, rows)
    write_effective_config(out, cfg)
    _write_json(out / "report.json", [r.to_json_dict() for r in reports])
    _write_json(out / "trace.json", {
        "subcommand": "ablate-tau", "seed": cfg.sampler.seed, "taus": taus,
    })
    for row, rep in zip(rows, reports):
        print(f"tau={row['tau']:<5} calls={row['mean_backbone_calls']:<6.2f} "
              f"psnr={row['mean_psnr']:.2f} ({rep.mean('wall_time_s'):.2f}s/img)")
    return 0


def cmd_ablate_context(args) -> int:
    cfg = _load_cfg(args)
    out = _prepare_out_dir(args.out, args.force)
    model, _ = load_model(Path(args.ckpt))
    dataset = load_dataset(Path(args.data))
    counts = [int(c) for c in args.context_counts.split(",") if c != ""]
    rows, reports = metrics.ablate_context(
        model, dataset, counts, cfg.sampler, seed=cfg.sampler.seed,
    )
    metrics.write_csv(out / "context_sweep.csv", metrics.CONTEXT_CSV_COLUMNS, rows)
    write_effective_config(out, cfg)
    _write_json(out / "report.json", [r.to_json_dict() for r in reports])
    _write_json(out / "trace.json", {
        "subcommand": "ablate-context", "seed": cfg.sampler.seed, "counts": counts,
    })
    for row in rows:
        print(f"N_c={row['context_views']} deter={row['mean_deter_tokens']:.2f} "
              f"calls={row['mean_backbone_calls']:.2f} psnr={row['mean_psnr']:.2f}")
    return 0


def cmd_check(args) -> int:
    return 0 if checks.run_checks() else 1


_COMMANDS = {
    "gen-data": cmd_gen_data,
    "train": cmd_train,
    "sample": cmd_sample,
    "eval": cmd_eval,
    "ablate-tau": cmd_ablate_tau,
    "ablate-context": cmd_ablate_context,
    "check": cmd_check,
}


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    try:
        return _COMMANDS[args.command](args)
    except Exception as e:  # noqa: BLE001 - CLI boundary
        print(json.dumps({"error": type(e).__name__, "message": str(e)}),
              file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
