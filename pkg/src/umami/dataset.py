"""Posed multi-view dataset container.

One directory per scene:
    manifest.json   scene seed, per-view split tags and orbit parameters
    poses.json      camera records (12 floats row-major [R|t], fx fy cx cy, W H)
    view_{i}.png    8-bit sRGB, no alpha

The same layout ingests converted external data; synthetic scenes are just
the built-in producer.
"""

from __future__ import annotations

import json
from dataclasses import dataclass
from pathlib import Path

import numpy as np
from PIL import Image

from .geometry import CameraPose, PosedImage
from .rng import derive_seed
from .synthworld import SceneBuild, build_scene_views

SPLIT_TAGS = ("context", "target-interp", "target-extra")


class DatasetError(RuntimeError):
    pass


@dataclass
class SceneData:
    scene_seed: int
    views: list[PosedImage]
    splits: list[str]
    orbit: list[dict]
    manifest: dict

    def indices(self, tag: str) -> list[int]:
        if tag not in SPLIT_TAGS:
            raise DatasetError(f"unknown split tag {tag!r}")
        return [i for i, s in enumerate(self.splits) if s == tag]

    @property
    def n_views(self) -> int:
        return len(self.views)


@dataclass
class NVSDataset:
    scenes: list[SceneData]
    resolution: tuple[int, int]

    def __len__(self) -> int:
        return len(self.scenes)


def _write_json(path: Path, obj) -> None:
    try:
        path.write_text(json.dumps(obj, indent=2, sort_keys=True) + "\n")
    except OSError as e:
        raise DatasetError(f"failed writing {path}: {e}") from e


def _read_json(path: Path):
    try:
        return json.loads(path.read_text())
    except OSError as e:
        raise DatasetError(f"failed reading {path}: {e}") from e


def save_image(path: Path, image: np.ndarray) -> None:
    """Quantize a float [0, 1] image to 8-bit PNG (idempotent on reload)."""
    arr = np.clip(np.rint(np.asarray(image, dtype=np.float64) * 255.0), 0, 255)
    try:
        Image.fromarray(arr.astype(np.uint8), mode="RGB").save(path)
    except OSError as e:
        raise DatasetError(f"failed writing {path}: {e}") from e


def load_image(path: Path) -> np.ndarray:
    try:
        with Image.open(path) as im:
            return np.asarray(im.convert("RGB"), dtype=np.float32) / np.float32(255.0)
    except OSError as e:
        raise DatasetError(f"failed reading {path}: {e}") from e


def save_scene(scene_dir: Path, build: SceneBuild) -> None:
    scene_dir = Path(scene_dir)
    scene_dir.mkdir(parents=True, exist_ok=True)
    manifest = {
        "scene_seed": int(build.scene.seed),
        "background": [float(c) for c in build.scene.background],
        "n_primitives": len(build.scene.primitives),
        "resolution": [build.poses[0].width, build.poses[0].height],
        "views": [
            {"index": i, "split": build.splits[i], **build.orbit[i]}
            for i in range(len(build.poses))
        ],
    }
    _write_json(scene_dir / "manifest.json", manifest)
    _write_json(scene_dir / "poses.json", [p.to_record() for p in build.poses])
    for i, img in enumerate(build.images):
        save_image(scene_dir / f"view_{i}.png", img)


def load_scene(scene_dir: Path) -> SceneData:
    scene_dir = Path(scene_dir)
    manifest = _read_json(scene_dir / "manifest.json")
    poses = [CameraPose.from_record(r) for r in _read_json(scene_dir / "poses.json")]
    views = []
    for i, pose in enumerate(poses):
        views.append(PosedImage(load_image(scene_dir / f"view_{i}.png"), pose))
    view_meta = sorted(manifest["views"], key=lambda v: v["index"])
    return SceneData(
        scene_seed=manifest["scene_seed"],
        views=views,
        splits=[v["split"] for v in view_meta],
        orbit=[{k: v[k] for k in ("angle", "radius", "height")} for v in view_meta],
        manifest=manifest,
    )


def scene_dirs(root: Path) -> list[Path]:
    root = Path(root)
    dirs = sorted(d for d in root.iterdir() if d.is_dir() and (d / "manifest.json").exists())
    if not dirs:
        raise DatasetError(f"no scene directories under {root}")
    return dirs


def load_dataset(root: Path) -> NVSDataset:
    scenes = [load_scene(d) for d in scene_dirs(root)]
    res = scenes[0].views[0].pose.resolution
    return NVSDataset(scenes=scenes, resolution=tuple(res))


def make_dataset(
    out_dir: Path, n_scenes: int, views_per_scene: int,
    resolution: tuple[int, int], seed: int,
) -> Path:
    """Generate, render, and write `n_scenes` scene directories under out_dir."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    for i in range(n_scenes):
        build = build_scene_views(
            scene_seed=derive_seed(seed, "scene", i),
            n_views=views_per_scene,
            resolution=resolution,
            cam_seed=derive_seed(seed, "cameras", i),
        )
        save_scene(out_dir / f"scene_{i:04d}", build)
    _write_json(out_dir / "dataset.json", {
        "n_scenes": n_scenes,
        "views_per_scene": views_per_scene,
        "resolution": list(resolution),
        "seed": seed,
    })
    return out_dir
