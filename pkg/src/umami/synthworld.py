"""Procedural box/plane worlds with an exact flat-shaded ray-cast renderer.

Scenes are deterministic functions of a seed, fit inside the [-1, 1]^3 cube,
and are rejected until at least one primitive occludes another from some
orbit viewpoint, so every dataset exercises unseen-region completion. Flat
shading (albedo or checker, no lighting) keeps ground truth exactly
multi-view consistent.
"""

from __future__ import annotations

import math
from dataclasses import dataclass, field

import numpy as np

from .geometry import CameraPose, look_at_pose, ray_grid
from .rng import np_generator

_EPS = 1e-9


class GenerationError(RuntimeError):
    pass


@dataclass(frozen=True)
class Box:
    center: tuple[float, float, float]
    half: tuple[float, float, float]
    albedo: tuple[float, float, float]


@dataclass(frozen=True)
class Rect:
    """Axis-aligned rectangle: plane normal along `axis` at `offset`.

    lo/hi span the two remaining axes (in ascending axis order). checks = 0
    renders flat color_a; otherwise a checks x checks checker of the two
    colors.
    """

    axis: int
    offset: float
    lo: tuple[float, float]
    hi: tuple[float, float]
    color_a: tuple[float, float, float]
    color_b: tuple[float, float, float]
    checks: int


@dataclass(frozen=True)
class Scene:
    seed: int
    primitives: tuple = ()
    background: tuple[float, float, float] = (0.08, 0.08, 0.1)


def _other_axes(axis: int) -> tuple[int, int]:
    return tuple(a for a in range(3) if a != axis)


def raycast(scene: Scene, pose: CameraPose) -> tuple[np.ndarray, np.ndarray]:
    """Nearest-hit distances and primitive ids (-1 = background), (H, W) each."""
    d = ray_grid(pose)
    o = pose.center
    h, w = d.shape[:2]
    best_t = np.full((h, w), np.inf)
    best_id = np.full((h, w), -1, dtype=np.int32)
    with np.errstate(divide="ignore", invalid="ignore"):
        for idx, prim in enumerate(scene.primitives):
            if isinstance(prim, Box):
                lo = np.asarray(prim.center) - np.asarray(prim.half)
                hi = np.asarray(prim.center) + np.asarray(prim.half)
                t1 = (lo - o) / d
                t2 = (hi - o) / d
                t_near = np.minimum(t1, t2).max(axis=-1)
                t_far = np.maximum(t1, t2).min(axis=-1)
                hit = t_far >= np.maximum(t_near, _EPS)
                t_hit = np.where(t_near > _EPS, t_near, t_far)
            else:
                a = prim.axis
                u, v = _other_axes(a)
                t_hit = (prim.offset - o[a]) / d[..., a]
                pu = o[u] + t_hit * d[..., u]
                pv = o[v] + t_hit * d[..., v]
                hit = (
                    (t_hit > _EPS)
                    & (np.abs(d[..., a]) > _EPS)
                    & (pu >= prim.lo[0]) & (pu <= prim.hi[0])
                    & (pv >= prim.lo[1]) & (pv <= prim.hi[1])
                )
            closer = hit & (t_hit < best_t)
            best_t = np.where(closer, t_hit, best_t)
            best_id = np.where(closer, idx, best_id)
    return best_t, best_id


def shade(scene: Scene, pose: CameraPose, t: np.ndarray, ids: np.ndarray) -> np.ndarray:
    """Flat-shade a raycast result to an (H, W, 3) float32 image in [0, 1]."""
    h, w = ids.shape
    img = np.empty((h, w, 3), dtype=np.float64)
    img[:] = scene.background
    d = ray_grid(pose)
    o = pose.center
    for idx, prim in enumerate(scene.primitives):
        sel = ids == idx
        if not sel.any():
            continue
        if isinstance(prim, Box) or prim.checks == 0:
            color = prim.albedo if isinstance(prim, Box) else prim.color_a
            img[sel] = color
        else:
            u, v = _other_axes(prim.axis)
            tt = t[sel]
            pu = o[u] + tt * d[..., u][sel]
            pv = o[v] + tt * d[..., v][sel]
            cu = np.floor((pu - prim.lo[0]) / (prim.hi[0] - prim.lo[0]) * prim.checks)
            cv = np.floor((pv - prim.lo[1]) / (prim.hi[1] - prim.lo[1]) * prim.checks)
            parity = ((cu + cv) % 2).astype(bool)
            img[sel] = np.where(parity[:, None], prim.color_b, prim.color_a)
    return np.clip(img, 0.0, 1.0).astype(np.float32)


def render_view(scene: Scene, pose: CameraPose) -> np.ndarray:
    t, ids = raycast(scene, pose)
    return shade(scene, pose, t, ids)


def _orbit_camera(angle: float, radius: float, height: float,
                  target: np.ndarray, resolution: tuple[int, int],
                  focal: float) -> CameraPose:
    position = np.array([radius * math.cos(angle), height, radius * math.sin(angle)])
    return look_at_pose(position, target, resolution, (focal, focal))


def _draw_primitives(rng: np.random.Generator):
    n = int(rng.integers(3, 13))
    prims = []
    n_boxes = max(2, n - int(rng.integers(0, max(1, n // 3) + 1)))
    for i in range(n):
        if i < n_boxes:
            half = rng.uniform(0.06, 0.32, 3)
            center = rng.uniform(-1.0 + half, 1.0 - half)
            prims.append(Box(tuple(center), tuple(half), tuple(rng.uniform(0.12, 0.95, 3))))
        else:
            axis = int(rng.integers(0, 3))
            offset = float(rng.uniform(-0.85, 0.85))
            size = rng.uniform(0.3, 0.9, 2)
            lo = rng.uniform(-0.95, 0.95 - size)
            prims.append(Rect(
                axis=axis, offset=offset,
                lo=tuple(lo), hi=tuple(lo + size),
                color_a=tuple(rng.uniform(0.12, 0.95, 3)),
                color_b=tuple(rng.uniform(0.12, 0.95, 3)),
                checks=int(rng.integers(2, 7)) if rng.random() < 0.6 else 0,
            ))
    return prims


def _has_occlusion(scene: Scene, min_fraction: float = 0.05) -> bool:
    """Some primitive covering >= min_fraction of one orbit view must be
    entirely invisible from the opposite orbit point."""
    res = (32, 32)
    focal = res[0] / (2 * math.tan(math.radians(55) / 2))
    for angle in (0.0, math.pi / 4, math.pi / 2, 3 * math.pi / 4):
        views = []
        for a in (angle, angle + math.pi):
            pose = _orbit_camera(a, 2.7, 0.7, np.zeros(3), res, focal)
            _, ids = raycast(scene, pose)
            views.append(ids)
        n_px = views[0].size
        for ids_a, ids_b in ((views[0], views[1]), (views[1], views[0])):
            seen_b = set(np.unique(ids_b)) - {-1}
            for pid in set(np.unique(ids_a)) - {-1}:
                if pid not in seen_b and (ids_a == pid).sum() >= min_fraction * n_px:
                    return True
    return False


def generate_scene(seed: int, max_tries: int = 100) -> Scene:
    """Seed-deterministic scene with a verified occlusion relationship."""
    rng = np_generator(seed, "scene")
    background = tuple(rng.uniform(0.05, 0.35, 3))
    for _ in range(max_tries):
        scene = Scene(seed=seed, primitives=tuple(_draw_primitives(rng)),
                      background=background)
        if _has_occlusion(scene):
            return scene
    raise GenerationError(f"no occluding arrangement found for seed {seed} "
                          f"in {max_tries} tries")


def assign_splits(n_views: int) -> list[str]:
    """Tag sorted-by-angle views: arc ends extrapolate, interior alternates
    context / interpolation with context anchoring both interior endpoints."""
    if n_views < 4:
        raise GenerationError("need at least 4 views per scene to form splits")
    n_extra = max(1, n_views // 6)
    splits = [""] * n_views
    for i in range(n_extra):
        splits[i] = "target-extra"
        splits[n_views - 1 - i] = "target-extra"
    interior = list(range(n_extra, n_views - n_extra))
    for j, i in enumerate(interior):
        if i in (interior[0], interior[-1]) or j % 2 == 0:
            splits[i] = "context"
        else:
            splits[i] = "target-interp"
    return splits


@dataclass
class SceneBuild:
    scene: Scene
    poses: list[CameraPose]
    images: list[np.ndarray]
    splits: list[str]
    orbit: list[dict] = field(default_factory=list)   # angle/radius/height per view


def build_scene_views(
    scene_seed: int, n_views: int, resolution: tuple[int, int], cam_seed: int
) -> SceneBuild:
    """Render one scene from a jittered orbit; orbit centroid is the origin."""
    scene = generate_scene(scene_seed)
    rng = np_generator(cam_seed, "cameras")
    span = rng.uniform(math.radians(100), math.radians(170))
    theta0 = rng.uniform(0, 2 * math.pi)
    angles = theta0 + np.sort(rng.uniform(0, span, n_views))
    radii = rng.uniform(2.3, 3.1, n_views)
    heights = rng.uniform(0.3, 1.3, n_views)
    fov = rng.uniform(math.radians(50), math.radians(65))
    focal = resolution[0] / (2 * math.tan(fov / 2))
    targets = rng.uniform(-0.15, 0.15, (n_views, 3))
    targets = targets - targets.mean(axis=0)   # pin the orbit centroid at 0
    build = SceneBuild(scene=scene, poses=[], images=[], splits=assign_splits(n_views))
    for i in range(n_views):
        pose = _orbit_camera(float(angles[i]), float(radii[i]), float(heights[i]),
                             targets[i], resolution, focal)
        build.poses.append(pose)
        build.images.append(render_view(scene, pose))
        build.orbit.append({
            "angle": float(angles[i]),
            "radius": float(radii[i]),
            "height": float(heights[i]),
        })
    return build
