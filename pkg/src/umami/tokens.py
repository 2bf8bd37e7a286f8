"""Patch tokenization: image + ray embedding -> token sequences and back.

Token layout (one token per P x P patch, patches in row-major order):
  channel-major flattening of the (9, P, P) patch block, so
    token[0 : 3*P*P]      -> RGB planes, remapped from [0, 1] to [-1, 1]
    token[3*P*P : 9*P*P]  -> Plücker planes (direction xyz, moment xyz)

RGB remap is y = 2x - 1 with inverse (y + 1) / 2; for float32 pixel inputs
carried through float64 tokens the round trip is bit-exact.
"""

from __future__ import annotations

from dataclasses import dataclass, replace

import numpy as np
import torch

from .geometry import PluckerGrid, PosedImage


class TokenError(ValueError):
    pass


@dataclass
class TokenSequence:
    """Patch tokens for one or more same-resolution views of a single role."""

    tokens: torch.Tensor      # (T, P*P*9) float64
    view_index: np.ndarray    # (T,) int64
    patch_index: np.ndarray   # (T, 2) int64, (row, col) within the view
    mask_flag: np.ndarray     # (T,) bool
    role: str                 # "context" | "target"
    patch_size: int
    resolution: tuple[int, int]  # (width, height), shared by all views

    def __post_init__(self):
        if self.role not in ("context", "target"):
            raise TokenError(f"unknown role {self.role!r}")
        if self.role == "context" and bool(np.any(self.mask_flag)):
            raise TokenError("context tokens must never be masked")

    def __len__(self) -> int:
        return self.tokens.shape[0]

    @property
    def rgb_dim(self) -> int:
        return 3 * self.patch_size * self.patch_size

    @property
    def rgb(self) -> torch.Tensor:
        return self.tokens[:, : self.rgb_dim]

    @property
    def plucker(self) -> torch.Tensor:
        return self.tokens[:, self.rgb_dim:]

    @property
    def n_views(self) -> int:
        return int(self.view_index.max()) + 1 if len(self) else 0

    def view_slice(self, view: int) -> slice:
        """Row range of one view's tokens (views are stored contiguously)."""
        idx = np.nonzero(self.view_index == view)[0]
        if idx.size == 0:
            raise TokenError(f"no tokens for view {view}")
        return slice(int(idx[0]), int(idx[-1]) + 1)

    def clone(self) -> "TokenSequence":
        return replace(
            self,
            tokens=self.tokens.clone(),
            view_index=self.view_index.copy(),
            patch_index=self.patch_index.copy(),
            mask_flag=self.mask_flag.copy(),
        )


def tokens_per_view(resolution: tuple[int, int], patch_size: int) -> int:
    w, h = resolution
    if w % patch_size or h % patch_size:
        raise TokenError(f"resolution {resolution} not divisible by patch size {patch_size}")
    return (h // patch_size) * (w // patch_size)


def _patchify(planes: np.ndarray, p: int) -> np.ndarray:
    """(H, W, C) -> (T, C*p*p), channel-major per patch, row-major patches."""
    h, w, c = planes.shape
    x = planes.reshape(h // p, p, w // p, p, c)
    x = x.transpose(0, 2, 4, 1, 3)          # (hp, wp, c, p, p)
    return x.reshape((h // p) * (w // p), c * p * p)


def tokenize(
    image: PosedImage | np.ndarray,
    plucker: PluckerGrid,
    patch_size: int,
    view_index: int = 0,
    role: str = "target",
) -> TokenSequence:
    """Flatten an image and its ray embedding into patch tokens."""
    img = image.image if isinstance(image, PosedImage) else np.asarray(image)
    if img.ndim != 3 or img.shape[2] != 3:
        raise TokenError(f"expected (H, W, 3) image, got shape {img.shape}")
    h, w = img.shape[:2]
    if plucker.directions.shape[:2] != (h, w):
        raise TokenError(
            f"image is {w}x{h} but ray grid is "
            f"{plucker.directions.shape[1]}x{plucker.directions.shape[0]}"
        )
    n = tokens_per_view((w, h), patch_size)
    rgb = 2.0 * img.astype(np.float64) - 1.0
    rgb_tok = _patchify(rgb, patch_size)
    ray_tok = _patchify(plucker.channels, patch_size)
    tokens = torch.from_numpy(np.concatenate([rgb_tok, ray_tok], axis=1))
    rows, cols = np.divmod(np.arange(n), w // patch_size)
    return TokenSequence(
        tokens=tokens,
        view_index=np.full(n, view_index, dtype=np.int64),
        patch_index=np.stack([rows, cols], axis=1).astype(np.int64),
        mask_flag=np.zeros(n, dtype=bool),
        role=role,
        patch_size=patch_size,
        resolution=(w, h),
    )


def concat_sequences(seqs: list[TokenSequence]) -> TokenSequence:
    """Stack sequences of the same role/patch geometry into one."""
    roles = {s.role for s in seqs}
    if len(roles) != 1:
        raise TokenError(f"cannot concatenate mixed roles {roles}")
    if len({(s.patch_size, s.resolution) for s in seqs}) != 1:
        raise TokenError("sequences disagree on patch size or resolution")
    return TokenSequence(
        tokens=torch.cat([s.tokens for s in seqs]),
        view_index=np.concatenate([np.full(len(s), i, dtype=np.int64) for i, s in enumerate(seqs)]),
        patch_index=np.concatenate([s.patch_index for s in seqs]),
        mask_flag=np.concatenate([s.mask_flag for s in seqs]),
        role=roles.pop(),
        patch_size=seqs[0].patch_size,
        resolution=seqs[0].resolution,
    )


def apply_mask(
    seq: TokenSequence, mask: np.ndarray, mask_embedding: torch.Tensor
) -> TokenSequence:
    """Replace the RGB part of masked tokens with the shared learnable token.

    Plücker channels are left untouched so the pose signal survives masking.
    Idempotent for a fixed mask. Only target sequences may be masked.
    """
    if seq.role != "target":
        raise TokenError("only target sequences can be masked")
    mask = np.asarray(mask, dtype=bool)
    if mask.shape != (len(seq),):
        raise TokenError(f"mask length {mask.shape} does not match {len(seq)} tokens")
    if mask_embedding.shape != (seq.rgb_dim,):
        raise TokenError(
            f"mask embedding has dim {tuple(mask_embedding.shape)}, expected ({seq.rgb_dim},)"
        )
    m = torch.from_numpy(mask)[:, None]
    rgb = torch.where(m, mask_embedding[None, :].to(seq.tokens.dtype), seq.rgb)
    return replace(
        seq,
        tokens=torch.cat([rgb, seq.plucker], dim=1),
        view_index=seq.view_index.copy(),
        patch_index=seq.patch_index.copy(),
        mask_flag=seq.mask_flag | mask,
    )


def detokenize(
    rgb_tokens: torch.Tensor, resolution: tuple[int, int], patch_size: int
) -> torch.Tensor:
    """Assemble predicted RGB tokens into an (H, W, 3) image in [0, 1].

    Accepts either full tokens (RGB channels are taken from the front) or
    bare RGB tokens. Differentiable; inverse of the tokenize remap.
    """
    w, h = resolution
    p = patch_size
    n = tokens_per_view(resolution, p)
    if rgb_tokens.shape[0] != n:
        raise TokenError(f"got {rgb_tokens.shape[0]} tokens, expected {n} for {w}x{h}/P={p}")
    d = 3 * p * p
    if rgb_tokens.shape[1] < d:
        raise TokenError(f"token dim {rgb_tokens.shape[1]} < rgb dim {d}")
    x = rgb_tokens[:, :d].reshape(h // p, w // p, 3, p, p)
    x = x.permute(0, 3, 1, 4, 2).reshape(h, w, 3)
    return (x + 1.0) * 0.5


def to_image(img: torch.Tensor) -> np.ndarray:
    """Detach to a float32 numpy image clipped to [0, 1]."""
    return np.clip(img.detach().cpu().numpy(), 0.0, 1.0).astype(np.float32)


def expand_patch_mask(
    mask: np.ndarray, resolution: tuple[int, int], patch_size: int
) -> np.ndarray:
    """Per-patch bool mask (T,) -> per-pixel bool mask (H, W)."""
    w, h = resolution
    p = patch_size
    grid = np.asarray(mask, dtype=bool).reshape(h // p, w // p)
    return np.repeat(np.repeat(grid, p, axis=0), p, axis=1)
