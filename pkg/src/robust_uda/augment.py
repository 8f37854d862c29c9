"""Random masked augmentation over 2x2 patches, plus flip/rotate augmentation.

Grid images travel as flat rows in (h, w, c) row-major order.
"""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np

from .errors import ShapeError, ValidationError

PATCH = 2


@dataclass(frozen=True)
class GridShape:
    h: int
    w: int
    c: int = 1

    def __post_init__(self):
        if min(self.h, self.w, self.c) < 1 or self.h % PATCH or self.w % PATCH:
            raise ShapeError(f"grid {self.h}x{self.w}x{self.c} not divisible into {PATCH}x{PATCH} patches")

    @property
    def size(self) -> int:
        return self.h * self.w * self.c

    @property
    def n_patches(self) -> int:
        return (self.h // PATCH) * (self.w // PATCH)


@dataclass(frozen=True)
class RmaConfig:
    mask_ratio: float = 0.25
    enabled: bool = True

    def __post_init__(self):
        if not 0.0 <= self.mask_ratio <= 1.0:
            raise ValidationError("mask_ratio must lie in [0, 1]")


def n_masked(shape: GridShape, mask_ratio: float) -> int:
    # half-up rounding, not banker's
    return int(np.floor(mask_ratio * shape.n_patches + 0.5))


def _as_images(x, shape):
    x = np.asarray(x, dtype=np.float64)
    single = x.ndim == 1
    xb = x[None, :] if single else x
    if xb.ndim != 2 or xb.shape[1] != shape.size:
        raise ShapeError(f"rows of length {xb.shape[-1]} do not match grid {shape}")
    return xb.reshape(-1, shape.h, shape.w, shape.c), single


def patch_pixels(shape: GridShape, index: int):
    """(row slice, col slice) covered by patch ``index`` in row-major patch order."""
    per_row = shape.w // PATCH
    r, c = divmod(int(index), per_row)
    return slice(PATCH * r, PATCH * r + PATCH), slice(PATCH * c, PATCH * c + PATCH)


def sample_mask(shape: GridShape, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Sorted indices of the patches to zero, drawn uniformly without replacement."""
    m = n_masked(shape, mask_ratio)
    return np.sort(rng.choice(shape.n_patches, size=m, replace=False))


def rma(x, shape: GridShape, cfg: RmaConfig, rng: np.random.Generator, return_masks=False):
    """Zero ``round(mask_ratio * P)`` random 2x2 patches of each image.

    Each row gets its own mask.  With ``return_masks`` the per-row index
    arrays are returned alongside the images.
    """
    imgs, single = _as_images(x, shape)
    out = imgs.copy()
    masks = []
    for k in range(out.shape[0]):
        idx = sample_mask(shape, cfg.mask_ratio, rng)
        for i in idx:
            rs, cs = patch_pixels(shape, i)
            out[k, rs, cs, :] = 0.0
        masks.append(idx)
    flat = out.reshape(out.shape[0], -1)
    result = flat[0] if single else flat
    if return_masks:
        return result, (masks[0] if single else masks)
    return result


def flip_rotate(x, shape: GridShape, flip: bool, quarter_turns: int) -> np.ndarray:
    imgs, single = _as_images(x, shape)
    if flip:
        imgs = imgs[:, :, ::-1, :]
    if quarter_turns % 4:
        if shape.h != shape.w and quarter_turns % 2:
            raise ShapeError("odd quarter turns need a square grid")
        imgs = np.rot90(imgs, k=quarter_turns, axes=(1, 2))
    flat = np.ascontiguousarray(imgs).reshape(imgs.shape[0], -1)
    return flat[0] if single else flat


def standard_aug(x, shape: GridShape, rng: np.random.Generator) -> np.ndarray:
    """Per-image horizontal flip (p=0.5) and a uniform multiple-of-90 rotation."""
    imgs, single = _as_images(x, shape)
    turns = (0, 1, 2, 3) if shape.h == shape.w else (0, 2)
    rows = []
    for img in imgs.reshape(imgs.shape[0], -1):
        flip = bool(rng.random() < 0.5)
        k = int(rng.choice(turns))
        rows.append(flip_rotate(img, shape, flip, k))
    out = np.stack(rows)
    return out[0] if single else out


def coordinate_dropout(x, mask_ratio: float, rng: np.random.Generator) -> np.ndarray:
    """Non-grid analogue of RMA: with probability ``mask_ratio`` zero one random coordinate."""
    x = np.asarray(x, dtype=np.float64)
    xb = np.atleast_2d(x).copy()
    hit = rng.random(xb.shape[0]) < mask_ratio
    cols = rng.integers(0, xb.shape[1], size=xb.shape[0])
    xb[np.flatnonzero(hit), cols[hit]] = 0.0
    return xb[0] if x.ndim == 1 else xb


def masked_copies(x, shape: GridShape | None, cfg: RmaConfig, rng: np.random.Generator) -> np.ndarray:
    """RMA for grid data, coordinate dropout otherwise."""
    if shape is not None:
        return rma(x, shape, cfg, rng)
    return coordinate_dropout(x, cfg.mask_ratio, rng)
