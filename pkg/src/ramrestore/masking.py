"""Patch-granular binary pixel masks and the masked L1 objective."""

from __future__ import annotations

import math

import numpy as np

from .errors import EmptyMaskedSet, PatchNotDividing, ShapeMismatch
from .tensorcore import Tensor, absolute, mul, scale, sub
from .tensorcore import sum as tsum


class Mask:
    """``keep`` is 1 where a pixel is visible and 0 where it is masked.

    Shape is (1, 1, H, W) for a single mask or (B, 1, H, W) for a stack.
    """

    __slots__ = ("keep", "ratio", "patch")

    def __init__(self, keep, ratio, patch=1):
        keep = np.asarray(keep, dtype=np.float64)
        if keep.ndim != 4 or keep.shape[1] != 1:
            raise ShapeMismatch(f"mask keep map must be (B, 1, H, W), got {keep.shape}")
        self.keep = keep
        self.ratio = float(ratio)
        self.patch = int(patch)

    @property
    def hidden(self):
        return 1.0 - self.keep

    @property
    def shape(self):
        return self.keep.shape

    def count_masked(self):
        return int(round(self.hidden.sum()))

    def __eq__(self, other):
        return (
            isinstance(other, Mask)
            and self.patch == other.patch
            and self.ratio == other.ratio
            and np.array_equal(self.keep, other.keep)
        )

    def __repr__(self):
        return f"Mask(shape={self.shape}, ratio={self.ratio}, patch={self.patch})"

    @classmethod
    def stack(cls, masks):
        masks = list(masks)
        return cls(np.concatenate([m.keep for m in masks]), masks[0].ratio, masks[0].patch)


def n_masked_patches(n_patches, ratio):
    # rounding guards against ratio * n landing a hair below an integer
    return math.floor(round(ratio * n_patches, 9))


def make_mask(h, w, ratio=0.5, patch=1, seed=0):
    """Mask exactly floor(ratio * n_patches) patches, chosen by a seeded shuffle."""
    if patch < 1 or h % patch or w % patch:
        raise PatchNotDividing(f"patch {patch} does not divide {h}x{w}")
    if not 0.0 <= ratio <= 1.0:
        raise ValueError(f"ratio must be in [0, 1], got {ratio}")
    gh, gw = h // patch, w // patch
    n = gh * gw
    grid = np.ones(n)
    order = np.random.default_rng(seed).permutation(n)
    grid[order[:n_masked_patches(n, ratio)]] = 0.0
    grid = grid.reshape(gh, gw)
    keep = np.kron(grid, np.ones((patch, patch)))
    return Mask(keep[None, None], ratio, patch)


def _keep_for(img, mask):
    shape = img.shape
    if shape[-2:] != mask.shape[-2:]:
        raise ShapeMismatch(f"mask {mask.shape[-2:]} vs image {shape[-2:]}")
    if len(shape) == 3:
        if mask.shape[0] != 1:
            raise ShapeMismatch("stacked mask applied to a single image")
        return mask.keep[0]
    if mask.shape[0] not in (1, shape[0]):
        raise ShapeMismatch(f"mask batch {mask.shape[0]} vs image batch {shape[0]}")
    return mask.keep


def apply_mask(img, mask):
    """Zero masked pixels across all channels; works on arrays and Tensors."""
    keep = _keep_for(img, mask)
    if isinstance(img, Tensor):
        return mul(img, Tensor(keep))
    return np.asarray(img, dtype=np.float64) * keep


def twin(mask):
    return Mask(1.0 - mask.keep, round(1.0 - mask.ratio, 12), mask.patch)


def masked_l1(pred, target, mask):
    """Mean |pred - target| over masked positions (x channels); visible pixels
    contribute neither loss nor gradient."""
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    hidden = 1.0 - _keep_for(pred, mask)
    full = np.broadcast_to(hidden, pred.shape[:-3] + (1,) + pred.shape[-2:])
    count = full.sum() * pred.shape[-3]
    if count == 0:
        raise EmptyMaskedSet("mask hides no pixels")
    err = mul(absolute(sub(pred, target)), Tensor(hidden))
    return scale(tsum(err), 1.0 / count)


def l1(pred, target):
    pred = pred if isinstance(pred, Tensor) else Tensor(pred)
    target = target if isinstance(target, Tensor) else Tensor(target)
    if pred.shape != target.shape:
        raise ShapeMismatch(f"pred {pred.shape} vs target {target.shape}")
    return scale(tsum(absolute(sub(pred, target))), 1.0 / pred.size)
