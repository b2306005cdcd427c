"""Partition volumes into non-overlapping cubic patches and plan the
organ-aware visible/corrupted split used for in-painting.

Corruption is restricted to patches containing at least one foreground voxel,
so the in-painter always has to complete organ shape rather than empty space.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field

import numpy as np

from .volume import EmptyMaskError, LabelMask, SoftMask


@dataclass(frozen=True)
class PatchGrid:
    """Bijection between a (H, W, D) lattice and N_p = H*W*D / P^3 flat patches."""

    patch_size: int
    grid_dims: tuple[int, int, int]

    @property
    def num_patches(self) -> int:
        gx, gy, gz = self.grid_dims
        return gx * gy * gz

    @property
    def volume_shape(self) -> tuple[int, int, int]:
        p = self.patch_size
        return tuple(g * p for g in self.grid_dims)  # type: ignore[return-value]

    def patch_block(self, index: int) -> tuple[slice, slice, slice]:
        """Voxel block of one patch index (row-major over grid cells)."""
        gx, gy, gz = self.grid_dims
        if not 0 <= index < self.num_patches:
            raise IndexError(f"patch index {index} out of range [0, {self.num_patches})")
        i, rem = divmod(index, gy * gz)
        j, k = divmod(rem, gz)
        p = self.patch_size
        return (slice(i * p, (i + 1) * p), slice(j * p, (j + 1) * p), slice(k * p, (k + 1) * p))

    @staticmethod
    def for_shape(shape: tuple[int, int, int], patch_size: int) -> "PatchGrid":
        if patch_size < 1:
            raise ValueError("patch size must be >= 1")
        if any(s % patch_size != 0 for s in shape):
            raise ValueError(
                f"shape {shape} not divisible by patch size {patch_size}; resize first"
            )
        return PatchGrid(patch_size, tuple(s // patch_size for s in shape))  # type: ignore[arg-type]


def patchify(m: LabelMask | SoftMask | np.ndarray, patch_size: int) -> tuple[np.ndarray, PatchGrid]:
    """Split into flattened patches of length P^3; exact inverse of `unpatchify`.

    Returns (patches, grid) where patches has shape (N_p, P^3) and keeps the
    input dtype.
    """
    data = m if isinstance(m, np.ndarray) else m.data
    grid = PatchGrid.for_shape(data.shape, patch_size)
    gx, gy, gz = grid.grid_dims
    p = patch_size
    blocks = data.reshape(gx, p, gy, p, gz, p)
    patches = blocks.transpose(0, 2, 4, 1, 3, 5).reshape(grid.num_patches, p**3)
    return np.ascontiguousarray(patches), grid


def unpatchify(patches: np.ndarray, grid: PatchGrid) -> np.ndarray:
    """Reassemble the full array from (N_p, P^3) patches."""
    if patches.shape != (grid.num_patches, grid.patch_size**3):
        raise ValueError(
            f"patches shape {patches.shape} does not match grid "
            f"({grid.num_patches}, {grid.patch_size ** 3})"
        )
    gx, gy, gz = grid.grid_dims
    p = grid.patch_size
    blocks = patches.reshape(gx, gy, gz, p, p, p).transpose(0, 3, 1, 4, 2, 5)
    return np.ascontiguousarray(blocks.reshape(gx * p, gy * p, gz * p))


@dataclass(frozen=True)
class MaskPlan:
    """A visible/corrupted split over a patch grid.

    `corrupted` is always a subset of `organ_patches` (patches with at least
    one foreground voxel); everything outside `corrupted` is visible.
    """

    num_patches: int
    organ_patches: tuple[int, ...]
    corrupted: tuple[int, ...]
    ratio: float
    seed: int = 0
    _corrupted_set: frozenset = field(init=False, repr=False, compare=False)

    def __post_init__(self):
        object.__setattr__(self, "organ_patches", tuple(sorted(self.organ_patches)))
        object.__setattr__(self, "corrupted", tuple(sorted(self.corrupted)))
        object.__setattr__(self, "_corrupted_set", frozenset(self.corrupted))
        if not set(self.corrupted) <= set(self.organ_patches):
            raise ValueError("corrupted patches must all contain foreground")
        if self.organ_patches and not (0 <= self.organ_patches[0] and self.organ_patches[-1] < self.num_patches):
            raise ValueError("organ patch index out of range")

    @property
    def visible(self) -> tuple[int, ...]:
        return tuple(i for i in range(self.num_patches) if i not in self._corrupted_set)

    def to_json(self) -> str:
        return json.dumps(
            {"ratio": self.ratio, "seed": self.seed, "num_patches": self.num_patches,
             "organ_patches": list(self.organ_patches), "corrupted": list(self.corrupted)}
        )

    @staticmethod
    def from_json(s: str) -> "MaskPlan":
        d = json.loads(s)
        return MaskPlan(
            num_patches=int(d["num_patches"]),
            organ_patches=tuple(d["organ_patches"]),
            corrupted=tuple(d["corrupted"]),
            ratio=float(d["ratio"]),
            seed=int(d["seed"]),
        )


def organ_patch_indices(m: LabelMask | SoftMask, grid: PatchGrid) -> np.ndarray:
    """Indices of patches containing any foreground (soft inputs binarize at 0.5)."""
    data = m.data
    if isinstance(m, SoftMask):
        data = data > 0.5
    patches, g = patchify(np.asarray(data), grid.patch_size)
    if g != grid:
        raise ValueError(f"mask shape {m.shape} does not match grid {grid}")
    return np.flatnonzero(patches.any(axis=1))


def plan_mask(m: LabelMask | SoftMask, grid: PatchGrid, ratio: float, seed: int) -> MaskPlan:
    """Sample the corrupted set: round-half-up(ratio * |organ patches|) indices
    drawn uniformly without replacement from the organ patches.

    A mask with a single organ patch corrupts nothing (nothing left to in-paint
    from); an all-background mask is an error.
    """
    if not 0.0 <= ratio < 1.0:
        raise ValueError(f"mask ratio must be in [0, 1), got {ratio}")
    organ = organ_patch_indices(m, grid)
    if organ.size == 0:
        raise EmptyMaskError("mask has no foreground patches to corrupt")
    if organ.size < 2:
        corrupted: tuple[int, ...] = ()
    else:
        n_corrupt = int(np.floor(ratio * organ.size + 0.5))
        rng = np.random.default_rng(seed)
        corrupted = tuple(int(i) for i in rng.choice(organ, size=n_corrupt, replace=False))
    return MaskPlan(
        num_patches=grid.num_patches,
        organ_patches=tuple(int(i) for i in organ),
        corrupted=corrupted,
        ratio=ratio,
        seed=seed,
    )


def zero_corruption_plan(grid: PatchGrid) -> MaskPlan:
    """All patches visible; the degenerate plan used when a prediction is empty."""
    return MaskPlan(num_patches=grid.num_patches, organ_patches=(), corrupted=(), ratio=0.0)


def apply_plan(patches: np.ndarray, plan: MaskPlan) -> tuple[np.ndarray, tuple[int, ...]]:
    """Select visible patches (stable patch-index order) and report corrupted indices."""
    if patches.shape[0] != plan.num_patches:
        raise ValueError(
            f"plan covers {plan.num_patches} patches but {patches.shape[0]} were given"
        )
    visible_idx = [i for i in range(plan.num_patches) if i not in plan._corrupted_set]
    return patches[visible_idx], plan.corrupted
