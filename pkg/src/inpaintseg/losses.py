"""Overlap losses and metrics shared by training and evaluation.

Two layers: torch functions on raw tensors (differentiable, used inside
training loops and gradient checks) and thin wrappers on the grid types used
at the pipeline level.
"""

from __future__ import annotations

import numpy as np
import torch

from .volume import GridLike, LabelMask, SoftMask, require_same_lattice

DICE_EPS = 1e-6


def soft_dice_loss_t(pred: torch.Tensor, ref: torch.Tensor, eps: float = DICE_EPS) -> torch.Tensor:
    """Soft Dice loss, -2*sum(p*r) / (sum(p) + sum(r) + eps), in [-1, 0].

    Symmetric in its arguments; eps keeps the empty/empty case finite.
    """
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(ref.shape)}")
    inter = (pred * ref).sum()
    return -2.0 * inter / (pred.sum() + ref.sum() + eps)


def mse_loss_t(pred: torch.Tensor, ref: torch.Tensor) -> torch.Tensor:
    """Mean squared error over every voxel of every patch."""
    if pred.shape != ref.shape:
        raise ValueError(f"shape mismatch: {tuple(pred.shape)} vs {tuple(ref.shape)}")
    return ((pred - ref) ** 2).mean()


def _data64(m: GridLike | np.ndarray) -> np.ndarray:
    arr = m if isinstance(m, np.ndarray) else m.data
    return np.asarray(arr, dtype=np.float64)


def dice_loss(pred: GridLike, ref: GridLike, eps: float = DICE_EPS) -> float:
    """Soft Dice loss between two grids on the same lattice (float64 accumulation)."""
    require_same_lattice(pred, ref)
    p, r = _data64(pred), _data64(ref)
    return float(-2.0 * (p * r).sum() / (p.sum() + r.sum() + eps))


def mlm_mse_loss(target: GridLike, recon: GridLike) -> float:
    """Per-voxel mean squared reconstruction error across all patches."""
    require_same_lattice(target, recon)
    t, r = _data64(target), _data64(recon)
    return float(((t - r) ** 2).mean())


def dice_score(pred: LabelMask | SoftMask, ref: LabelMask | SoftMask) -> float:
    """Hard Dice overlap 2|A∩B| / (|A|+|B|) in [0, 1]; empty vs empty scores 1.

    Soft inputs binarize at 0.5.
    """
    a = pred.data > 0.5 if isinstance(pred, SoftMask) else pred.data > 0
    b = ref.data > 0.5 if isinstance(ref, SoftMask) else ref.data > 0
    if a.shape != b.shape:
        raise ValueError(f"shape mismatch: {a.shape} vs {b.shape}")
    total = int(a.sum()) + int(b.sum())
    if total == 0:
        return 1.0
    return 2.0 * int(np.logical_and(a, b).sum()) / total
