"""Core 3D grid types (intensity volume, binary label mask, soft probability mask)
and the preprocessing / augmentation operations shared by every pipeline stage.

All types are immutable value objects on a regular lattice: a dense array plus
physical voxel spacing and origin (mm). Arrays are indexed ``[i, j, k]`` with
spacing ``(si, sj, sk)`` along the same axes. Treat the wrapped arrays as
read-only; every operation returns new objects.
"""

from __future__ import annotations

import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn.functional as F
from scipy.ndimage import affine_transform

Triple = tuple[float, float, float]


class EmptyMaskError(ValueError):
    """A mask required to contain foreground is all-background."""


class LatticeMismatchError(ValueError):
    """Two grids expected on the same lattice (shape + spacing) differ."""


def _as_triple(v) -> Triple:
    t = tuple(float(x) for x in v)
    if len(t) != 3:
        raise ValueError(f"expected 3 components, got {len(t)}")
    return t  # type: ignore[return-value]


@dataclass(frozen=True)
class Volume:
    """Dense 3D scalar grid (image intensities or any real field)."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"volume data must be 3D with all dims >= 1, got shape {data.shape}")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_triple(self.spacing))
        object.__setattr__(self, "origin", _as_triple(self.origin))
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def with_data(self, data: np.ndarray) -> "Volume":
        return dataclasses.replace(self, data=data)


@dataclass(frozen=True)
class LabelMask:
    """Binary 3D grid, values exactly {0, 1}, same lattice conventions as Volume."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"mask data must be 3D with all dims >= 1, got shape {data.shape}")
        if not np.isin(data, (0, 1)).all():
            raise ValueError("label mask values must be exactly 0 or 1")
        object.__setattr__(self, "data", data.astype(np.uint8))
        object.__setattr__(self, "spacing", _as_triple(self.spacing))
        object.__setattr__(self, "origin", _as_triple(self.origin))
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    @property
    def foreground_count(self) -> int:
        return int(self.data.sum())

    def with_data(self, data: np.ndarray) -> "LabelMask":
        return dataclasses.replace(self, data=data)


@dataclass(frozen=True)
class SoftMask:
    """Per-voxel foreground probabilities in [0, 1]."""

    data: np.ndarray
    spacing: Triple = (1.0, 1.0, 1.0)
    origin: Triple = (0.0, 0.0, 0.0)

    def __post_init__(self):
        data = np.asarray(self.data, dtype=np.float32)
        if data.ndim != 3 or min(data.shape) < 1:
            raise ValueError(f"mask data must be 3D with all dims >= 1, got shape {data.shape}")
        if data.min() < 0.0 or data.max() > 1.0:
            raise ValueError("soft mask values must lie in [0, 1]")
        object.__setattr__(self, "data", data)
        object.__setattr__(self, "spacing", _as_triple(self.spacing))
        object.__setattr__(self, "origin", _as_triple(self.origin))
        if min(self.spacing) <= 0:
            raise ValueError(f"spacing must be positive, got {self.spacing}")

    @property
    def shape(self) -> tuple[int, int, int]:
        return self.data.shape  # type: ignore[return-value]

    def binarize(self, threshold: float = 0.5) -> LabelMask:
        return LabelMask((self.data > threshold).astype(np.uint8), self.spacing, self.origin)


GridLike = Volume | LabelMask | SoftMask


def same_lattice(a: GridLike, b: GridLike, rtol: float = 1e-5) -> bool:
    return a.shape == b.shape and np.allclose(a.spacing, b.spacing, rtol=rtol)


def require_same_lattice(a: GridLike, b: GridLike) -> None:
    if not same_lattice(a, b):
        raise LatticeMismatchError(
            f"lattice mismatch: {a.shape}@{a.spacing} vs {b.shape}@{b.spacing}"
        )


def _interpolate(data: np.ndarray, shape: tuple[int, int, int], is_mask: bool) -> np.ndarray:
    """Resize a 3D array to `shape`: trilinear for scalars, nearest for masks."""
    t = torch.from_numpy(np.ascontiguousarray(data, dtype=np.float32))[None, None]
    mode = "nearest-exact" if is_mask else "trilinear"
    kwargs = {} if is_mask else {"align_corners": False}
    out = F.interpolate(t, size=shape, mode=mode, **kwargs)[0, 0].numpy()
    return out


def resample(v: GridLike, target_spacing) -> GridLike:
    """Resample onto an isotropic-or-not target spacing, preserving physical extent.

    Intensity volumes and soft masks interpolate trilinearly; label masks use
    nearest-neighbour so values stay binary.
    """
    target = _as_triple(target_spacing)
    if min(target) <= 0:
        raise ValueError(f"target spacing must be positive, got {target}")
    if target == v.spacing:
        return dataclasses.replace(v, spacing=target)
    new_shape = tuple(
        max(1, int(round(dim * s / t))) for dim, s, t in zip(v.shape, v.spacing, target)
    )
    is_mask = isinstance(v, LabelMask)
    out = _interpolate(v.data, new_shape, is_mask)
    if is_mask:
        out = out.astype(np.uint8)
    return dataclasses.replace(v, data=out, spacing=target)


def normalize_intensity(v: Volume, lo: float = -200.0, hi: float = 400.0) -> Volume:
    """Clip intensities to [lo, hi] and map that window affinely onto [-1, 1].

    With (lo, hi) = (-1, 1) this is the identity on already-normalized data.
    """
    if lo >= hi:
        raise ValueError(f"normalization window requires lo < hi, got ({lo}, {hi})")
    center = np.float32((lo + hi) / 2.0)
    half = np.float32((hi - lo) / 2.0)
    out = (np.clip(v.data, lo, hi) - center) / half
    return v.with_data(out.astype(np.float32))


def crop_to_bbox(v: Volume, m: LabelMask, pad_voxels: int = 0) -> tuple[Volume, LabelMask]:
    """Crop image and mask to the smallest cube holding all foreground.

    The cube is padded by `pad_voxels` on every side and clamped to the volume
    bounds (so heavily padded crops degrade to the full volume). Foreground is
    always fully preserved.
    """
    require_same_lattice(v, m)
    if pad_voxels < 0:
        raise ValueError("pad_voxels must be >= 0")
    fg = np.argwhere(m.data > 0)
    if fg.size == 0:
        raise EmptyMaskError("cannot crop to the bounding box of an empty mask")
    lov = fg.min(axis=0)
    hiv = fg.max(axis=0)
    side = int((hiv - lov + 1).max()) + 2 * int(pad_voxels)

    starts, stops = [], []
    for ax in range(3):
        dim = v.shape[ax]
        size = min(side, dim)
        center = int(lov[ax] + hiv[ax] + 1) // 2
        start = center - size // 2
        # keep the window inside the volume while still covering all foreground
        start = int(np.clip(start, max(0, hiv[ax] - size + 1), min(lov[ax], dim - size)))
        starts.append(start)
        stops.append(start + size)

    sl = tuple(slice(a, b) for a, b in zip(starts, stops))
    new_origin = tuple(o + s * sp for o, s, sp in zip(v.origin, starts, v.spacing))
    vc = Volume(v.data[sl].copy(), v.spacing, new_origin)
    mc = LabelMask(m.data[sl].copy(), m.spacing, new_origin)
    return vc, mc


def resize_to(v: GridLike, shape) -> GridLike:
    """Resize to an exact voxel shape; spacing rescales so physical extent is kept."""
    shape = tuple(int(s) for s in shape)
    if len(shape) != 3 or min(shape) < 1:
        raise ValueError(f"target shape must be 3 positive ints, got {shape}")
    if shape == v.shape:
        return v
    is_mask = isinstance(v, LabelMask)
    out = _interpolate(v.data, shape, is_mask)
    if is_mask:
        out = out.astype(np.uint8)
    new_spacing = tuple(s * d / n for s, d, n in zip(v.spacing, v.shape, shape))
    return dataclasses.replace(v, data=out, spacing=new_spacing)


def _rotation_matrix(angles_deg: np.ndarray) -> np.ndarray:
    """Combined rotation, applied per-axis in i -> j -> k order."""
    ai, aj, ak = np.deg2rad(angles_deg)
    ci, si = np.cos(ai), np.sin(ai)
    cj, sj = np.cos(aj), np.sin(aj)
    ck, sk = np.cos(ak), np.sin(ak)
    ri = np.array([[1, 0, 0], [0, ci, -si], [0, si, ci]])
    rj = np.array([[cj, 0, sj], [0, 1, 0], [-sj, 0, cj]])
    rk = np.array([[ck, -sk, 0], [sk, ck, 0], [0, 0, 1]])
    return rk @ rj @ ri


def augment(
    v: Volume,
    m: LabelMask,
    seed: int,
    *,
    max_rotation_deg: float = 20.0,
    max_translation_voxels: float = 5.0,
    intensity_range: tuple[float, float] = (0.85, 1.15),
) -> tuple[Volume, LabelMask]:
    """Random rigid + intensity augmentation, deterministic per seed.

    One intensity scale is applied to the image only; a shared rigid transform
    (per-axis rotations and a voxel translation, one resample) moves both image
    and mask. Expects the image already normalized: out-of-bounds voxels fill
    with -1 (air) for the image and 0 for the mask.
    """
    require_same_lattice(v, m)
    rng = np.random.default_rng(seed)
    scale = rng.uniform(*intensity_range)
    angles = rng.uniform(-max_rotation_deg, max_rotation_deg, size=3)
    shift = rng.uniform(-max_translation_voxels, max_translation_voxels, size=3)

    rot = _rotation_matrix(angles)
    center = (np.asarray(v.shape, dtype=float) - 1.0) / 2.0
    # scipy maps output coords to input coords: in = M @ out + offset
    matrix = rot.T
    offset = center - matrix @ (center + shift)

    identity = np.allclose(angles, 0.0) and np.allclose(shift, 0.0)
    if identity:
        img, msk = v.data, m.data
    else:
        img = affine_transform(v.data, matrix, offset=offset, order=1, mode="constant", cval=-1.0)
        msk = affine_transform(m.data, matrix, offset=offset, order=0, mode="constant", cval=0)
    img = (img * np.float32(scale)).astype(np.float32)
    msk = (msk > 0).astype(np.uint8)
    return v.with_data(img), m.with_data(msk)
