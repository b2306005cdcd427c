"""Patch partition and organ-aware mask-plan properties."""

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from inpaintseg.patching import (
    MaskPlan,
    PatchGrid,
    apply_plan,
    patchify,
    plan_mask,
    unpatchify,
    zero_corruption_plan,
)
from inpaintseg.volume import EmptyMaskError, LabelMask, SoftMask


def brute_count_organ_patches(mask, p):
    """Independent oracle: loop over patch blocks, test for any foreground."""
    data = mask.data
    count = 0
    for i in range(0, data.shape[0], p):
        for j in range(0, data.shape[1], p):
            for k in range(0, data.shape[2], p):
                if data[i : i + p, j : j + p, k : k + p].any():
                    count += 1
    return count


def ellipsoid(shape, radii):
    center = tuple(s / 2.0 - 0.5 for s in shape)
    grids = np.meshgrid(*[np.arange(s, dtype=float) for s in shape], indexing="ij")
    q = sum(((g - c) / r) ** 2 for g, c, r in zip(grids, center, radii))
    return LabelMask((q <= 1.0).astype(np.uint8))


def test_patch_counts_at_reference_sizes():
    big = LabelMask(np.ones((128, 128, 128), dtype=np.uint8))
    patches, grid = patchify(big, 16)
    assert grid.num_patches == 512
    assert patches.shape == (512, 16**3)

    one = LabelMask(np.ones((16, 16, 16), dtype=np.uint8))
    patches, grid = patchify(one, 16)
    assert grid.num_patches == 1
    np.testing.assert_array_equal(patches[0], one.data.reshape(-1))


def test_round_trip_random_mask():
    rng = np.random.default_rng(0)
    m = (rng.uniform(size=(16, 16, 16)) > 0.5).astype(np.uint8)
    patches, grid = patchify(LabelMask(m), 4)
    back = unpatchify(patches, grid)
    assert back.dtype == m.dtype
    np.testing.assert_array_equal(back, m)


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1), st.sampled_from([2, 4]))
def test_round_trip_property(seed, p):
    rng = np.random.default_rng(seed)
    shape = tuple(int(p * rng.integers(1, 4)) for _ in range(3))
    m = (rng.uniform(size=shape) > 0.5).astype(np.uint8)
    patches, grid = patchify(LabelMask(m), p)
    np.testing.assert_array_equal(unpatchify(patches, grid), m)


def test_partition_covers_every_voxel_once():
    grid = PatchGrid.for_shape((8, 8, 8), 2)
    seen = np.zeros((8, 8, 8), dtype=int)
    for idx in range(grid.num_patches):
        seen[grid.patch_block(idx)] += 1
    assert (seen == 1).all()


def test_patchify_rejects_non_divisible():
    with pytest.raises(ValueError):
        patchify(LabelMask(np.ones((10, 8, 8), dtype=np.uint8)), 4)


def test_plan_counts_on_ellipsoid():
    m = ellipsoid((32, 32, 32), (7, 6, 8))
    _, grid = patchify(m, 4)
    oracle = brute_count_organ_patches(m, 4)
    plan = plan_mask(m, grid, 0.75, seed=0)
    assert len(plan.organ_patches) == oracle
    assert len(plan.corrupted) == int(np.floor(0.75 * oracle + 0.5))


def test_plan_forty_organ_patches_gives_thirty():
    # mask built from exactly 40 fully-foreground patch blocks
    grid = PatchGrid.for_shape((32, 32, 32), 4)
    data = np.zeros((32, 32, 32), dtype=np.uint8)
    for idx in range(40):
        data[grid.patch_block(idx)] = 1
    m = LabelMask(data)
    assert brute_count_organ_patches(m, 4) == 40
    plan = plan_mask(m, grid, 0.75, seed=1)
    assert len(plan.corrupted) == 30


def test_plan_zero_ratio_and_all_foreground():
    m = LabelMask(np.ones((16, 16, 16), dtype=np.uint8))
    _, grid = patchify(m, 4)
    plan0 = plan_mask(m, grid, 0.0, seed=0)
    assert plan0.corrupted == ()
    assert len(plan0.visible) == grid.num_patches

    plan_half = plan_mask(m, grid, 0.5, seed=0)
    assert len(plan_half.corrupted) == grid.num_patches // 2
    assert set(plan_half.corrupted) <= set(range(grid.num_patches))


def test_plan_empty_mask_errors():
    m = LabelMask(np.zeros((8, 8, 8), dtype=np.uint8))
    _, grid = patchify(m, 4)
    with pytest.raises(EmptyMaskError):
        plan_mask(m, grid, 0.75, seed=0)


def test_plan_single_organ_patch_corrupts_nothing():
    data = np.zeros((8, 8, 8), dtype=np.uint8)
    data[0, 0, 0] = 1
    m = LabelMask(data)
    _, grid = patchify(m, 4)
    plan = plan_mask(m, grid, 0.75, seed=0)
    assert plan.corrupted == ()


@settings(max_examples=30, deadline=None)
@given(st.integers(0, 2**31 - 1))
def test_plan_properties(seed):
    rng = np.random.default_rng(seed)
    data = (rng.uniform(size=(16, 16, 16)) > 0.85).astype(np.uint8)
    if not data.any():
        data[0, 0, 0] = 1
    m = LabelMask(data)
    patches, grid = patchify(m, 4)
    ratio = float(rng.uniform(0, 0.99))
    plan = plan_mask(m, grid, ratio, seed=seed)
    again = plan_mask(m, grid, ratio, seed=seed)
    assert plan == again  # seed stability
    # organ-awareness: every corrupted patch contains foreground
    for idx in plan.corrupted:
        assert m.data[grid.patch_block(idx)].any()
    # partition
    assert len(plan.visible) + len(plan.corrupted) == grid.num_patches
    assert set(plan.visible).isdisjoint(plan.corrupted)
    if len(plan.organ_patches) >= 2:
        assert len(plan.corrupted) == int(np.floor(ratio * len(plan.organ_patches) + 0.5))


def test_soft_mask_binarized_for_organ_detection():
    data = np.full((8, 8, 8), 0.2, dtype=np.float32)
    data[:4, :4, :4] = 0.9
    m = SoftMask(data)
    _, grid = patchify(m, 4)
    plan = plan_mask(m, grid, 0.5, seed=0)
    assert set(plan.organ_patches) == {0}  # only the high-probability block counts


def test_apply_plan():
    rng = np.random.default_rng(5)
    m = LabelMask((rng.uniform(size=(16, 16, 16)) > 0.5).astype(np.uint8))
    patches, grid = patchify(m, 4)

    plan0 = plan_mask(m, grid, 0.0, seed=0)
    visible, corrupted = apply_plan(patches, plan0)
    assert corrupted == ()
    np.testing.assert_array_equal(visible, patches)

    plan = MaskPlan(grid.num_patches, tuple(range(grid.num_patches)), (0,), 0.1)
    visible, corrupted = apply_plan(patches, plan)
    assert corrupted == (0,)
    np.testing.assert_array_equal(visible, patches[1:])
    assert len(visible) + len(corrupted) == grid.num_patches

    with pytest.raises(ValueError):
        apply_plan(patches[:5], plan)


def test_plan_json_round_trip():
    plan = MaskPlan(64, (1, 5, 9), (5, 9), 0.75, seed=7)
    back = MaskPlan.from_json(plan.to_json())
    assert back == plan


def test_zero_corruption_plan():
    grid = PatchGrid.for_shape((8, 8, 8), 4)
    plan = zero_corruption_plan(grid)
    assert plan.corrupted == ()
    assert len(plan.visible) == grid.num_patches
