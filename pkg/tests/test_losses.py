"""Loss oracles: brute-force (pure python loop) evaluations checked against the
vectorized implementations, plus the hand-derived spot values."""

import itertools

import numpy as np
import pytest

from inpaintseg.adaptation import pseudo_loss, recon_loss, total_loss
from inpaintseg.losses import DICE_EPS, dice_loss, dice_score, mlm_mse_loss
from inpaintseg.volume import LabelMask, LatticeMismatchError, SoftMask


def brute_dice_loss(pred, ref, eps=DICE_EPS):
    inter = s_p = s_r = 0.0
    for i in range(pred.shape[0]):
        for j in range(pred.shape[1]):
            for k in range(pred.shape[2]):
                p, r = float(pred[i, j, k]), float(ref[i, j, k])
                inter += p * r
                s_p += p
                s_r += r
    return -2.0 * inter / (s_p + s_r + eps)


def brute_mse(a, b):
    acc = 0.0
    n = 0
    for i in range(a.shape[0]):
        for j in range(a.shape[1]):
            for k in range(a.shape[2]):
                acc += (float(a[i, j, k]) - float(b[i, j, k])) ** 2
                n += 1
    return acc / n


def rel_err(a, b):
    scale = max(abs(a), abs(b), 1e-12)
    return abs(a - b) / scale


def all_binary_2cubed():
    for bits in itertools.product((0, 1), repeat=8):
        yield np.array(bits, dtype=np.uint8).reshape(2, 2, 2)


def test_dice_loss_exhaustive_2cubed():
    masks = list(all_binary_2cubed())
    for a in masks:
        for b in masks:
            got = dice_loss(SoftMask(a.astype(np.float32)), SoftMask(b.astype(np.float32)))
            want = brute_dice_loss(a, b)
            assert rel_err(got, want) <= 1e-6


def test_dice_loss_random_4cubed_soft():
    rng = np.random.default_rng(0)
    for _ in range(25):
        a = rng.uniform(0, 1, size=(4, 4, 4)).astype(np.float32)
        b = rng.uniform(0, 1, size=(4, 4, 4)).astype(np.float32)
        assert rel_err(dice_loss(SoftMask(a), SoftMask(b)), brute_dice_loss(a, b)) <= 1e-6


def test_mse_exhaustive_2cubed_and_random():
    masks = list(all_binary_2cubed())
    for a in masks[::7]:
        for b in masks[::11]:
            got = mlm_mse_loss(LabelMask(a), SoftMask(b.astype(np.float32)))
            assert rel_err(got, brute_mse(a, b)) <= 1e-6
    rng = np.random.default_rng(1)
    for _ in range(25):
        a = rng.uniform(0, 1, size=(4, 4, 4)).astype(np.float32)
        b = rng.uniform(0, 1, size=(4, 4, 4)).astype(np.float32)
        assert rel_err(mlm_mse_loss(SoftMask(a), SoftMask(b)), brute_mse(a, b)) <= 1e-6


def test_dice_loss_spot_values():
    ones = LabelMask(np.ones((2, 2, 2), dtype=np.uint8))
    assert abs(dice_loss(ones, ones) - (-1.0)) <= 1e-6
    a = np.zeros((2, 2, 2), dtype=np.uint8)
    b = np.zeros((2, 2, 2), dtype=np.uint8)
    a[0, 0, 0] = 1
    b[1, 1, 1] = 1
    assert dice_loss(LabelMask(a), LabelMask(b)) == 0.0
    # pred [1,1,0,0] vs ref [1,0,0,0] -> -2/3
    pred = SoftMask(np.array([1, 1, 0, 0], dtype=np.float32).reshape(4, 1, 1))
    ref = SoftMask(np.array([1, 0, 0, 0], dtype=np.float32).reshape(4, 1, 1))
    assert rel_err(dice_loss(pred, ref), -2.0 / 3.0) <= 1e-6


def test_dice_loss_symmetry_and_range():
    rng = np.random.default_rng(2)
    for _ in range(20):
        a = SoftMask(rng.uniform(0, 1, size=(3, 3, 3)).astype(np.float32))
        b = SoftMask(rng.uniform(0, 1, size=(3, 3, 3)).astype(np.float32))
        assert dice_loss(a, b) == dice_loss(b, a)
        assert -1.0 <= dice_loss(a, b) <= 0.0


def test_dice_loss_lattice_mismatch():
    a = SoftMask(np.zeros((2, 2, 2), dtype=np.float32))
    b = SoftMask(np.zeros((2, 2, 4), dtype=np.float32))
    with pytest.raises(LatticeMismatchError):
        dice_loss(a, b)


def test_mse_spot_values():
    ones = LabelMask(np.ones((2, 2, 2), dtype=np.uint8))
    zeros = SoftMask(np.zeros((2, 2, 2), dtype=np.float32))
    assert mlm_mse_loss(ones, ones.with_data(ones.data)) == 0.0
    assert abs(mlm_mse_loss(ones, zeros) - 1.0) <= 1e-12
    g = np.zeros((2, 2, 2), dtype=np.float32)
    g[0, 0, 0] = 1.0
    gr = np.full((2, 2, 2), 0.5, dtype=np.float32)
    assert rel_err(mlm_mse_loss(SoftMask(g), SoftMask(gr)), 0.25) <= 1e-6


def test_total_loss_decomposition_and_spots():
    rng = np.random.default_rng(3)
    for _ in range(10):
        y_t = SoftMask(rng.uniform(0, 1, size=(3, 3, 3)).astype(np.float32))
        y_p = SoftMask(rng.uniform(0, 1, size=(3, 3, 3)).astype(np.float32))
        y_r = SoftMask(rng.uniform(0, 1, size=(3, 3, 3)).astype(np.float32))
        lam = float(rng.uniform(0, 2))
        total = total_loss(y_t, y_p, y_r, lam)
        assert abs(total - lam * pseudo_loss(y_t, y_p) - recon_loss(y_t, y_r)) <= 1e-12
    # lambda = 0 -> recon only
    assert total_loss(y_t, y_p, y_r, 0.0) == recon_loss(y_t, y_r)
    # both terms -1 at lambda=1 -> -2
    ones = SoftMask(np.ones((2, 2, 2), dtype=np.float32))
    assert rel_err(total_loss(ones, ones, ones, 1.0), -2.0) <= 1e-6
    # lambda=0.5, pseudo=-2/3, recon=0 -> -1/3
    y_t = SoftMask(np.array([1, 1, 0, 0], dtype=np.float32).reshape(4, 1, 1))
    y_p = SoftMask(np.array([1, 0, 0, 0], dtype=np.float32).reshape(4, 1, 1))
    y_r = SoftMask(np.array([0, 0, 1, 0], dtype=np.float32).reshape(4, 1, 1))
    assert rel_err(total_loss(y_t, y_p, y_r, 0.5), -1.0 / 3.0) <= 1e-5
    with pytest.raises(ValueError):
        total_loss(y_t, y_p, y_r, -0.1)


def test_dice_score_spot_values():
    m = np.zeros((4, 4, 4), dtype=np.uint8)
    m[:2, :2, :2] = 1
    a = LabelMask(m)
    assert dice_score(a, a) == 1.0
    disjoint = np.zeros_like(m)
    disjoint[2:, 2:, 2:] = 1
    assert dice_score(a, LabelMask(disjoint)) == 0.0
    # two 8-voxel cubes sharing 4 voxels -> 2*4 / (8+8) = 0.5
    b = np.zeros_like(m)
    b[:2, :2, 1:3] = 1
    assert dice_score(a, LabelMask(b)) == 0.5
    empty = LabelMask(np.zeros_like(m))
    assert dice_score(empty, empty) == 1.0
    soft = SoftMask(np.where(m > 0, 0.9, 0.1).astype(np.float32))
    assert dice_score(soft, a) == 1.0
