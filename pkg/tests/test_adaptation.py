"""Adaptation-stage contracts: EMA arithmetic, stage isolation, loss wiring."""

import math

import numpy as np
import pytest
import torch

from inpaintseg.adaptation import (
    AdaptConfig,
    DistillConfig,
    adapt,
    distill,
    ema_update,
)
from inpaintseg.checkpoint import state_checksum
from inpaintseg.mlm import MlmConfig, MlmTrainConfig, train_mlm
from inpaintseg.segnet import SegConfig, init_seg
from inpaintseg.volume import LabelMask, Volume

TINY_SEG = SegConfig(channels=(4, 4, 8), input_shape=(16, 16, 16))
TINY_MLM = MlmConfig(
    input_shape=(16, 16, 16), patch_size=4, encoder_blocks=1, encoder_dim=32,
    encoder_heads=2, decoder_blocks=1, decoder_dim=32, decoder_heads=2, mlp_ratio=2.0,
)


def ball(shape, radius, center=None):
    center = center or tuple(s / 2.0 - 0.5 for s in shape)
    grids = np.meshgrid(*[np.arange(s, dtype=float) for s in shape], indexing="ij")
    q = sum(((g - c) / radius) ** 2 for g, c in zip(grids, center))
    return LabelMask((q <= 1.0).astype(np.uint8))


@pytest.fixture(scope="module")
def tiny_mlm():
    masks = [ball((16, 16, 16), r) for r in (4.0, 5.0, 6.0)]
    state, _ = train_mlm(masks, TINY_MLM, MlmTrainConfig(iters=30, batch=2, lr=1e-3, seed=0))
    return state


def tiny_targets(n=3, seed=0):
    rng = np.random.default_rng(seed)
    out = []
    for _ in range(n):
        m = ball((16, 16, 16), rng.uniform(4, 6))
        img = np.where(m.data > 0, 0.4, -0.4) + rng.normal(0, 0.1, size=(16, 16, 16))
        out.append(Volume(np.clip(img, -1, 1).astype(np.float32)))
    return out


# ------------------------------------------------------------------- EMA


def fill_params(state, value):
    with torch.no_grad():
        for p in state.net.parameters():
            p.fill_(value)
    return state


def test_ema_beta_zero_copies_exactly():
    a = init_seg(TINY_SEG, seed=0, role="pseudo")
    b = init_seg(TINY_SEG, seed=1, role="target")
    ema_update(a, b, beta=0.0)
    assert state_checksum(a) == state_checksum(b)


def test_ema_scalar_probe():
    a = fill_params(init_seg(TINY_SEG, seed=0, role="pseudo"), 1.0)
    b = fill_params(init_seg(TINY_SEG, seed=1, role="target"), 0.0)
    ema_update(a, b, beta=0.99)
    for p in a.net.parameters():
        assert abs(float(p.detach().flatten()[0]) - 0.99) < 1e-7


def test_ema_geometric_convergence():
    beta = 0.9
    a = fill_params(init_seg(TINY_SEG, seed=0, role="pseudo"), 1.0)
    b = fill_params(init_seg(TINY_SEG, seed=1, role="target"), 0.0)
    halving = math.ceil(math.log(2) / -math.log(beta))
    gap = 1.0
    for step in range(1, 3 * halving + 1):
        ema_update(a, b, beta=beta)
        if step % halving == 0:
            new_gap = abs(float(next(iter(a.net.parameters())).flatten()[0]))
            assert new_gap <= 0.5 * gap
            assert new_gap > 0.5 * beta * gap
            gap = new_gap


def test_ema_distributes_over_blocks():
    # the same elementwise update on the concatenated parameter vector must
    # equal per-block application, bit for bit
    a = init_seg(TINY_SEG, seed=2, role="pseudo")
    b = init_seg(TINY_SEG, seed=3, role="target")
    beta = 0.7
    flat_a = torch.cat([p.detach().flatten() for p in a.net.parameters()]).clone()
    flat_b = torch.cat([p.detach().flatten() for p in b.net.parameters()])
    expected = flat_a.mul_(beta).add_(flat_b, alpha=1.0 - beta)
    ema_update(a, b, beta=beta)
    got = torch.cat([p.detach().flatten() for p in a.net.parameters()])
    torch.testing.assert_close(got, expected, rtol=0, atol=0)


def test_ema_validates_inputs():
    a = init_seg(TINY_SEG, seed=0, role="pseudo")
    b = init_seg(SegConfig(channels=(4, 8, 8), input_shape=(16, 16, 16)), seed=0, role="target")
    with pytest.raises(ValueError):
        ema_update(a, b, beta=1.0)
    with pytest.raises(ValueError):
        ema_update(a, b, beta=0.5)


# ----------------------------------------------------------------- distill


def test_distill_zero_iters_copies_source(tiny_mlm):
    source = init_seg(TINY_SEG, seed=4)
    pseudo, curve = distill(source, tiny_mlm, tiny_targets(), DistillConfig(iters=0))
    assert pseudo.role == "pseudo"
    assert curve.size == 0
    assert state_checksum(pseudo) == state_checksum(source)
    assert pseudo.net is not source.net


def test_distill_freezes_inpainter(tiny_mlm):
    before = state_checksum(tiny_mlm)
    source = init_seg(TINY_SEG, seed=5)
    distill(source, tiny_mlm, tiny_targets(), DistillConfig(iters=3, batch=2, seed=1))
    assert state_checksum(tiny_mlm) == before


def test_distill_requires_targets(tiny_mlm):
    with pytest.raises(ValueError):
        distill(init_seg(TINY_SEG, seed=0), tiny_mlm, [], DistillConfig(iters=1))


# ------------------------------------------------------------------- adapt


def test_adapt_zero_iters_copies_pseudo(tiny_mlm):
    pseudo = init_seg(TINY_SEG, seed=6, role="pseudo")
    target, log = adapt(pseudo, tiny_mlm, tiny_targets(), AdaptConfig(iters=0))
    assert target.role == "target"
    assert log.shape == (0, 4)
    assert state_checksum(target) == state_checksum(pseudo)


def test_adapt_warns_when_ema_never_fires(tiny_mlm):
    pseudo = init_seg(TINY_SEG, seed=6, role="pseudo")
    with pytest.warns(UserWarning, match="EMA interval"):
        adapt(pseudo, tiny_mlm, tiny_targets(),
              AdaptConfig(iters=2, batch=2, ema_interval=50, seed=0))


def test_adapt_log_decomposition_and_mlm_frozen(tiny_mlm):
    before = state_checksum(tiny_mlm)
    pseudo = init_seg(TINY_SEG, seed=7, role="pseudo")
    cfg = AdaptConfig(iters=4, batch=2, ema_interval=2, beta=0.5, lambda_pseudo=0.7, seed=2)
    _, log = adapt(pseudo, tiny_mlm, tiny_targets(), cfg)
    assert log.shape == (4, 4)
    np.testing.assert_allclose(log[:, 3], cfg.lambda_pseudo * log[:, 1] + log[:, 2], atol=1e-6)
    assert state_checksum(tiny_mlm) == before


def test_adapt_pseudo_label_freshness_probe(tiny_mlm):
    """With beta=0 and M=1, the teacher must equal the student right after
    every EMA update: pseudo labels are produced by the updated model."""
    pseudo = init_seg(TINY_SEG, seed=8, role="pseudo")
    seen = []

    def probe(it, teacher):
        seen.append((it, state_checksum(teacher)))

    target, _ = adapt(
        pseudo, tiny_mlm, tiny_targets(),
        AdaptConfig(iters=3, batch=2, ema_interval=1, beta=0.0, seed=3),
        on_ema=probe,
    )
    assert len(seen) == 3
    assert seen[-1][1] == state_checksum(target)
    assert seen[0][1] != state_checksum(pseudo)  # teacher moved off its start


def test_adapt_recon_flag_changes_objective(tiny_mlm):
    pseudo = init_seg(TINY_SEG, seed=9, role="pseudo")
    targets = tiny_targets()
    base = AdaptConfig(iters=3, batch=2, ema_interval=3, seed=4)
    _, log_with = adapt(pseudo, tiny_mlm, targets, base)
    _, log_without = adapt(pseudo, tiny_mlm, targets,
                           AdaptConfig(iters=3, batch=2, ema_interval=3, seed=4,
                                       use_recon=False))
    np.testing.assert_allclose(log_without[0, 3], base.lambda_pseudo * log_without[0, 1],
                               atol=1e-6)
    assert not np.allclose(log_with[:, 3], log_without[:, 3])
