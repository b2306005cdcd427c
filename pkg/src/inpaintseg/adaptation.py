"""Unsupervised adaptation stages.

Stage 2 (shape distillation): start from the source segmenter, optimize its
own predictions toward their in-painted completions on unlabeled target
volumes; the in-painter is frozen. Produces the pseudo-label model.

Stage 3 (dual-loss optimization): a target model initialized from the pseudo
model trains against both the pseudo labels (anchoring term) and the
in-painted completion of its own predictions (shape term); the pseudo model
slowly tracks the target through EMA updates every M iterations.
"""

from __future__ import annotations

import copy
import dataclasses
import warnings
from dataclasses import dataclass

import numpy as np
import torch

from .losses import soft_dice_loss_t
from .mlm import MlmState, MlmTrainConfig, finetune_mlm, reconstruct_mask
from .segnet import SegState, SegTrainConfig, _forward_t, train_source
from .volume import LabelMask, SoftMask, require_same_lattice
from .trainutil import seed_all, warmup_cosine


def pseudo_loss(y_target: SoftMask, y_pseudo: SoftMask) -> float:
    """Dice-form anchor between the target prediction and the pseudo label."""
    from .losses import dice_loss

    return dice_loss(y_target, y_pseudo)


def recon_loss(y_target: SoftMask, y_recon: SoftMask) -> float:
    """Dice-form shape term between the target prediction and its completion."""
    from .losses import dice_loss

    return dice_loss(y_target, y_recon)


def total_loss(
    y_target: SoftMask, y_pseudo: SoftMask, y_recon: SoftMask, lambda_pseudo: float
) -> float:
    """Weighted stage-3 objective: lambda * pseudo + recon."""
    if lambda_pseudo < 0:
        raise ValueError("lambda_pseudo must be >= 0")
    require_same_lattice(y_target, y_pseudo)
    require_same_lattice(y_target, y_recon)
    return lambda_pseudo * pseudo_loss(y_target, y_pseudo) + recon_loss(y_target, y_recon)


@torch.no_grad()
def ema_update(pseudo: SegState, target: SegState, beta: float) -> SegState:
    """theta_r <- beta * theta_r + (1 - beta) * theta_t, elementwise, in place.

    Float buffers (batch-norm statistics) blend the same way; integer buffers
    copy from the target only at beta == 0 (exact-copy contract), otherwise
    they stay with the slow model.
    """
    if not 0.0 <= beta < 1.0:
        raise ValueError(f"momentum beta must be in [0, 1), got {beta}")
    sd_r = pseudo.net.state_dict()
    sd_t = target.net.state_dict()
    if sd_r.keys() != sd_t.keys():
        raise ValueError("pseudo and target models have different parameter sets")
    for name, t_r in sd_r.items():
        t_t = sd_t[name]
        if t_r.shape != t_t.shape:
            raise ValueError(f"parameter {name!r} shape mismatch: {t_r.shape} vs {t_t.shape}")
        if t_r.is_floating_point():
            t_r.mul_(beta).add_(t_t, alpha=1.0 - beta)
        elif beta == 0.0:
            t_r.copy_(t_t)
    return pseudo


@dataclass(frozen=True)
class DistillConfig:
    iters: int = 100
    batch: int = 2
    lr: float = 3e-4
    weight_decay: float = 0.0
    warmup_frac: float = 0.05
    mask_ratio: float | None = None  # None = the in-painter's training ratio
    seed: int = 0


def _recon_target(mlm: MlmState, pred: torch.Tensor, spacing, origin, ratio, seed) -> torch.Tensor:
    """In-painted completion of a (detached) soft prediction, as a constant tensor."""
    soft = SoftMask(np.clip(pred.detach().numpy(), 0.0, 1.0), spacing, origin)
    recon = reconstruct_mask(mlm, soft, ratio=ratio, seed=seed)
    return torch.from_numpy(recon.data)


def distill(
    source: SegState, mlm: MlmState, targets, cfg: DistillConfig = DistillConfig()
) -> tuple[SegState, np.ndarray]:
    """Stage 2: refine a copy of the source model against in-painted completions
    of its own target-domain predictions. Returns the pseudo-role state and the
    distillation loss curve. The in-painter is never updated.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("distillation requires at least one target volume")
    for i, v in enumerate(targets):
        if v.shape != source.config.input_shape:
            raise ValueError(f"target {i} not at model input shape {source.config.input_shape}")

    state = source.clone(role="pseudo")
    if cfg.iters == 0:
        return state, np.zeros(0)

    rng = seed_all(cfg.seed)
    net = state.net
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = warmup_cosine(opt, cfg.iters, cfg.warmup_frac)
    losses = np.zeros(cfg.iters, dtype=np.float64)
    tensors = [torch.from_numpy(np.asarray(v.data, dtype=np.float32)) for v in targets]

    net.train()
    for it in range(cfg.iters):
        idx = rng.integers(0, len(targets), size=cfg.batch)
        batch = torch.stack([tensors[i] for i in idx])[:, None]
        opt.zero_grad()
        pred = _forward_t(net, batch)
        terms = []
        for b, i in enumerate(idx):
            recon = _recon_target(
                mlm, pred[b], targets[i].spacing, targets[i].origin,
                cfg.mask_ratio, int(rng.integers(2**31)),
            )
            terms.append(soft_dice_loss_t(pred[b], recon))
        loss = torch.stack(terms).mean()
        loss.backward()
        opt.step()
        sched.step()
        losses[it] = float(loss.detach())
    net.eval()
    state.iteration = cfg.iters
    state.seed = cfg.seed
    return state, losses


@dataclass(frozen=True)
class AdaptConfig:
    iters: int = 200
    batch: int = 2
    lr: float = 3e-4
    weight_decay: float = 0.0
    warmup_frac: float = 0.05
    lambda_pseudo: float = 1.0
    use_recon: bool = True
    beta: float = 0.99
    ema_interval: int = 100
    mask_ratio: float | None = None
    binarize_pseudo: bool = False
    seed: int = 0

    def __post_init__(self):
        if not 0.0 <= self.beta < 1.0:
            raise ValueError("beta must be in [0, 1)")
        if self.ema_interval < 1:
            raise ValueError("EMA interval must be >= 1")
        if self.lambda_pseudo < 0:
            raise ValueError("lambda_pseudo must be >= 0")


def adapt(
    pseudo: SegState, mlm: MlmState, targets, cfg: AdaptConfig = AdaptConfig(), on_ema=None
) -> tuple[SegState, np.ndarray]:
    """Stage 3: dual-loss optimization of the target model.

    Per iteration: pseudo labels from the (gradient-free) pseudo model, in-painted
    completion of the current prediction as a detached shape target, one step on
    lambda * pseudo + recon; every `ema_interval` iterations the pseudo model is
    pulled toward the target by EMA. Returns the target-role state and a log of
    shape (iters, 4): iteration, pseudo term, recon term, total.

    `on_ema(iteration, teacher_state)` fires right after each EMA update, for
    observing the evolving pseudo model.
    """
    targets = list(targets)
    if not targets:
        raise ValueError("adaptation requires at least one target volume")
    for i, v in enumerate(targets):
        if v.shape != pseudo.config.input_shape:
            raise ValueError(f"target {i} not at model input shape {pseudo.config.input_shape}")
    if cfg.ema_interval > cfg.iters > 0:
        warnings.warn(
            f"EMA interval {cfg.ema_interval} exceeds total iterations {cfg.iters}; "
            "the pseudo model will never update",
            stacklevel=2,
        )

    teacher = pseudo.clone(role="pseudo")
    state = pseudo.clone(role="target")
    if cfg.iters == 0:
        return state, np.zeros((0, 4))

    rng = seed_all(cfg.seed)
    net = state.net
    opt = torch.optim.AdamW(net.parameters(), lr=cfg.lr, weight_decay=cfg.weight_decay)
    sched = warmup_cosine(opt, cfg.iters, cfg.warmup_frac)
    log = np.zeros((cfg.iters, 4), dtype=np.float64)
    tensors = [torch.from_numpy(np.asarray(v.data, dtype=np.float32)) for v in targets]

    net.train()
    teacher.net.eval()
    for it in range(cfg.iters):
        idx = rng.integers(0, len(targets), size=cfg.batch)
        batch = torch.stack([tensors[i] for i in idx])[:, None]
        with torch.no_grad():
            labels = _forward_t(teacher.net, batch)
        if cfg.binarize_pseudo:
            labels = (labels > 0.5).float()
        opt.zero_grad()
        pred = _forward_t(net, batch)
        p_terms, r_terms = [], []
        for b, i in enumerate(idx):
            p_terms.append(soft_dice_loss_t(pred[b], labels[b]))
            recon = _recon_target(
                mlm, pred[b], targets[i].spacing, targets[i].origin,
                cfg.mask_ratio, int(rng.integers(2**31)),
            )
            r_terms.append(soft_dice_loss_t(pred[b], recon))
        l_pseudo = torch.stack(p_terms).mean()
        l_recon = torch.stack(r_terms).mean()
        loss = cfg.lambda_pseudo * l_pseudo
        if cfg.use_recon:
            loss = loss + l_recon
        loss.backward()
        opt.step()
        sched.step()
        log[it] = (it, float(l_pseudo.detach()), float(l_recon.detach()), float(loss.detach()))
        if (it + 1) % cfg.ema_interval == 0:
            ema_update(teacher, state, cfg.beta)
            teacher.net.eval()
            if on_ema is not None:
                on_ema(it, teacher)
    net.eval()
    state.iteration = cfg.iters
    state.seed = cfg.seed
    return state, log


@dataclass(frozen=True)
class PipelineConfig:
    """Bundle for the one-shot unseen-organ run: fine-tune, distill, adapt."""

    finetune_iters: int = 40
    finetune: MlmTrainConfig | None = None
    distill: DistillConfig = DistillConfig()
    adapt: AdaptConfig = AdaptConfig()
    skip_finetune: bool = False


def unseen_organ_pipeline(
    support: LabelMask,
    targets,
    source: SegState,
    mlm: MlmState,
    cfgs: PipelineConfig = PipelineConfig(),
) -> tuple[SegState, MlmState]:
    """One support mask from a new organ family: fine-tune the in-painter on it,
    then run distillation and dual-loss adaptation on the unlabeled targets.
    Returns (target model, fine-tuned in-painter)."""
    if cfgs.skip_finetune or cfgs.finetune_iters == 0:
        tuned = mlm
    else:
        hyper = cfgs.finetune if cfgs.finetune is not None else MlmTrainConfig(batch=1)
        tuned, _ = finetune_mlm(mlm, [support], cfgs.finetune_iters, hyper)
    pseudo, _ = distill(source, tuned, targets, cfgs.distill)
    target, _ = adapt(pseudo, tuned, targets, cfgs.adapt)
    return target, tuned


def finetune_supervised(
    base: SegState, dataset, hyper: SegTrainConfig
) -> tuple[SegState, np.ndarray]:
    """Supervised fine-tune on labeled target data (the upper-bound condition)."""
    state, losses = train_source(dataset, base.config, hyper, init=base)
    return state, losses
