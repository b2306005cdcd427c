"""The label-mask in-painting network.

A transformer encoder reads the visible patches of a (possibly corrupted)
binary organ mask, a lightweight transformer decoder fills learned mask tokens
at the corrupted positions and predicts every patch of the full mask through a
sigmoid head. Trained with per-voxel MSE against the uncorrupted mask, over
all patches.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .losses import mse_loss_t
from .patching import MaskPlan, PatchGrid, patchify, plan_mask, unpatchify, zero_corruption_plan
from .volume import EmptyMaskError, LabelMask, SoftMask, Volume, augment
from .trainutil import seed_all, warmup_cosine


@dataclass(frozen=True)
class MlmConfig:
    input_shape: tuple[int, int, int] = (128, 128, 128)
    patch_size: int = 16
    encoder_blocks: int = 12
    encoder_dim: int = 768
    encoder_heads: int = 12
    decoder_blocks: int = 8
    decoder_dim: int = 384
    decoder_heads: int = 6
    mask_ratio: float = 0.75
    mlp_ratio: float = 4.0

    def __post_init__(self):
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if self.encoder_dim % self.encoder_heads or self.decoder_dim % self.decoder_heads:
            raise ValueError("embedding dims must be divisible by their head counts")
        if self.encoder_dim % 2 or self.decoder_dim % 2:
            raise ValueError("embedding dims must be even (sin/cos position pairs)")
        if any(s % self.patch_size for s in self.input_shape):
            raise ValueError(
                f"input shape {self.input_shape} not divisible by patch size {self.patch_size}"
            )
        if not 0.0 <= self.mask_ratio < 1.0:
            raise ValueError("mask ratio must be in [0, 1)")

    @property
    def grid(self) -> PatchGrid:
        return PatchGrid.for_shape(self.input_shape, self.patch_size)

    @property
    def num_patches(self) -> int:
        return self.grid.num_patches

    def scaled(self, scale: int) -> "MlmConfig":
        """Shrink every dimension by an integer factor for desk-scale runs.

        Head counts re-derive from a fixed 64-wide head so attention shapes
        stay valid at any scale.
        """
        if scale < 1:
            raise ValueError("scale must be >= 1")
        if scale == 1:
            return self
        enc_dim = max(2, self.encoder_dim // scale)
        dec_dim = max(2, self.decoder_dim // scale)
        return dataclasses.replace(
            self,
            input_shape=tuple(max(1, s // scale) for s in self.input_shape),
            patch_size=max(1, self.patch_size // scale),
            encoder_blocks=max(1, self.encoder_blocks // scale),
            encoder_dim=enc_dim,
            encoder_heads=max(1, enc_dim // 64),
            decoder_blocks=max(1, self.decoder_blocks // scale),
            decoder_dim=dec_dim,
            decoder_heads=max(1, dec_dim // 64),
        )


def sincos_position_table(dim: int, grid_dims: tuple[int, int, int]) -> torch.Tensor:
    """Fixed 3D sin/cos positional table, shape (N_p, dim), row-major patch order."""
    if dim % 2:
        raise ValueError("position embedding dim must be even")
    parts = [2 * (dim // 6)] * 3
    axis = 0
    while sum(parts) < dim:
        parts[axis] += 2
        axis += 1
    tables = []
    for g, d in zip(grid_dims, parts):
        pos = np.arange(g, dtype=np.float64)[:, None]
        freqs = np.exp(-np.log(10000.0) * np.arange(d // 2, dtype=np.float64) / max(1, d // 2))
        ang = pos * freqs[None, :]
        tables.append(np.concatenate([np.sin(ang), np.cos(ang)], axis=1))
    gx, gy, gz = grid_dims
    out = np.zeros((gx, gy, gz, dim), dtype=np.float64)
    out[..., : parts[0]] = tables[0][:, None, None, :]
    out[..., parts[0] : parts[0] + parts[1]] = tables[1][None, :, None, :]
    out[..., parts[0] + parts[1] :] = tables[2][None, None, :, :]
    return torch.from_numpy(out.reshape(gx * gy * gz, dim).astype(np.float32))


class TransformerBlock(nn.Module):
    """Pre-norm self-attention + MLP block."""

    def __init__(self, dim: int, heads: int, mlp_ratio: float = 4.0):
        super().__init__()
        self.norm1 = nn.LayerNorm(dim)
        self.attn = nn.MultiheadAttention(dim, heads, batch_first=True)
        self.norm2 = nn.LayerNorm(dim)
        hidden = int(dim * mlp_ratio)
        self.mlp = nn.Sequential(nn.Linear(dim, hidden), nn.GELU(), nn.Linear(hidden, dim))

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        h = self.norm1(x)
        x = x + self.attn(h, h, h, need_weights=False)[0]
        return x + self.mlp(self.norm2(x))


class MaskInpainter(nn.Module):
    """Encoder over visible patch tokens, decoder over the full token grid."""

    def __init__(self, config: MlmConfig):
        super().__init__()
        self.config = config
        p3 = config.patch_size**3
        self.patch_embed = nn.Linear(p3, config.encoder_dim)
        self.encoder = nn.ModuleList(
            TransformerBlock(config.encoder_dim, config.encoder_heads, config.mlp_ratio)
            for _ in range(config.encoder_blocks)
        )
        self.encoder_norm = nn.LayerNorm(config.encoder_dim)
        self.to_decoder = nn.Linear(config.encoder_dim, config.decoder_dim)
        self.mask_token = nn.Parameter(torch.zeros(config.decoder_dim))
        self.decoder = nn.ModuleList(
            TransformerBlock(config.decoder_dim, config.decoder_heads, config.mlp_ratio)
            for _ in range(config.decoder_blocks)
        )
        self.decoder_norm = nn.LayerNorm(config.decoder_dim)
        self.head = nn.Linear(config.decoder_dim, p3)
        grid = config.grid.grid_dims
        self.register_buffer("enc_pos", sincos_position_table(config.encoder_dim, grid))
        self.register_buffer("dec_pos", sincos_position_table(config.decoder_dim, grid))
        self._init_weights()

    def _init_weights(self):
        for mod in self.modules():
            if isinstance(mod, nn.Linear):
                nn.init.xavier_uniform_(mod.weight)
                if mod.bias is not None:
                    nn.init.zeros_(mod.bias)
        nn.init.normal_(self.mask_token, std=0.02)

    def forward(
        self, patches: torch.Tensor, visible_idx: torch.Tensor, corrupted_idx: torch.Tensor
    ) -> torch.Tensor:
        """In-paint one sample.

        patches: (N_p, P^3) float tensor of the corrupted-input mask's patches
        (corrupted entries are ignored). Returns (N_p, P^3) probabilities.
        """
        n_p = self.config.num_patches
        if patches.shape != (n_p, self.config.patch_size**3):
            raise ValueError(f"expected patches of shape ({n_p}, P^3), got {tuple(patches.shape)}")
        if visible_idx.numel() + corrupted_idx.numel() != n_p:
            raise ValueError("visible and corrupted indices must partition the patch grid")

        x = self.patch_embed(patches[visible_idx]) + self.enc_pos[visible_idx]
        x = x[None]
        for blk in self.encoder:
            x = blk(x)
        x = self.to_decoder(self.encoder_norm(x))[0]

        fill = self.mask_token.to(x.dtype).expand(corrupted_idx.numel(), -1)
        order = torch.cat([visible_idx, corrupted_idx])
        tokens = torch.cat([x, fill], dim=0)[torch.argsort(order)]
        tokens = (tokens + self.dec_pos)[None]
        for blk in self.decoder:
            tokens = blk(tokens)
        return torch.sigmoid(self.head(self.decoder_norm(tokens[0])))


@dataclass
class MlmState:
    """In-painter parameters plus the bookkeeping needed to reproduce them."""

    config: MlmConfig
    net: MaskInpainter
    iteration: int = 0
    seed: int = 0

    def clone(self) -> "MlmState":
        return MlmState(self.config, copy.deepcopy(self.net), self.iteration, self.seed)


def init_mlm(config: MlmConfig, seed: int = 0) -> MlmState:
    torch.manual_seed(seed)
    net = MaskInpainter(config)
    net.eval()
    return MlmState(config, net, iteration=0, seed=seed)


def _plan_tensors(plan: MaskPlan) -> tuple[torch.Tensor, torch.Tensor]:
    visible = torch.as_tensor(plan.visible, dtype=torch.long)
    corrupted = torch.as_tensor(plan.corrupted, dtype=torch.long)
    return visible, corrupted


def mlm_forward(state: MlmState, mask: LabelMask | SoftMask, plan: MaskPlan) -> SoftMask:
    """Reconstruct a full soft mask from the visible patches of `mask`."""
    cfg = state.config
    if mask.shape != cfg.input_shape:
        raise ValueError(f"mask shape {mask.shape} does not match model input {cfg.input_shape}")
    patches, grid = patchify(np.asarray(mask.data, dtype=np.float32), cfg.patch_size)
    if plan.num_patches != grid.num_patches:
        raise ValueError("mask plan does not match the model's patch grid")
    visible, corrupted = _plan_tensors(plan)
    state.net.eval()
    with torch.no_grad():
        pred = state.net(torch.from_numpy(patches), visible, corrupted)
    data = unpatchify(pred.numpy().astype(np.float32), grid)
    return SoftMask(np.clip(data, 0.0, 1.0), mask.spacing, mask.origin)


def reconstruct_mask(
    state: MlmState, mask: LabelMask | SoftMask, ratio: float | None = None, seed: int = 0
) -> SoftMask:
    """Corrupt-and-complete convenience used by the adaptation stages.

    Soft inputs binarize at 0.5 first. A fresh organ-aware plan at `ratio`
    (default: the training ratio) picks the corrupted set; an all-background
    input falls back to a zero-corruption plan instead of erroring.
    """
    if isinstance(mask, SoftMask):
        mask = mask.binarize()
    ratio = state.config.mask_ratio if ratio is None else ratio
    try:
        plan = plan_mask(mask, state.config.grid, ratio, seed)
    except EmptyMaskError:
        plan = zero_corruption_plan(state.config.grid)
    return mlm_forward(state, mask, plan)


@dataclass(frozen=True)
class MlmTrainConfig:
    iters: int = 200
    batch: int = 4
    lr: float = 1.5e-4
    weight_decay: float = 0.0
    warmup_frac: float = 0.05
    augment: bool = False  # random rigid pose per draw; essential for tiny support sets
    seed: int = 0


def _validate_masks(masks, cfg: MlmConfig):
    for i, m in enumerate(masks):
        if m.shape != cfg.input_shape:
            raise ValueError(
                f"training mask {i} has shape {m.shape}, expected {cfg.input_shape}"
            )
        if not m.data.any():
            raise EmptyMaskError(f"training mask {i} has no foreground")


def _mask_patches(mask: LabelMask, cfg: MlmConfig):
    patches, _ = patchify(np.asarray(mask.data, dtype=np.float32), cfg.patch_size)
    organ = np.flatnonzero(patches.any(axis=1))
    return torch.from_numpy(patches), organ


def _sample_plan(organ: np.ndarray, num_patches: int, ratio: float, rng) -> MaskPlan:
    if organ.size < 2:
        corrupted: tuple[int, ...] = ()
    else:
        n_corrupt = int(np.floor(ratio * organ.size + 0.5))
        corrupted = tuple(int(i) for i in rng.choice(organ, size=n_corrupt, replace=False))
    return MaskPlan(
        num_patches=num_patches,
        organ_patches=tuple(int(i) for i in organ),
        corrupted=corrupted,
        ratio=ratio,
    )


def _run_mlm_training(net: MaskInpainter, masks, cfg: MlmConfig, hyper: MlmTrainConfig):
    rng = np.random.default_rng(hyper.seed)
    opt = torch.optim.AdamW(net.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    sched = warmup_cosine(opt, hyper.iters, hyper.warmup_frac)
    losses = np.zeros(hyper.iters, dtype=np.float64)
    # static masks patchify once; augmented draws re-patchify per iteration
    cache = None if hyper.augment else [_mask_patches(m, cfg) for m in masks]
    dummy = Volume(np.zeros(cfg.input_shape, dtype=np.float32)) if hyper.augment else None
    net.train()
    for it in range(hyper.iters):
        idx = rng.integers(0, len(masks), size=hyper.batch)
        opt.zero_grad()
        total = 0.0
        for i in idx:
            if cache is not None:
                patches, organ = cache[i]
            else:
                _, moved = augment(dummy, masks[i], seed=int(rng.integers(2**31)))
                if not moved.data.any():  # pose pushed the organ out of frame
                    moved = masks[i]
                patches, organ = _mask_patches(moved, cfg)
            plan = _sample_plan(organ, cfg.num_patches, cfg.mask_ratio, rng)
            visible, corrupted = _plan_tensors(plan)
            pred = net(patches, visible, corrupted)
            total = total + mse_loss_t(pred, patches)
        loss = total / len(idx)
        loss.backward()
        opt.step()
        sched.step()
        losses[it] = float(loss.detach())
    net.eval()
    return losses


def train_mlm(
    masks, config: MlmConfig, hyper: MlmTrainConfig = MlmTrainConfig()
) -> tuple[MlmState, np.ndarray]:
    """Train the in-painter from scratch on a set of label masks.

    Returns the trained state and the per-iteration loss curve.
    """
    masks = list(masks)
    if not masks:
        raise ValueError("training requires at least one mask")
    _validate_masks(masks, config)
    seed_all(hyper.seed)
    net = MaskInpainter(config)
    losses = _run_mlm_training(net, masks, config, hyper)
    return MlmState(config, net, iteration=hyper.iters, seed=hyper.seed), losses


def finetune_mlm(
    state: MlmState, support_masks, iters: int, hyper: MlmTrainConfig | None = None
) -> tuple[MlmState, np.ndarray]:
    """Warm-start training on a (typically tiny) support set of new-organ masks.

    `iters` == 0 returns an untouched copy of the input state.
    """
    support_masks = list(support_masks)
    if not support_masks:
        raise ValueError("fine-tuning requires at least one support mask")
    hyper = hyper or MlmTrainConfig()
    hyper = dataclasses.replace(hyper, iters=iters)
    out = state.clone()
    if iters == 0:
        return out, np.zeros(0)
    _validate_masks(support_masks, state.config)
    seed_all(hyper.seed)
    losses = _run_mlm_training(out.net, support_masks, state.config, hyper)
    out.iteration = state.iteration + iters
    return out, losses
