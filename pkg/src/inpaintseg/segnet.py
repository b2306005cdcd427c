"""3D encoder-decoder segmentation backbone and supervised source training.

Down path: per stage, a stride-2 conv (cin->cin), then conv cin->cout and two
convs cout->cout, batch-norm + ReLU after the last three. Up path mirrors it
with a transposed conv first and skip concatenation. Two-class softmax head;
the foreground channel is the soft mask.
"""

from __future__ import annotations

import copy
import dataclasses
from dataclasses import dataclass

import numpy as np
import torch
import torch.nn as nn

from .losses import soft_dice_loss_t
from .volume import LabelMask, SoftMask, Volume, augment
from .trainutil import seed_all, warmup_cosine

ROLES = ("source", "pseudo", "target")


@dataclass(frozen=True)
class SegConfig:
    channels: tuple[int, ...] = (8, 16, 32, 64, 128, 256)
    input_shape: tuple[int, int, int] = (128, 128, 128)
    num_classes: int = 2

    def __post_init__(self):
        object.__setattr__(self, "channels", tuple(int(c) for c in self.channels))
        object.__setattr__(self, "input_shape", tuple(int(s) for s in self.input_shape))
        if len(self.channels) < 2:
            raise ValueError("channel schedule needs at least two entries")
        if any(s % (2**self.depth) for s in self.input_shape):
            raise ValueError(
                f"input shape {self.input_shape} must be divisible by 2^depth = {2 ** self.depth}"
            )

    @property
    def depth(self) -> int:
        return len(self.channels) - 1

    def scaled(self, scale: int) -> "SegConfig":
        """Desk-scale variant: channels divided (floor 4), input shape divided."""
        if scale < 1:
            raise ValueError("scale must be >= 1")
        if scale == 1:
            return self
        return dataclasses.replace(
            self,
            channels=tuple(max(4, c // scale) for c in self.channels),
            input_shape=tuple(max(1, s // scale) for s in self.input_shape),
        )


def _conv_bn_relu(cin: int, cout: int) -> nn.Sequential:
    return nn.Sequential(
        nn.Conv3d(cin, cout, kernel_size=3, padding=1),
        nn.BatchNorm3d(cout),
        nn.ReLU(inplace=True),
    )


class DownBlock(nn.Module):
    def __init__(self, cin: int, cout: int):
        super().__init__()
        self.reduce = nn.Conv3d(cin, cin, kernel_size=3, stride=2, padding=1)
        self.convs = nn.Sequential(
            _conv_bn_relu(cin, cout), _conv_bn_relu(cout, cout), _conv_bn_relu(cout, cout)
        )

    def forward(self, x):
        return self.convs(self.reduce(x))


class UpBlock(nn.Module):
    def __init__(self, cin: int, cskip: int, cout: int):
        super().__init__()
        self.expand = nn.ConvTranspose3d(
            cin, cin, kernel_size=3, stride=2, padding=1, output_padding=1
        )
        self.convs = nn.Sequential(
            _conv_bn_relu(cin + cskip, cout), _conv_bn_relu(cout, cout), _conv_bn_relu(cout, cout)
        )

    def forward(self, x, skip):
        x = self.expand(x)
        return self.convs(torch.cat([x, skip], dim=1))


class UNet3D(nn.Module):
    def __init__(self, config: SegConfig, in_channels: int = 1):
        super().__init__()
        self.config = config
        ch = config.channels
        self.stem = _conv_bn_relu(in_channels, ch[0])
        self.down = nn.ModuleList(DownBlock(ch[i], ch[i + 1]) for i in range(config.depth))
        self.up = nn.ModuleList(
            UpBlock(ch[i + 1], ch[i], ch[i]) for i in reversed(range(config.depth))
        )
        self.head = nn.Conv3d(ch[0], config.num_classes, kernel_size=1)

    def forward(self, x: torch.Tensor) -> torch.Tensor:
        """(B, 1, H, W, D) image -> (B, C, H, W, D) class probabilities."""
        feats = [self.stem(x)]
        for blk in self.down:
            feats.append(blk(feats[-1]))
        y = feats[-1]
        for blk, skip in zip(self.up, reversed(feats[:-1])):
            y = blk(y, skip)
        return torch.softmax(self.head(y), dim=1)


@dataclass
class SegState:
    """Segmentation parameters with a pipeline role tag."""

    config: SegConfig
    net: UNet3D
    role: str = "source"
    iteration: int = 0
    seed: int = 0

    def __post_init__(self):
        if self.role not in ROLES:
            raise ValueError(f"role must be one of {ROLES}, got {self.role!r}")

    def clone(self, role: str | None = None) -> "SegState":
        return SegState(
            self.config, copy.deepcopy(self.net), role or self.role, self.iteration, self.seed
        )


def init_seg(config: SegConfig, seed: int = 0, role: str = "source") -> SegState:
    torch.manual_seed(seed)
    net = UNet3D(config)
    net.eval()
    return SegState(config, net, role=role, seed=seed)


def _forward_t(net: UNet3D, batch: torch.Tensor) -> torch.Tensor:
    """Foreground-probability channel of the softmax output."""
    return net(batch)[:, 1]


def seg_forward(state: SegState, x: Volume) -> SoftMask:
    """Segment one (normalized) volume into a foreground probability mask."""
    if x.shape != state.config.input_shape:
        raise ValueError(f"volume shape {x.shape} does not match model {state.config.input_shape}")
    state.net.eval()
    with torch.no_grad():
        t = torch.from_numpy(np.asarray(x.data, dtype=np.float32))[None, None]
        prob = _forward_t(state.net, t)[0]
    return SoftMask(np.clip(prob.numpy(), 0.0, 1.0), x.spacing, x.origin)


@dataclass(frozen=True)
class SegTrainConfig:
    iters: int = 300
    batch: int = 2
    lr: float = 1e-3
    weight_decay: float = 1e-4
    warmup_frac: float = 0.05
    seed: int = 0
    augment: bool = True
    max_rotation_deg: float = 20.0
    max_translation_voxels: float = 5.0


def train_source(
    dataset, config: SegConfig, hyper: SegTrainConfig = SegTrainConfig(), init: SegState | None = None
) -> tuple[SegState, np.ndarray]:
    """Supervised Dice training on (Volume, LabelMask) pairs.

    Volumes must already be preprocessed (normalized, model input shape).
    Returns the trained source-role state and the Dice-loss curve. Passing
    `init` warm-starts from an existing state (used for the supervised
    upper-bound fine-tune).
    """
    dataset = list(dataset)
    if not dataset:
        raise ValueError("training requires at least one labeled case")
    for i, (img, msk) in enumerate(dataset):
        if img.shape != config.input_shape or msk.shape != config.input_shape:
            raise ValueError(f"case {i} not at model input shape {config.input_shape}")

    rng = seed_all(hyper.seed)
    net = copy.deepcopy(init.net) if init is not None else UNet3D(config)
    opt = torch.optim.AdamW(net.parameters(), lr=hyper.lr, weight_decay=hyper.weight_decay)
    sched = warmup_cosine(opt, hyper.iters, hyper.warmup_frac)
    losses = np.zeros(hyper.iters, dtype=np.float64)

    net.train()
    for it in range(hyper.iters):
        idx = rng.integers(0, len(dataset), size=hyper.batch)
        imgs, msks = [], []
        for i in idx:
            img, msk = dataset[i]
            if hyper.augment:
                img, msk = augment(
                    img,
                    msk,
                    seed=int(rng.integers(2**31)),
                    max_rotation_deg=hyper.max_rotation_deg,
                    max_translation_voxels=hyper.max_translation_voxels,
                )
            imgs.append(torch.from_numpy(img.data))
            msks.append(torch.from_numpy(msk.data.astype(np.float32)))
        batch = torch.stack(imgs)[:, None]
        target = torch.stack(msks)
        opt.zero_grad()
        pred = _forward_t(net, batch)
        loss = torch.stack(
            [soft_dice_loss_t(pred[b], target[b]) for b in range(len(idx))]
        ).mean()
        loss.backward()
        opt.step()
        sched.step()
        losses[it] = float(loss.detach())
    net.eval()
    return SegState(config, net, role="source", iteration=hyper.iters, seed=hyper.seed), losses
