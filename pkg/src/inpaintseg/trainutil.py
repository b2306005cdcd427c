"""Small shared helpers for the training loops: seeding, schedules, logging."""

from __future__ import annotations

import contextlib
import csv
import math
from pathlib import Path

import numpy as np
import torch


def seed_all(seed: int) -> np.random.Generator:
    """Seed torch's global RNG and return a numpy Generator for sampling decisions."""
    torch.manual_seed(seed)
    return np.random.default_rng(seed)


def single_thread_determinism(enabled: bool = True) -> None:
    """Bit-exact reproducibility mode: one CPU thread, deterministic kernels.

    Multi-threaded runs are still seeded and stable in practice, but only this
    mode carries the bit-for-bit guarantee.
    """
    if enabled:
        torch.set_num_threads(1)
        torch.use_deterministic_algorithms(True)
    else:
        torch.use_deterministic_algorithms(False)


@contextlib.contextmanager
def deterministic_guard():
    """Scoped version of single_thread_determinism that restores prior settings."""
    threads = torch.get_num_threads()
    prior = torch.are_deterministic_algorithms_enabled()
    single_thread_determinism(True)
    try:
        yield
    finally:
        torch.set_num_threads(threads)
        torch.use_deterministic_algorithms(prior)


def warmup_cosine(optimizer, total_iters: int, warmup_frac: float = 0.05):
    """LR schedule: linear warmup over the first warmup_frac of iterations,
    cosine decay to zero afterwards."""
    warmup = max(1, int(round(total_iters * warmup_frac)))

    def factor(it: int) -> float:
        if it < warmup:
            return (it + 1) / warmup
        if total_iters <= warmup:
            return 1.0
        progress = (it - warmup) / max(1, total_iters - warmup)
        return 0.5 * (1.0 + math.cos(math.pi * min(1.0, progress)))

    return torch.optim.lr_scheduler.LambdaLR(optimizer, factor)


def write_loss_csv(path: str | Path, rows, header: tuple[str, ...]) -> Path:
    """Write an iteration log as CSV; rows are tuples matching `header`."""
    p = Path(path)
    p.parent.mkdir(parents=True, exist_ok=True)
    with p.open("w", newline="") as f:
        w = csv.writer(f)
        w.writerow(header)
        w.writerows(rows)
    return p
