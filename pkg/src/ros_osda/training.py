"""Seeding, tensor conversion, optimizer and learning-rate schedule shared by both stages."""
from __future__ import annotations

import math
import random

import numpy as np
import torch

from .errors import TrainingError

STAGE1_STREAM = 1
STAGE2_STREAM = 2


def seed_everything(seed: int):
    random.seed(seed)
    np.random.seed(seed % 2**32)
    torch.manual_seed(seed)
    torch.use_deterministic_algorithms(True, warn_only=True)


def batch_rng(seed: int, stage: int, epoch: int) -> np.random.Generator:
    """Batch order is a pure function of ``(seed, stage, epoch)``."""
    return np.random.default_rng([seed, stage, epoch])


def to_tensor(images: np.ndarray) -> torch.Tensor:
    """(N, H, W, C) array to an (N, C, H, W) float tensor."""
    return torch.from_numpy(np.array(images.transpose(0, 3, 1, 2), dtype=np.float32))


def all_rotations(x: torch.Tensor) -> torch.Tensor:
    """Stack of clockwise quarter turns of an NCHW batch: shape (4, N, C, H, W)."""
    return torch.stack([torch.rot90(x, k=-i, dims=(2, 3)) for i in range(4)])


def build_optimizer(bundle, config, total_steps: int):
    opt = torch.optim.SGD(bundle.param_groups(config.lr), lr=config.lr,
                          momentum=config.momentum, weight_decay=config.weight_decay)
    total_steps = max(total_steps, 1)

    def inverse_decay(step):
        return (1.0 + config.lr_gamma * step / total_steps) ** (-config.lr_power)

    sched = torch.optim.lr_scheduler.LambdaLR(opt, inverse_decay)
    return opt, sched


def minibatches(n: int, batch_size: int, rng: np.random.Generator):
    """Shuffled index batches; a trailing batch of one row is dropped (batch norm)."""
    order = rng.permutation(n)
    for start in range(0, n, batch_size):
        idx = order[start : start + batch_size]
        if len(idx) < 2:
            break
        yield idx


def check_finite(total, terms, stage, epoch, step):
    if not math.isfinite(float(total.detach())):
        detail = ", ".join(f"{k}={float(v):.4g}" for k, v in terms.items())
        raise TrainingError(f"non-finite loss at epoch {epoch} step {step} ({detail})", stage=stage)


class EpochMeter:
    """Running means of loss terms over one epoch."""

    def __init__(self):
        self.sums = {}
        self.count = 0

    def add(self, total, terms):
        self.count += 1
        self.sums["total"] = self.sums.get("total", 0.0) + float(total.detach())
        for k, v in terms.items():
            self.sums[k] = self.sums.get(k, 0.0) + float(v.detach())

    def means(self):
        return {k: v / max(self.count, 1) for k, v in self.sums.items()}
