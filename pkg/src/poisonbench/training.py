"""Shared training loop and per-sample batch augmentations.

Augmentations draw their randomness per sample from an explicit generator so
that a run is a pure function of its seed.
"""

from __future__ import annotations

import hashlib
import logging
import math
import os
import time
from dataclasses import dataclass, field
from typing import Optional, Protocol

import numpy as np
import torch
import torch.nn.functional as F

log = logging.getLogger(__name__)

def default_device() -> torch.device:
    """``POISONBENCH_DEVICE`` if set, else CUDA when available, else CPU."""
    name = os.environ.get("POISONBENCH_DEVICE")
    if name:
        return torch.device(name)
    return torch.device("cuda" if torch.cuda.is_available() else "cpu")


def device_of(model: torch.nn.Module) -> torch.device:
    p = next(model.parameters(), None)
    return p.device if p is not None else torch.device("cpu")


TRANSFORMS = ("none", "random_crop", "random_horizontal_flip", "random_rotation", "color_jitter")

CROP_PADDING = 4
ROTATION_DEGREES = 15.0
JITTER = (0.25, 0.25, 0.25)  # brightness, contrast, saturation; hue fixed at 0


class TrainingDiverged(RuntimeError):
    def __init__(self, message: str, checkpoint: Optional[dict] = None, epoch: int = -1):
        super().__init__(message)
        self.checkpoint = checkpoint
        self.epoch = epoch


class BatchSource(Protocol):
    def __len__(self) -> int: ...

    def batch(self, idx: np.ndarray) -> tuple[torch.Tensor, torch.Tensor]: ...


def _uniform(n: int, lo: float, hi: float, gen: torch.Generator) -> torch.Tensor:
    return lo + (hi - lo) * torch.rand(n, generator=gen)


def random_crop(x: torch.Tensor, gen: torch.Generator, padding: int = CROP_PADDING) -> torch.Tensor:
    b, c, h, w = x.shape
    xp = F.pad(x, (padding,) * 4)
    off_r = torch.randint(0, 2 * padding + 1, (b,), generator=gen)
    off_c = torch.randint(0, 2 * padding + 1, (b,), generator=gen)
    rows = off_r[:, None] + torch.arange(h)[None]
    cols = off_c[:, None] + torch.arange(w)[None]
    out = xp[torch.arange(b)[:, None, None], :, rows[:, :, None], cols[:, None, :]]
    return out.permute(0, 3, 1, 2).contiguous()


def random_flip(x: torch.Tensor, gen: torch.Generator) -> torch.Tensor:
    mask = torch.rand(len(x), generator=gen) < 0.5
    return torch.where(mask[:, None, None, None], x.flip(3), x)


def random_rotation(x: torch.Tensor, gen: torch.Generator, degrees: float = ROTATION_DEGREES) -> torch.Tensor:
    theta = _uniform(len(x), -degrees, degrees, gen) * (math.pi / 180.0)
    cos, sin = torch.cos(theta), torch.sin(theta)
    zeros = torch.zeros_like(cos)
    mat = torch.stack([torch.stack([cos, -sin, zeros], 1), torch.stack([sin, cos, zeros], 1)], 1)
    grid = F.affine_grid(mat, list(x.shape), align_corners=False)
    return F.grid_sample(x, grid, mode="bilinear", padding_mode="zeros", align_corners=False)


def _gray(x: torch.Tensor) -> torch.Tensor:
    if x.shape[1] == 3:
        return (0.299 * x[:, 0:1] + 0.587 * x[:, 1:2] + 0.114 * x[:, 2:3])
    return x.mean(1, keepdim=True)


def color_jitter(x: torch.Tensor, gen: torch.Generator, strength=JITTER) -> torch.Tensor:
    b = len(x)
    bright, contrast, sat = strength
    shape = (b, 1, 1, 1)
    x = torch.clamp(x * _uniform(b, 1 - bright, 1 + bright, gen).view(shape), 0, 1)
    mean = _gray(x).mean(dim=(1, 2, 3), keepdim=True)
    x = torch.clamp((x - mean) * _uniform(b, 1 - contrast, 1 + contrast, gen).view(shape) + mean, 0, 1)
    g = _gray(x)
    return torch.clamp((x - g) * _uniform(b, 1 - sat, 1 + sat, gen).view(shape) + g, 0, 1)


_AUGMENT = {
    "random_crop": random_crop,
    "random_horizontal_flip": random_flip,
    "random_rotation": random_rotation,
    "color_jitter": color_jitter,
}


def augment(x: torch.Tensor, transforms, gen: torch.Generator) -> torch.Tensor:
    for name in transforms:
        if name == "none":
            continue
        x = _AUGMENT[name](x, gen)
    return x


# ---------------------------------------------------------------------------
# fit
# ---------------------------------------------------------------------------


@dataclass
class FitHistory:
    loss: list = field(default_factory=list)
    accuracy: list = field(default_factory=list)
    forgetting: Optional[np.ndarray] = None
    seconds: float = 0.0


def make_optimizer(params, optimizer: str, lr: float, momentum: float, weight_decay: float):
    if optimizer == "sgd":
        return torch.optim.SGD(params, lr=lr, momentum=momentum, weight_decay=weight_decay)
    if optimizer == "adam":
        return torch.optim.Adam(params, lr=lr, weight_decay=weight_decay)
    raise ValueError(f"unknown optimizer {optimizer!r}")


def fit(model: torch.nn.Module, source: BatchSource, *, optimizer: str, lr: float, momentum: float,
        weight_decay: float, epochs: int, batch_size: int, transforms, gen: torch.Generator,
        track: Optional[np.ndarray] = None) -> FitHistory:
    """Train ``model`` in place with a per-step cosine learning-rate decay.

    ``track`` lists dataset positions whose forgetting events (correct on one
    presentation, wrong on the next) are counted from the training forward
    passes; counts come back in ``history.forgetting`` aligned with ``track``.
    """
    t0 = time.perf_counter()
    dev = device_of(model)
    n = len(source)
    steps_per_epoch = max(1, math.ceil(n / batch_size))
    total = max(1, epochs * steps_per_epoch)
    opt = make_optimizer(model.parameters(), optimizer, lr, momentum, weight_decay)
    sched = torch.optim.lr_scheduler.LambdaLR(opt, lambda s: 0.5 * (1 + math.cos(math.pi * min(s, total) / total)))

    hist = FitHistory()
    slot = None
    if track is not None:
        slot = np.full(n, -1, dtype=np.int64)
        slot[np.asarray(track, dtype=np.int64)] = np.arange(len(track))
        prev = np.zeros(len(track), dtype=bool)
        seen = np.zeros(len(track), dtype=bool)
        events = np.zeros(len(track), dtype=np.int64)
    last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}

    for epoch in range(epochs):
        model.train()
        order = torch.randperm(n, generator=gen).numpy()
        loss_sum, correct = 0.0, 0
        for s in range(0, n, batch_size):
            idx = order[s:s + batch_size]
            x, y = source.batch(idx)
            # augmentation stays on the CPU so the seeded stream is device independent
            x = augment(x, transforms, gen).to(dev, non_blocking=True)
            y = y.to(dev, non_blocking=True)
            logits = model(x)
            loss = F.cross_entropy(logits, y)
            if not torch.isfinite(loss):
                raise TrainingDiverged(f"non-finite loss at epoch {epoch}", last_good, epoch)
            opt.zero_grad(set_to_none=True)
            loss.backward()
            opt.step()
            sched.step()
            hit = (logits.detach().argmax(1) == y).cpu().numpy()
            loss_sum += float(loss.detach()) * len(idx)
            correct += int(hit.sum())
            if slot is not None:
                pos = slot[idx]
                m = pos >= 0
                p, h = pos[m], hit[m]
                events[p] += (seen[p] & prev[p] & ~h)
                prev[p] = h
                seen[p] = True
        hist.loss.append(loss_sum / n)
        hist.accuracy.append(correct / n)
        last_good = {k: v.detach().clone() for k, v in model.state_dict().items()}
        log.debug("epoch %d loss %.4f acc %.4f", epoch, hist.loss[-1], hist.accuracy[-1])
    if slot is not None:
        hist.forgetting = events
    hist.seconds = time.perf_counter() - t0
    return hist


def predict(model: torch.nn.Module, x: torch.Tensor, batch_size: int = 512) -> np.ndarray:
    model.eval()
    dev = device_of(model)
    out = []
    with torch.no_grad():
        for s in range(0, len(x), batch_size):
            out.append(model(x[s:s + batch_size].to(dev)).argmax(1).cpu().numpy())
    return np.concatenate(out) if out else np.zeros(0, dtype=np.int64)


def state_hash(model: torch.nn.Module) -> str:
    h = hashlib.sha256()
    for k, v in sorted(model.state_dict().items()):
        h.update(k.encode())
        arr = v.detach().cpu().contiguous().numpy()
        h.update(arr.astype(arr.dtype.newbyteorder("<")).tobytes())
    return h.hexdigest()
