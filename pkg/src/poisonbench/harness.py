"""Victim phase: poisoned training view, victim training and ASR/BA evaluation."""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .core import ArtifactStore, InvariantError, PoisonPlan, TriggerSpec, canonical_json, sha256_hex, torch_seed_from
from .data import ImageDataset
from .models import build_model
from .training import TRANSFORMS, FitHistory, default_device, device_of, fit, state_hash
from .triggers import apply_trigger_batch

log = logging.getLogger(__name__)

VICTIM_ARCHITECTURES = ("vgg13", "vgg16", "resnet18", "preact_resnet18", "small_cnn")


@dataclass(frozen=True)
class VictimConfig:
    architecture: str = "resnet18"
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    transforms: tuple = ("random_crop", "random_horizontal_flip")
    epochs: int = 30
    batch_size: int = 256
    seed: int = 0
    width: Optional[int] = None

    def __post_init__(self):
        object.__setattr__(self, "transforms", tuple(self.transforms))
        if self.architecture not in VICTIM_ARCHITECTURES:
            raise InvariantError("architecture", f"unknown victim architecture {self.architecture!r}")
        if self.optimizer not in ("sgd", "adam"):
            raise InvariantError("optimizer", f"unknown optimizer {self.optimizer!r}")
        if not self.lr > 0:
            raise InvariantError("lr", "learning rate must be positive")
        if self.epochs < 1:
            raise InvariantError("epochs", "at least one epoch")
        if self.batch_size < 1:
            raise InvariantError("batch_size", "must be positive")
        if len(set(self.transforms)) != len(self.transforms):
            raise InvariantError("transforms", "duplicate transforms")
        unknown = set(self.transforms) - set(TRANSFORMS)
        if unknown:
            raise InvariantError("transforms", f"unknown transforms {sorted(unknown)}")

    def to_record(self) -> dict:
        rec = dataclasses.asdict(self)
        rec["transforms"] = list(self.transforms)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "VictimConfig":
        return cls(**rec)

    @property
    def hash(self) -> str:
        return sha256_hex(canonical_json(self.to_record()).encode())

    def replace(self, **changes) -> "VictimConfig":
        return dataclasses.replace(self, **changes)


class PoisonedView:
    """Training view with the plan's samples replaced by (T(x, t), k).

    The clean dataset is never touched; poisoned pixels live in a separate
    array and are swapped in per batch.
    """

    def __init__(self, dataset: ImageDataset, plan: PoisonPlan, poisoned: np.ndarray, labels: np.ndarray):
        self.dataset = dataset
        self.plan = plan
        self.indices = np.asarray(plan.indices, dtype=np.int64)
        self.poisoned = poisoned
        self.labels = labels
        self._slot = np.full(len(dataset), -1, dtype=np.int64)
        self._slot[self.indices] = np.arange(len(self.indices))

    def __len__(self) -> int:
        return len(self.dataset)

    def images(self, idx) -> np.ndarray:
        idx = np.asarray(idx, dtype=np.int64)
        x = self.dataset.floats(idx)
        slot = self._slot[idx]
        hit = slot >= 0
        if hit.any():
            x = np.array(x, copy=True)
            x[hit] = self.poisoned[slot[hit]]
        return x

    def batch(self, idx) -> tuple[torch.Tensor, torch.Tensor]:
        idx = np.asarray(idx, dtype=np.int64)
        return torch.from_numpy(np.ascontiguousarray(self.images(idx))), torch.from_numpy(self.labels[idx])


def build_poisoned_dataset(dataset: ImageDataset, plan: PoisonPlan) -> PoisonedView:
    if plan.dataset.identity() != dataset.ref.identity():
        raise ValueError(f"plan targets {plan.dataset.to_record()}, not {dataset.ref.to_record()}")
    idx = np.asarray(plan.indices, dtype=np.int64)
    if idx.size and (idx.min() < 0 or idx.max() >= len(dataset)):
        raise IndexError("plan index out of range")
    if idx.size:
        poisoned = apply_trigger_batch(dataset.floats(idx), plan.trigger)
    else:
        poisoned = np.zeros((0, *dataset.image_shape), dtype=np.float32)
    labels = np.array(dataset.labels, copy=True)
    labels[idx] = plan.target_label
    return PoisonedView(dataset, plan, poisoned, labels)


@dataclass
class VictimModel:
    model: torch.nn.Module
    config: VictimConfig
    weights_ref: str = ""
    history: FitHistory = field(default_factory=FitHistory)


def build_victim(config: VictimConfig, dataset: ImageDataset) -> torch.nn.Module:
    mean, std = dataset.normalization
    return build_model(config.architecture, dataset.ref.num_classes, dataset.image_shape[0], mean, std,
                       width=config.width)


def train_victim(view, config: VictimConfig, rng: Optional[np.random.Generator] = None,
                 store: Optional[ArtifactStore] = None, track=None) -> VictimModel:
    """Minimize the joint clean + poisoned empirical risk over ``view``."""
    rng = rng if rng is not None else np.random.default_rng(config.seed)
    dataset = view.dataset if isinstance(view, PoisonedView) else view
    torch.manual_seed(torch_seed_from(rng))
    model = build_victim(config, dataset).to(default_device())
    gen = torch.Generator().manual_seed(torch_seed_from(rng))
    hist = fit(model, view, optimizer=config.optimizer, lr=config.lr, momentum=config.momentum,
               weight_decay=config.weight_decay, epochs=config.epochs, batch_size=config.batch_size,
               transforms=config.transforms, gen=gen, track=track)
    model.eval()
    handle = VictimModel(model, config, state_hash(model), hist)
    if store is not None:
        torch.save(model.state_dict(), store.path("models", f"{handle.weights_ref}.pt"))
    log.info("victim %s trained in %.1fs, final loss %.4f", config.architecture, hist.seconds,
             hist.loss[-1] if hist.loss else float("nan"))
    return handle


def evaluate(model, test: ImageDataset, trigger: TriggerSpec, target: int, batch_size: int = 512) -> tuple[float, float]:
    """Return ``(asr, ba)``.

    BA is clean test accuracy. ASR is the fraction of non-target test samples
    classified as ``target`` once the trigger is applied.
    """
    net = model.model if isinstance(model, VictimModel) else model
    net.eval()
    eligible = np.flatnonzero(test.labels != target)
    if len(test) == 0 or len(eligible) == 0:
        raise ValueError("no eligible (non-target) test samples")
    dev = device_of(net)
    correct = 0
    hits = 0
    with torch.no_grad():
        for s in range(0, len(test), batch_size):
            idx = np.arange(s, min(s + batch_size, len(test)))
            x = test.floats(idx)
            correct += int((net(torch.from_numpy(x).to(dev)).argmax(1).cpu().numpy() == test.labels[idx]).sum())
            keep = test.labels[idx] != target
            if keep.any():
                xp = apply_trigger_batch(x[keep], trigger)
                hits += int((net(torch.from_numpy(xp).to(dev)).argmax(1).cpu().numpy() == target).sum())
    return hits / len(eligible), correct / len(test)
