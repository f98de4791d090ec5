"""Feature extractor E and the clean/poisoned cosine-similarity table."""

from __future__ import annotations

import dataclasses
import json
import logging
import time
import warnings
from dataclasses import dataclass, field
from typing import Optional

import numpy as np
import torch

from .core import ArtifactStore, DatasetRef, TriggerSpec, canonical_json, derive_rng, sha256_hex, torch_seed_from
from .data import ImageDataset
from .models import build_model
from .training import TrainingDiverged, default_device, device_of, fit, predict, state_hash
from .triggers import apply_trigger_batch

log = logging.getLogger(__name__)

EXTRACTOR_ARCHITECTURES = ("resnet18", "imagenet_pretrained", "custom")


@dataclass(frozen=True)
class TrainRecipe:
    architecture: str = "resnet18"
    optimizer: str = "sgd"
    lr: float = 0.01
    momentum: float = 0.9
    weight_decay: float = 5e-4
    epochs: int = 70
    batch_size: int = 256
    transforms: tuple = ("random_crop", "random_horizontal_flip")
    width: Optional[int] = None
    seed: int = 0

    def to_record(self) -> dict:
        rec = dataclasses.asdict(self)
        rec["transforms"] = list(self.transforms)
        return rec

    @classmethod
    def from_record(cls, rec: dict) -> "TrainRecipe":
        rec = dict(rec)
        rec["transforms"] = tuple(rec.get("transforms", ()))
        return cls(**rec)


@dataclass
class ExtractorHandle:
    architecture: str
    weights_ref: str
    embed_dim: int
    train_recipe: dict
    num_classes: int = 0
    clean_accuracy: Optional[float] = None
    train_seconds: float = 0.0
    loss_history: list = field(default_factory=list, repr=False)
    model: Optional[torch.nn.Module] = field(default=None, repr=False, compare=False)

    @property
    def extractor_id(self) -> str:
        return f"{self.architecture}:{self.weights_ref[:16]}"

    def to_record(self) -> dict:
        rec = dataclasses.asdict(self)
        rec.pop("model")
        return rec


class FlattenFeatures(torch.nn.Module):
    """Identity extractor: the embedding is the flattened pixel vector."""

    def features(self, x):
        return torch.flatten(x, 1)

    def forward(self, x):
        return self.features(x)


def identity_extractor(image_shape) -> ExtractorHandle:
    dim = int(np.prod(image_shape))
    return ExtractorHandle("custom", "identity", dim, {"architecture": "identity"}, model=FlattenFeatures())


def _build(recipe: TrainRecipe, dataset: ImageDataset):
    arch = "small_cnn" if recipe.architecture == "custom" else recipe.architecture
    mean, std = dataset.normalization
    return build_model(arch, dataset.ref.num_classes, dataset.image_shape[0], mean, std, width=recipe.width)


def train_extractor(dataset: ImageDataset, recipe: TrainRecipe = TrainRecipe(),
                    rng: Optional[np.random.Generator] = None, test: Optional[ImageDataset] = None,
                    store: Optional[ArtifactStore] = None) -> ExtractorHandle:
    """Train a clean classifier whose penultimate layer serves as E."""
    if dataset.ref.split != "train":
        raise ValueError("extractors are trained on a training split")
    if recipe.architecture not in EXTRACTOR_ARCHITECTURES + ("small_cnn",):
        raise ValueError(f"unknown extractor architecture {recipe.architecture!r}")
    rng = rng if rng is not None else derive_rng(recipe.seed, "extractor")
    gen = torch.Generator().manual_seed(torch_seed_from(rng))
    torch.manual_seed(torch_seed_from(rng))
    model = _build(recipe, dataset).to(default_device())
    t0 = time.perf_counter()
    try:
        hist = fit(model, dataset, optimizer=recipe.optimizer, lr=recipe.lr, momentum=recipe.momentum,
                   weight_decay=recipe.weight_decay, epochs=recipe.epochs, batch_size=recipe.batch_size,
                   transforms=recipe.transforms, gen=gen)
    except TrainingDiverged as exc:
        ref = ""
        if store is not None and exc.checkpoint is not None:
            ref = sha256_hex(repr(sorted(exc.checkpoint)).encode() + str(exc.epoch).encode())
            torch.save(exc.checkpoint, store.path("models", f"diverged-{ref}.pt"))
        raise TrainingDiverged(f"{exc} (last good checkpoint: {ref or 'not stored'})", exc.checkpoint, exc.epoch)
    seconds = time.perf_counter() - t0
    model.eval()
    acc = None
    if test is not None:
        acc = float((predict(model, test.tensor()) == test.labels).mean())
        log.info("extractor %s clean test accuracy %.4f", recipe.architecture, acc)
    handle = ExtractorHandle(recipe.architecture, state_hash(model), model.embed_dim, recipe.to_record(),
                             dataset.ref.num_classes, acc, seconds, hist.loss, model)
    if store is not None:
        torch.save(model.state_dict(), store.path("models", f"{handle.weights_ref}.pt"))
    return handle


def extractor_key(dataset_ref: DatasetRef, recipe: TrainRecipe) -> str:
    return sha256_hex(canonical_json({"dataset": dataset_ref.to_record(), "recipe": recipe.to_record()}).encode())


def get_or_train_extractor(dataset: ImageDataset, recipe: TrainRecipe, store: ArtifactStore,
                           test: Optional[ImageDataset] = None) -> tuple[ExtractorHandle, bool]:
    """Return ``(handle, cached)``, training and persisting on a cache miss."""
    key = extractor_key(dataset.ref, recipe)
    index = store.path("json", "extractor_index", f"{key}.json")
    if index.exists():
        rec = store.get_json("extractors", index.read_text().strip())
        model = _build(TrainRecipe.from_record(rec["train_recipe"]), dataset)
        model.load_state_dict(torch.load(store.path("models", f"{rec['weights_ref']}.pt"), map_location="cpu",
                                         weights_only=True))
        model.to(default_device()).eval()
        return ExtractorHandle(**rec, model=model), True
    handle = train_extractor(dataset, recipe, derive_rng(recipe.seed, "extractor"), test, store)
    h = store.put_json("extractors", handle.to_record())
    index.write_text(h)
    return handle, False


def embed(extractor: ExtractorHandle, images, batch_size: int = 256) -> np.ndarray:
    """Penultimate activations, one row per image, computed in eval mode."""
    arr = np.asarray(images, dtype=np.float32)
    x = torch.from_numpy(arr if arr.flags.writeable else arr.copy())
    if x.ndim != 4:
        raise ValueError(f"expected an NCHW batch, got shape {tuple(x.shape)}")
    model = extractor.model
    model.eval()
    dev = device_of(model)
    rows = []
    with torch.no_grad():
        for s in range(0, len(x), batch_size):
            rows.append(model.features(x[s:s + batch_size].to(dev)).reshape(min(batch_size, len(x) - s), -1).cpu())
    out = torch.cat(rows).numpy() if rows else np.zeros((0, extractor.embed_dim), np.float32)
    if out.shape[1] != extractor.embed_dim:
        raise ValueError(f"extractor produced {out.shape[1]} features, expected {extractor.embed_dim}")
    return out


def cosine_rows(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, int]:
    """Row-wise cosine similarity; rows with a zero-norm side yield 0.

    Returns the values and the number of guarded rows.
    """
    a = np.asarray(a, dtype=np.float64)
    b = np.asarray(b, dtype=np.float64)
    na = np.linalg.norm(a, axis=1)
    nb = np.linalg.norm(b, axis=1)
    zero = (na == 0) | (nb == 0)
    denom = np.where(zero, 1.0, na * nb)
    out = np.where(zero, 0.0, np.einsum("ij,ij->i", a, b) / denom)
    return np.clip(out, -1.0, 1.0), int(zero.sum())


@dataclass(eq=False)
class SimilarityTable:
    dataset: DatasetRef
    trigger: TriggerSpec
    extractor_id: str
    values: np.ndarray
    zero_norm: int = 0
    seconds: float = 0.0

    def __post_init__(self):
        self.values = np.asarray(self.values, dtype=np.float64)
        if len(self.values) != self.dataset.size:
            raise ValueError("similarity table length differs from dataset size")
        if np.any(self.values < -1) or np.any(self.values > 1):
            raise ValueError("similarity values must lie in [-1, 1]")

    def __len__(self):
        return len(self.values)

    @property
    def key(self) -> str:
        rec = {"dataset": self.dataset.to_record(), "trigger": self.trigger.hash, "extractor": self.extractor_id}
        return sha256_hex(canonical_json(rec).encode())

    def save(self, store: ArtifactStore) -> str:
        key = self.key
        store.put_trigger(self.trigger)
        np.save(store.path("tables", f"{key}.npy"), self.values.astype("<f8"))
        header = [
            f"dataset {canonical_json(self.dataset.to_record())}",
            f"trigger {self.trigger.hash}",
            f"extractor {self.extractor_id}",
            f"zero_norm {self.zero_norm}",
        ]
        store.path("tables", f"{key}.txt").write_text("\n".join(header) + "\n", encoding="utf-8")
        return key

    @classmethod
    def load(cls, store: ArtifactStore, key: str, root_path: str = "") -> "SimilarityTable":
        header = dict(line.split(" ", 1) for line in store.path("tables", f"{key}.txt").read_text().splitlines())
        values = np.load(store.path("tables", f"{key}.npy"))
        return cls(DatasetRef.from_record(json.loads(header["dataset"]), root_path), store.get_trigger(header["trigger"]),
                   header["extractor"], values, int(header["zero_norm"]))


def similarity_table(dataset: ImageDataset, trigger: TriggerSpec, extractor: ExtractorHandle,
                     batch_size: int = 256, shards: int = 1) -> SimilarityTable:
    """s_i = cos(E(x_i), E(T(x_i, t))) for every training index.

    ``shards`` splits the index range into contiguous pieces that are embedded
    independently and merged by index; the result does not depend on it.
    """
    t0 = time.perf_counter()
    n = len(dataset)
    values = np.empty(n, dtype=np.float64)
    zero = 0
    for part in np.array_split(np.arange(n), max(1, shards)):
        for s in range(0, len(part), batch_size):
            idx = part[s:s + batch_size]
            clean = dataset.floats(idx)
            poisoned = apply_trigger_batch(clean, trigger)
            vals, z = cosine_rows(embed(extractor, clean, batch_size), embed(extractor, poisoned, batch_size))
            values[idx] = vals
            zero += z
    if zero:
        warnings.warn(f"{zero} zero-norm embeddings; their similarity was set to 0", RuntimeWarning)
    return SimilarityTable(dataset.ref, trigger, extractor.extractor_id, values, zero, time.perf_counter() - t0)
