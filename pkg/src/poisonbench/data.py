"""Dataset registry.

Datasets are held fully in memory as ``(N, C, H, W)`` arrays; uint8 for real
image corpora, float32 for synthetic data. Nothing here downloads anything:
real datasets must already exist under ``root_path``.
"""

from __future__ import annotations

import functools
from dataclasses import dataclass
from pathlib import Path

import numpy as np
import torch

from .core import DatasetRef, derive_rng, sha256_hex

NORMALIZATION = {
    "cifar10": ((0.4914, 0.4822, 0.4465), (0.2470, 0.2435, 0.2616)),
    "cifar100": ((0.5071, 0.4865, 0.4409), (0.2673, 0.2564, 0.2762)),
    "tiny-imagenet": ((0.4802, 0.4481, 0.3975), (0.2302, 0.2265, 0.2262)),
}
NUM_CLASSES = {"cifar10": 10, "cifar100": 100, "tiny-imagenet": 200}


class DatasetUnavailable(FileNotFoundError):
    pass


@dataclass(eq=False)
class ImageDataset:
    ref: DatasetRef
    images: np.ndarray
    labels: np.ndarray

    def __post_init__(self):
        self.images.setflags(write=False)
        self.labels = np.asarray(self.labels, dtype=np.int64)
        self.labels.setflags(write=False)
        if len(self.images) != self.ref.size or len(self.labels) != self.ref.size:
            raise ValueError("dataset size does not match its reference")
        if self.labels.size and (self.labels.min() < 0 or self.labels.max() >= self.ref.num_classes):
            raise ValueError("label outside [0, num_classes)")

    def __len__(self) -> int:
        return self.ref.size

    @property
    def image_shape(self) -> tuple[int, int, int]:
        return tuple(self.images.shape[1:])

    def floats(self, idx=None) -> np.ndarray:
        """Images at ``idx`` (all if None) as float32 in [0, 1]."""
        x = self.images if idx is None else self.images[idx]
        if x.dtype == np.uint8:
            return x.astype(np.float32) / 255.0
        return np.asarray(x, dtype=np.float32)

    def tensor(self, idx=None) -> torch.Tensor:
        x = np.ascontiguousarray(self.floats(idx))
        return torch.from_numpy(x if x.flags.writeable else x.copy())

    def batch(self, idx) -> tuple[torch.Tensor, torch.Tensor]:
        return self.tensor(idx), torch.from_numpy(self.labels[idx])

    @property
    def normalization(self) -> tuple[tuple[float, ...], tuple[float, ...]]:
        if self.ref.name in NORMALIZATION:
            return NORMALIZATION[self.ref.name]
        c = self.image_shape[0]
        return (0.5,) * c, (0.25,) * c

    def content_hash(self) -> str:
        return sha256_hex(np.ascontiguousarray(self.images).tobytes() + self.labels.astype("<i8").tobytes())


def from_arrays(images: np.ndarray, labels, num_classes: int | None = None, split: str = "train",
                name: str = "synthetic", root_path: str = "arrays") -> ImageDataset:
    labels = np.asarray(labels, dtype=np.int64)
    if num_classes is None:
        num_classes = int(labels.max()) + 1
    ref = DatasetRef(name, split, num_classes, len(labels), root_path)
    return ImageDataset(ref, np.asarray(images), labels)


# ---------------------------------------------------------------------------
# synthetic
# ---------------------------------------------------------------------------


def synthetic_spec(seed: int = 0, shape=(3, 32, 32), noise: float = 0.12) -> str:
    return f"seed={seed};shape={'x'.join(str(s) for s in shape)};noise={noise}"


def _parse_synthetic(spec: str) -> dict:
    out = {"seed": 0, "shape": (3, 32, 32), "noise": 0.12}
    for part in filter(None, spec.split(";")):
        key, _, value = part.partition("=")
        if key == "seed":
            out["seed"] = int(value)
        elif key == "shape":
            out["shape"] = tuple(int(v) for v in value.split("x"))
        elif key == "noise":
            out["noise"] = float(value)
    return out


def _smooth_field(rng: np.random.Generator, shape, cells: int) -> np.ndarray:
    c, h, w = shape
    coarse = torch.from_numpy(rng.standard_normal((1, c, cells, cells)).astype(np.float32))
    fine = torch.nn.functional.interpolate(coarse, size=(h, w), mode="bilinear", align_corners=False)
    return fine[0].numpy()


def make_synthetic(size: int, num_classes: int = 10, split: str = "train", seed: int = 0,
                   shape=(3, 32, 32), noise: float = 0.12) -> ImageDataset:
    """Class-conditional smooth-texture images.

    Each class owns a low-frequency prototype; samples are the prototype with a
    random per-sample amplitude, a random texture of their own and pixel noise.
    Prototypes depend only on ``seed``, so train and test splits share classes.
    """
    shape = tuple(shape)
    protos = np.stack([_smooth_field(derive_rng(seed, f"synthetic/proto/{c}"), shape, 4)
                       for c in range(num_classes)])
    rng = derive_rng(seed, f"synthetic/{split}/{size}")
    labels = np.arange(size) % num_classes
    rng.shuffle(labels)
    amp = rng.uniform(0.15, 0.3, size=(size, 1, 1, 1)).astype(np.float32)
    own = np.stack([_smooth_field(rng, shape, 6) for _ in range(size)]) if size else np.zeros((0, *shape))
    pix = rng.standard_normal((size, *shape)).astype(np.float32)
    images = 0.5 + amp * protos[labels] + 0.12 * own + noise * 0.5 * pix
    images = np.clip(images, 0.0, 1.0).astype(np.float32)
    ref = DatasetRef("synthetic", split, num_classes, size, synthetic_spec(seed, shape, noise))
    return ImageDataset(ref, images, labels)


# ---------------------------------------------------------------------------
# real corpora
# ---------------------------------------------------------------------------


def _load_cifar(name: str, root: str, split: str) -> ImageDataset:
    from torchvision.datasets import CIFAR10, CIFAR100

    cls = CIFAR10 if name == "cifar10" else CIFAR100
    try:
        ds = cls(root, train=(split == "train"), download=False)
    except RuntimeError as exc:
        raise DatasetUnavailable(f"{name} not found under {root!r}") from exc
    images = np.ascontiguousarray(ds.data.transpose(0, 3, 1, 2))
    labels = np.asarray(ds.targets, dtype=np.int64)
    ref = DatasetRef(name, split, NUM_CLASSES[name], len(labels), str(root))
    return ImageDataset(ref, images, labels)


def _load_tiny_imagenet(root: str, split: str) -> ImageDataset:
    from PIL import Image

    base = Path(root) / "tiny-imagenet-200"
    if not base.exists():
        base = Path(root)
    wnids_file = base / "wnids.txt"
    if not wnids_file.exists():
        raise DatasetUnavailable(f"tiny-imagenet not found under {root!r}")
    wnids = wnids_file.read_text().split()
    cls_of = {w: i for i, w in enumerate(wnids)}
    files: list[tuple[Path, int]] = []
    if split == "train":
        for w in wnids:
            for f in sorted((base / "train" / w / "images").glob("*.JPEG")):
                files.append((f, cls_of[w]))
    else:
        for line in (base / "val" / "val_annotations.txt").read_text().splitlines():
            fname, w = line.split("\t")[:2]
            files.append((base / "val" / "images" / fname, cls_of[w]))
    images = np.empty((len(files), 3, 64, 64), dtype=np.uint8)
    for i, (f, _) in enumerate(files):
        images[i] = np.asarray(Image.open(f).convert("RGB")).transpose(2, 0, 1)
    labels = np.array([c for _, c in files], dtype=np.int64)
    return ImageDataset(DatasetRef("tiny-imagenet", split, 200, len(files), str(root)), images, labels)


@functools.lru_cache(maxsize=8)
def _load_cached(name: str, split: str, root: str, num_classes: int, size: int) -> ImageDataset:
    if name in ("cifar10", "cifar100"):
        return _load_cifar(name, root, split)
    if name == "tiny-imagenet":
        return _load_tiny_imagenet(root, split)
    p = _parse_synthetic(root)
    return make_synthetic(size, num_classes, split, p["seed"], p["shape"], p["noise"])


def load_dataset(ref: DatasetRef) -> ImageDataset:
    if ref.name == "synthetic":
        ds = _load_cached(ref.name, ref.split, ref.root_path, ref.num_classes, ref.size)
    else:
        ds = _load_cached(ref.name, ref.split, ref.root_path, 0, 0)
    if ds.ref.size != ref.size or ds.ref.num_classes != ref.num_classes:
        raise ValueError(f"dataset on disk does not match reference {ref}")
    return ds


def open_dataset(name: str, split: str, root: str = "", size: int | None = None,
                 num_classes: int | None = None) -> ImageDataset:
    """Resolve a dataset by name, reading sizes from disk for real corpora."""
    if name == "synthetic":
        return load_dataset(DatasetRef(name, split, num_classes or 10, size or 1000, root or synthetic_spec()))
    return _load_cached(name, split, root, 0, 0)
