"""Domain types, RNG discipline and the on-disk artifact store.

Everything that ends up in a manifest or the results log is defined here so
that hashing and serialization live in one place.
"""

from __future__ import annotations

import hashlib
import json
import os
import time
from dataclasses import dataclass, field
from decimal import ROUND_HALF_UP, Decimal
from pathlib import Path
from typing import Any, Callable, Iterable, Iterator, Optional

import numpy as np
import torch
from filelock import FileLock

DATASET_NAMES = ("cifar10", "cifar100", "tiny-imagenet", "synthetic")
SPLITS = ("train", "test")
TRIGGER_KINDS = ("badnets_patch", "blended", "optimized_uap", "plugin")

MANIFEST_MAGIC = "poisonbench-plan 1"
RESULT_FIELDS = ("plan", "victim", "asr", "ba", "t_select", "t_train", "t_eval", "seed", "ts")


class InvariantError(ValueError):
    """A domain object violates one of its invariants.

    ``field`` names the offending attribute.
    """

    def __init__(self, field: str, message: str):
        super().__init__(f"{field}: {message}")
        self.field = field


def canonical_json(obj: Any) -> str:
    return json.dumps(obj, sort_keys=True, separators=(",", ":"), ensure_ascii=False)


def sha256_hex(data: bytes) -> str:
    return hashlib.sha256(data).hexdigest()


def tensor_hash(arr: np.ndarray) -> str:
    """Content hash of a float tensor, independent of platform byte order."""
    a = np.ascontiguousarray(arr, dtype="<f4")
    head = f"f4|{','.join(str(s) for s in a.shape)}|".encode()
    return sha256_hex(head + a.tobytes())


def poison_count(rate: float, size: int) -> int:
    """P = round(r*N), half rounded up."""
    return int((Decimal(repr(float(rate))) * size).to_integral_value(rounding=ROUND_HALF_UP))


# ---------------------------------------------------------------------------
# RNG
# ---------------------------------------------------------------------------


def _scope_key(scope: str) -> tuple[int, ...]:
    digest = hashlib.sha256(scope.encode("utf-8")).digest()
    return tuple(int(w) for w in np.frombuffer(digest, dtype="<u4"))


def derive_rng(seed: int, scope: str) -> np.random.Generator:
    """Independent, reproducible stream for ``(seed, scope)``.

    The scope string is hashed into the SeedSequence spawn key, so streams for
    different scopes never share state even under the same seed.
    """
    entropy = int(seed) % (1 << 64)
    ss = np.random.SeedSequence(entropy=entropy, spawn_key=_scope_key(scope))
    return np.random.Generator(np.random.PCG64(ss))


def derive_torch_generator(seed: int, scope: str) -> torch.Generator:
    g = torch.Generator()
    g.manual_seed(int(derive_rng(seed, scope).integers(0, 2**63 - 1)))
    return g


def torch_seed_from(rng: np.random.Generator) -> int:
    return int(rng.integers(0, 2**63 - 1))


# ---------------------------------------------------------------------------
# Dataset reference
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class DatasetRef:
    name: str
    split: str
    num_classes: int
    size: int
    root_path: str = ""

    def __post_init__(self):
        if self.name not in DATASET_NAMES:
            raise InvariantError("dataset.name", f"unknown dataset {self.name!r}")
        if self.split not in SPLITS:
            raise InvariantError("dataset.split", f"unknown split {self.split!r}")
        if self.num_classes < 1:
            raise InvariantError("dataset.num_classes", "must be positive")
        if self.size < 1:
            raise InvariantError("dataset.size", "must be positive")

    def to_record(self) -> dict:
        # root_path is machine-local and left out of hashes, except for synthetic
        # data where it holds the generator parameters
        rec = {"name": self.name, "split": self.split, "num_classes": self.num_classes, "size": self.size}
        if self.name == "synthetic":
            rec["root"] = self.root_path
        return rec

    @classmethod
    def from_record(cls, rec: dict, root_path: str = "") -> "DatasetRef":
        root = rec.get("root", root_path)
        return cls(rec["name"], rec["split"], int(rec["num_classes"]), int(rec["size"]), root)

    def identity(self) -> tuple:
        return tuple(self.to_record().values())


# ---------------------------------------------------------------------------
# Trigger specification
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class TriggerSpec:
    """Declarative trigger description.

    Images are CHW float arrays in [0, 1]. ``location`` is the (row, col) of the
    patch's top-left corner; negative values count from the bottom/right edge.
    """

    kind: str
    patch: Optional[np.ndarray] = None
    location: tuple[int, int] = (-3, -3)
    blend_image: Optional[np.ndarray] = None
    blend_lambda: float = 0.15
    perturbation: Optional[np.ndarray] = None
    linf_bound: float = 8 / 255
    plugin_id: str = ""
    plugin_params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.kind not in TRIGGER_KINDS:
            raise InvariantError("trigger.kind", f"unknown trigger kind {self.kind!r}")
        if self.kind == "badnets_patch":
            if self.patch is None or self.patch.ndim != 3:
                raise InvariantError("trigger.patch", "badnets trigger needs a CHW patch")
            object.__setattr__(self, "patch", np.asarray(self.patch, dtype=np.float32))
            object.__setattr__(self, "location", tuple(int(v) for v in self.location))
        elif self.kind == "blended":
            if not 0.0 <= self.blend_lambda <= 1.0:
                raise InvariantError("trigger.blend_lambda", "lambda must lie in [0, 1]")
            if self.blend_image is None or self.blend_image.ndim != 3:
                raise InvariantError("trigger.blend_image", "blended trigger needs a CHW image")
            object.__setattr__(self, "blend_image", np.asarray(self.blend_image, dtype=np.float32))
        elif self.kind == "optimized_uap":
            if not self.linf_bound > 0:
                raise InvariantError("trigger.linf_bound", "eps must be positive")
            if self.perturbation is None or self.perturbation.ndim != 3:
                raise InvariantError("trigger.perturbation", "UAP trigger needs a CHW perturbation")
            delta = np.asarray(self.perturbation, dtype=np.float32)
            if np.abs(delta).max(initial=0.0) > self.linf_bound + 1e-6:
                raise InvariantError("trigger.perturbation", "perturbation exceeds linf_bound")
            object.__setattr__(self, "perturbation", delta)
        elif not self.plugin_id:
            raise InvariantError("trigger.plugin_id", "plugin trigger needs a plugin_id")

    def tensors(self) -> dict[str, np.ndarray]:
        out = {}
        for name in ("patch", "blend_image", "perturbation"):
            value = getattr(self, name)
            if value is not None:
                out[name] = value
        return out

    def to_record(self) -> dict:
        rec: dict[str, Any] = {"kind": self.kind}
        if self.kind == "badnets_patch":
            rec["patch"] = tensor_hash(self.patch)
            rec["location"] = list(self.location)
        elif self.kind == "blended":
            rec["blend_image"] = tensor_hash(self.blend_image)
            rec["lambda"] = float(self.blend_lambda)
        elif self.kind == "optimized_uap":
            rec["perturbation"] = tensor_hash(self.perturbation)
            rec["eps"] = float(self.linf_bound)
        else:
            rec["plugin_id"] = self.plugin_id
            rec["params"] = self.plugin_params
        return rec

    @classmethod
    def from_record(cls, rec: dict, load_tensor: Callable[[str], np.ndarray]) -> "TriggerSpec":
        kind = rec["kind"]
        if kind == "badnets_patch":
            return cls(kind, patch=load_tensor(rec["patch"]), location=tuple(rec["location"]))
        if kind == "blended":
            return cls(kind, blend_image=load_tensor(rec["blend_image"]), blend_lambda=rec["lambda"])
        if kind == "optimized_uap":
            return cls(kind, perturbation=load_tensor(rec["perturbation"]), linf_bound=rec["eps"])
        return cls(kind, plugin_id=rec["plugin_id"], plugin_params=dict(rec.get("params", {})))

    @property
    def hash(self) -> str:
        return sha256_hex(canonical_json(self.to_record()).encode())

    def __eq__(self, other):
        return isinstance(other, TriggerSpec) and self.hash == other.hash

    def __hash__(self):
        return hash(self.hash)


# ---------------------------------------------------------------------------
# Poison plan
# ---------------------------------------------------------------------------


@dataclass(frozen=True, eq=False)
class PoisonPlan:
    dataset: DatasetRef
    target_label: int
    poisoning_rate: float
    indices: tuple[int, ...]
    trigger: TriggerSpec
    strategy_tag: str
    seed: int

    def __post_init__(self):
        object.__setattr__(self, "indices", tuple(sorted(int(i) for i in self.indices)))

    @property
    def size(self) -> int:
        return len(self.indices)

    def validate(self) -> None:
        n = self.dataset.size
        if not 0.0 < self.poisoning_rate < 1.0:
            raise InvariantError("poisoning_rate", f"r={self.poisoning_rate} outside (0, 1)")
        if not 0 <= self.target_label < self.dataset.num_classes:
            raise InvariantError("target_label", f"k={self.target_label} outside [0, {self.dataset.num_classes})")
        if len(set(self.indices)) != len(self.indices):
            raise InvariantError("indices", "duplicate indices")
        if self.indices and (self.indices[0] < 0 or self.indices[-1] >= n):
            raise InvariantError("indices", f"index out of range [0, {n})")
        expected = poison_count(self.poisoning_rate, n)
        if len(self.indices) != expected:
            raise InvariantError("indices", f"expected round(r*N)={expected} indices, got {len(self.indices)}")
        if "\n" in self.strategy_tag:
            raise InvariantError("strategy_tag", "must be a single line")

    def to_manifest(self) -> bytes:
        lines = [
            MANIFEST_MAGIC,
            f"dataset {canonical_json(self.dataset.to_record())}",
            f"trigger {canonical_json(self.trigger.to_record())}",
            f"k {self.target_label}",
            f"r {float(self.poisoning_rate)!r}",
            f"seed {self.seed}",
            f"strategy_tag {self.strategy_tag}",
            f"indices {len(self.indices)}",
        ]
        lines.extend(str(i) for i in self.indices)
        return ("\n".join(lines) + "\n").encode("utf-8")

    @property
    def hash(self) -> str:
        return sha256_hex(self.to_manifest())

    def __eq__(self, other):
        return isinstance(other, PoisonPlan) and self.to_manifest() == other.to_manifest()

    def __hash__(self):
        return hash(self.hash)


def parse_manifest(data: bytes, load_tensor: Callable[[str], np.ndarray], root_path: str = "") -> PoisonPlan:
    lines = data.decode("utf-8").split("\n")
    if lines[0] != MANIFEST_MAGIC:
        raise ValueError("not a poison plan manifest")
    header = {}
    pos = 1
    while True:
        key, _, value = lines[pos].partition(" ")
        header[key] = value
        pos += 1
        if key == "indices":
            break
    count = int(header["indices"])
    indices = [int(x) for x in lines[pos : pos + count]]
    return PoisonPlan(
        dataset=DatasetRef.from_record(json.loads(header["dataset"]), root_path),
        target_label=int(header["k"]),
        poisoning_rate=float(header["r"]),
        indices=tuple(indices),
        trigger=TriggerSpec.from_record(json.loads(header["trigger"]), load_tensor),
        strategy_tag=header["strategy_tag"],
        seed=int(header["seed"]),
    )


# ---------------------------------------------------------------------------
# Run report
# ---------------------------------------------------------------------------


@dataclass(frozen=True)
class RunReport:
    plan: str
    victim: str
    asr: float
    ba: float
    t_select: float
    t_train: float
    t_eval: float
    seed: int
    ts: float = field(default_factory=time.time)

    def __post_init__(self):
        for name in ("asr", "ba"):
            v = getattr(self, name)
            if not 0.0 <= v <= 1.0:
                raise InvariantError(name, f"{v} outside [0, 1]")

    def to_line(self) -> str:
        return json.dumps({k: getattr(self, k) for k in RESULT_FIELDS}, separators=(",", ":"))

    @classmethod
    def from_line(cls, line: str) -> "RunReport":
        rec = json.loads(line)
        return cls(**{k: rec[k] for k in RESULT_FIELDS})


# ---------------------------------------------------------------------------
# Artifact store
# ---------------------------------------------------------------------------


class ArtifactStore:
    """Content-addressed directory of plans, tensors, configs and logs.

    Layout::

        plans/<sha>.plan        poison plan manifests
        tensors/<sha>.npy       trigger tensors (hash over raw float32 content)
        json/<kind>/<sha>.json  victim configs, extractor handles, ...
        models/<name>.pt        trained weights
        results.jsonl           append-only run reports
    """

    def __init__(self, root: str | os.PathLike):
        self.root = Path(root)
        self.root.mkdir(parents=True, exist_ok=True)
        self._lock = FileLock(str(self.root / ".lock"))

    @property
    def results_path(self) -> Path:
        return self.root / "results.jsonl"

    def path(self, *parts: str) -> Path:
        p = self.root.joinpath(*parts)
        p.parent.mkdir(parents=True, exist_ok=True)
        return p

    def _write_atomic(self, path: Path, data: bytes) -> None:
        with self._lock:
            if path.exists() and path.read_bytes() == data:
                return
            tmp = path.with_suffix(path.suffix + ".tmp")
            tmp.write_bytes(data)
            os.replace(tmp, path)

    def put_tensor(self, arr: np.ndarray) -> str:
        h = tensor_hash(arr)
        path = self.path("tensors", f"{h}.npy")
        if not path.exists():
            with self._lock:
                tmp = path.with_suffix(".tmp.npy")
                np.save(tmp, np.ascontiguousarray(arr, dtype="<f4"))
                os.replace(tmp, path)
        return h

    def get_tensor(self, h: str) -> np.ndarray:
        arr = np.load(self.path("tensors", f"{h}.npy"))
        if tensor_hash(arr) != h:
            raise ValueError(f"tensor {h} is corrupt")
        return arr.astype(np.float32)

    def put_trigger(self, spec: TriggerSpec) -> str:
        for arr in spec.tensors().values():
            self.put_tensor(arr)
        self.put_json("triggers", spec.to_record())
        return spec.hash

    def get_trigger(self, h: str) -> TriggerSpec:
        return TriggerSpec.from_record(self.get_json("triggers", h), self.get_tensor)

    def put_json(self, kind: str, obj: Any) -> str:
        data = canonical_json(obj).encode("utf-8")
        h = sha256_hex(data)
        self._write_atomic(self.path("json", kind, f"{h}.json"), data)
        return h

    def get_json(self, kind: str, h: str) -> Any:
        return json.loads(self.path("json", kind, f"{h}.json").read_text(encoding="utf-8"))

    def has_json(self, kind: str, h: str) -> bool:
        return (self.root / "json" / kind / f"{h}.json").exists()

    def append_line(self, name: str, line: str) -> None:
        with self._lock:
            with open(self.path(name), "a", encoding="utf-8", newline="\n") as fh:
                fh.write(line.rstrip("\n") + "\n")

    def read_lines(self, name: str) -> Iterator[str]:
        p = self.root / name
        if not p.exists():
            return
        with open(p, encoding="utf-8") as fh:
            for line in fh:
                if line.strip():
                    yield line

    def append_result(self, report: RunReport) -> None:
        self.append_line("results.jsonl", report.to_line())

    def read_results(self) -> list[RunReport]:
        return [RunReport.from_line(line) for line in self.read_lines("results.jsonl")]


def save_plan(plan: PoisonPlan, store: ArtifactStore) -> str:
    """Validate, persist and return the SHA-256 of the plan manifest."""
    plan.validate()
    store.put_trigger(plan.trigger)
    data = plan.to_manifest()
    h = sha256_hex(data)
    store._write_atomic(store.path("plans", f"{h}.plan"), data)
    return h


def load_plan(h: str, store: ArtifactStore, root_path: str = "") -> PoisonPlan:
    data = store.path("plans", f"{h}.plan").read_bytes()
    if sha256_hex(data) != h:
        raise ValueError(f"plan {h} is corrupt")
    return parse_manifest(data, store.get_tensor, root_path)


def has_plan(h: str, store: ArtifactStore) -> bool:
    return (store.root / "plans" / f"{h}.plan").exists()


def unique_sorted(indices: Iterable[int]) -> tuple[int, ...]:
    return tuple(sorted(set(int(i) for i in indices)))
