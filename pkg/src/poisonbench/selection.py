"""Poison-sample selection strategies.

Similarity ranks always break ties by ascending dataset index.
"""

from __future__ import annotations

import dataclasses
import logging
from dataclasses import dataclass
from typing import Optional

import numpy as np

from .core import DatasetRef, InvariantError, PoisonPlan, TriggerSpec, poison_count, torch_seed_from
from .data import ImageDataset
from .features import SimilarityTable
from .harness import VictimConfig, build_poisoned_dataset, train_victim

log = logging.getLogger(__name__)

STRATEGY_KINDS = ("random", "pfs", "top_r", "bottom_r", "fus", "fus_pfs")
COLUMN_ORDER = ("random", "pfs", "fus", "fus_pfs", "top_r", "bottom_r")


class PoolOverflow(ValueError):
    pass


@dataclass(frozen=True)
class StrategyConfig:
    kind: str = "pfs"
    m: int = 10
    fus_iterations: int = 15
    fus_keep_fraction: float = 0.5
    proxy_victim: Optional[VictimConfig] = None

    def __post_init__(self):
        if self.kind not in STRATEGY_KINDS:
            raise InvariantError("strategy.kind", f"unknown strategy {self.kind!r}")
        if self.m < 1:
            raise InvariantError("strategy.m", "m must be >= 1")
        if self.fus_iterations < 1:
            raise InvariantError("strategy.fus_iterations", "must be positive")
        if not 0 < self.fus_keep_fraction <= 1:
            raise InvariantError("strategy.fus_keep_fraction", "must lie in (0, 1]")
        if self.kind in ("fus", "fus_pfs") and self.proxy_victim is None:
            raise InvariantError("strategy.proxy_victim", "FUS strategies need a proxy victim")

    def check_pool(self, rate: float, size: int) -> None:
        if self.kind in ("pfs", "fus_pfs") and self.m * poison_count(rate, size) > size:
            raise PoolOverflow(f"m*P = {self.m * poison_count(rate, size)} exceeds N = {size}")

    @property
    def tag(self) -> str:
        if self.kind in ("random", "top_r", "bottom_r"):
            return self.kind
        if self.kind == "pfs":
            return f"pfs:m={self.m}"
        fus = f"it={self.fus_iterations},keep={self.fus_keep_fraction!r},proxy={self.proxy_victim.hash[:12]}"
        if self.kind == "fus":
            return f"fus:{fus}"
        return f"fus_pfs:m={self.m},{fus}"

    def to_record(self) -> dict:
        rec = dataclasses.asdict(self)
        rec["proxy_victim"] = self.proxy_victim.to_record() if self.proxy_victim else None
        return rec


def parse_tag(tag: str) -> tuple[str, dict]:
    kind, _, rest = tag.partition(":")
    params = dict(p.split("=", 1) for p in rest.split(",") if p)
    return kind, params


def _ref(dataset) -> DatasetRef:
    return dataset.ref if isinstance(dataset, (ImageDataset,)) else dataset


def _plan(ref: DatasetRef, r, indices, trigger, target_label, tag, seed) -> PoisonPlan:
    plan = PoisonPlan(ref, int(target_label), float(r), tuple(int(i) for i in indices), trigger, tag, int(seed))
    plan.validate()
    return plan


def similarity_order(values: np.ndarray, descending: bool = True) -> np.ndarray:
    """Indices sorted by similarity; ties resolved by ascending index."""
    v = np.asarray(values, dtype=np.float64)
    idx = np.arange(len(v))
    return np.lexsort((idx, -v if descending else v))


def select_random(dataset, r: float, rng: np.random.Generator, trigger: TriggerSpec, target_label: int = 0,
                  seed: int = 0) -> PoisonPlan:
    if not 0 < r < 1:
        raise ValueError("r must lie in (0, 1)")
    ref = _ref(dataset)
    p = poison_count(r, ref.size)
    picked = rng.choice(ref.size, size=p, replace=False)
    return _plan(ref, r, picked, trigger, target_label, "random", seed)


def pfs_pool(table: SimilarityTable, r: float, m: int) -> np.ndarray:
    """The m*P highest-similarity indices (the coarse poisoned set)."""
    n = len(table)
    p = poison_count(r, n)
    if m * p > n:
        raise PoolOverflow(f"m*P = {m * p} exceeds N = {n}")
    return np.sort(similarity_order(table.values)[: m * p])


def select_pfs(table: SimilarityTable, r: float, m: int, rng: np.random.Generator, target_label: int = 0,
               seed: int = 0) -> PoisonPlan:
    """Keep the m*P most similar samples, then draw P of them uniformly."""
    pool = pfs_pool(table, r, m)
    p = poison_count(r, len(table))
    picked = rng.choice(pool, size=p, replace=False)
    return _plan(table.dataset, r, picked, table.trigger, target_label, f"pfs:m={m}", seed)


def select_extremes(table: SimilarityTable, r: float, which: str, target_label: int = 0,
                    seed: int = 0) -> PoisonPlan:
    if which not in ("top", "bottom"):
        raise ValueError("which must be 'top' or 'bottom'")
    p = poison_count(r, len(table))
    order = similarity_order(table.values, descending=(which == "top"))
    return _plan(table.dataset, r, order[:p], table.trigger, target_label, f"{which}_r", seed)


def _fus_search(dataset: ImageDataset, trigger: TriggerSpec, r: float, proxy: VictimConfig, iterations: int,
                keep_fraction: float, rng: np.random.Generator, candidates: np.ndarray, target_label: int,
                seed: int, tag: str, history: Optional[list]) -> PoisonPlan:
    ref = dataset.ref
    p = poison_count(r, ref.size)
    candidates = np.asarray(candidates, dtype=np.int64)
    current = rng.choice(candidates, size=p, replace=False)
    keep_n = min(p, int(round(keep_fraction * p)))
    for it in range(iterations):
        plan = _plan(ref, r, current, trigger, target_label, tag, seed)
        view = build_poisoned_dataset(dataset, plan)
        victim = train_victim(view, proxy, np.random.default_rng(torch_seed_from(rng)), track=current)
        scores = victim.history.forgetting
        # most forgetting events first; random tie-break keeps the choice unbiased
        order = np.lexsort((rng.permutation(p), -scores))
        kept = current[order[:keep_n]]
        pool = np.setdiff1d(candidates, current, assume_unique=True)
        if len(pool) < p - keep_n:
            pool = np.setdiff1d(candidates, kept, assume_unique=True)
        refill = rng.choice(pool, size=p - keep_n, replace=False)
        if history is not None:
            history.append({"iteration": it, "indices": current.tolist(), "scores": scores.tolist(),
                            "kept": np.sort(kept).tolist()})
        log.info("fus iteration %d: mean forgetting %.3f, kept %d", it, float(scores.mean()), keep_n)
        current = np.concatenate([kept, refill])
    return _plan(ref, r, current, trigger, target_label, tag, seed)


def select_fus(dataset: ImageDataset, trigger: TriggerSpec, r: float, proxy_victim: VictimConfig,
               iterations: int, keep_fraction: float, rng: np.random.Generator, target_label: int = 0,
               seed: int = 0, history: Optional[list] = None) -> PoisonPlan:
    """Filtering-and-updating search scored by forgetting events of a proxy attack.

    Each iteration trains ``proxy_victim`` on the current poisoned set, keeps
    the ``keep_fraction`` samples with the most forgetting events and refills
    the rest uniformly from indices outside the current set. Per-iteration
    scores are appended to ``history`` when given.
    """
    cfg = StrategyConfig("fus", fus_iterations=iterations, fus_keep_fraction=keep_fraction, proxy_victim=proxy_victim)
    return _fus_search(dataset, trigger, r, proxy_victim, iterations, keep_fraction, rng,
                       np.arange(len(dataset)), target_label, seed, cfg.tag, history)


def select_fus_pfs(table: SimilarityTable, dataset: ImageDataset, trigger: TriggerSpec, r: float, m: int,
                   proxy_victim: VictimConfig, iterations: int, keep_fraction: float, rng: np.random.Generator,
                   target_label: int = 0, seed: int = 0, history: Optional[list] = None) -> PoisonPlan:
    """FUS restricted to the PFS coarse pool for both the initial draw and refills."""
    if table.trigger != trigger:
        raise ValueError("similarity table was computed for a different trigger")
    pool = pfs_pool(table, r, m)
    cfg = StrategyConfig("fus_pfs", m=m, fus_iterations=iterations, fus_keep_fraction=keep_fraction,
                         proxy_victim=proxy_victim)
    return _fus_search(dataset, trigger, r, proxy_victim, iterations, keep_fraction, rng, pool,
                       target_label, seed, cfg.tag, history)
