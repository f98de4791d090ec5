"""Experiment configuration and the resumable strategy x trigger x victim x seed grid."""

from __future__ import annotations

import copy
import itertools
import json
import logging
import time
import traceback
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterator, Optional

import numpy as np
import yaml

from .core import (ArtifactStore, RunReport, TriggerSpec, canonical_json, derive_rng, has_plan, load_plan,
                   save_plan, sha256_hex)
from .data import ImageDataset, open_dataset, synthetic_spec
from .features import SimilarityTable, TrainRecipe, get_or_train_extractor, similarity_table
from .harness import VictimConfig, build_poisoned_dataset, evaluate, train_victim
from .selection import (StrategyConfig, select_extremes, select_fus, select_fus_pfs, select_pfs, select_random)
from .triggers import badnets_trigger, blended_trigger, generate_uap

log = logging.getLogger(__name__)

PAPER_SCALE = {
    "victim": {"epochs": 70},
    "extractor": {"epochs": 70},
    "strategy_defaults": {"proxy": {"epochs": 70}},
    "seeds": [0, 1, 2, 3, 4],
}


def deep_merge(base: dict, override: dict) -> dict:
    out = copy.deepcopy(base)
    for k, v in (override or {}).items():
        if isinstance(v, dict) and isinstance(out.get(k), dict):
            out[k] = deep_merge(out[k], v)
        else:
            out[k] = copy.deepcopy(v)
    return out


@dataclass
class ExperimentConfig:
    raw: dict
    store: ArtifactStore
    dataset: dict
    target_label: int
    poison_rates: list
    extractor: TrainRecipe
    victim: dict
    strategies: list
    triggers: list
    victims: list
    seeds: list
    strategy_defaults: dict = field(default_factory=dict)

    def cells(self) -> list[tuple[dict, dict, dict, float, int]]:
        return list(itertools.product(self.strategies, self.triggers, self.victims, self.poison_rates, self.seeds))


def load_config(path: str | Path | None = None, raw: Optional[dict] = None, paper_scale: bool = False,
                seed: Optional[int] = None, out: Optional[str] = None) -> ExperimentConfig:
    """Parse a YAML experiment file (or an already-loaded dict).

    ``grid`` lists are optional; a single ``strategy``/``trigger`` block is a
    grid of one. ``--paper-scale`` merges the file's ``profiles.paper-scale``
    block over the built-in 70-epoch, 5-seed profile.
    """
    if raw is None:
        raw = yaml.safe_load(Path(path).read_text(encoding="utf-8")) or {}
    cfg = copy.deepcopy(raw)
    if paper_scale:
        cfg = deep_merge(cfg, deep_merge(PAPER_SCALE, cfg.get("profiles", {}).get("paper-scale", {})))
    grid = cfg.get("grid", {}) or {}
    base = Path(path).parent if path else Path(".")
    store_root = out or cfg.get("store", "runs")
    store = ArtifactStore(store_root if Path(store_root).is_absolute() or out else base / store_root)
    seeds = [seed] if seed is not None else list(cfg.get("seeds", [0]))
    rates = grid.get("poison_rates") or [cfg.get("poison_rate", 0.01)]
    return ExperimentConfig(
        raw=cfg,
        store=store,
        dataset=cfg.get("dataset", {"name": "synthetic"}),
        target_label=int(cfg.get("target_label", 0)),
        poison_rates=[float(r) for r in rates],
        extractor=_recipe(cfg.get("extractor", {})),
        victim=cfg.get("victim", {}),
        strategies=grid.get("strategies") or [cfg.get("strategy", {"kind": "pfs"})],
        triggers=grid.get("triggers") or [cfg.get("trigger", {"kind": "badnets_patch"})],
        victims=grid.get("victims") or [{}],
        seeds=seeds,
        strategy_defaults=cfg.get("strategy_defaults", {}),
    )


def _recipe(rec: dict) -> TrainRecipe:
    rec = dict(rec)
    if "transforms" in rec:
        rec["transforms"] = tuple(rec["transforms"])
    return TrainRecipe(**rec)


def victim_config(base: dict, override: dict, seed: int) -> VictimConfig:
    rec = deep_merge(base, override)
    rec["seed"] = seed
    if "transforms" in rec:
        rec["transforms"] = tuple(rec["transforms"])
    return VictimConfig(**rec)


def strategy_config(block: dict, cfg: ExperimentConfig) -> StrategyConfig:
    block = deep_merge(cfg.strategy_defaults, block)
    proxy = None
    if block.get("kind") in ("fus", "fus_pfs"):
        proxy_rec = deep_merge({"epochs": 20}, block.get("proxy", {}))
        proxy = victim_config(cfg.victim, proxy_rec, int(proxy_rec.get("seed", 0)))
    return StrategyConfig(kind=block.get("kind", "pfs"), m=int(block.get("m", 10)),
                          fus_iterations=int(block.get("fus_iterations", 15)),
                          fus_keep_fraction=float(block.get("fus_keep_fraction", 0.5)), proxy_victim=proxy)


# ---------------------------------------------------------------------------
# runner
# ---------------------------------------------------------------------------


class GridRunner:
    """Caches datasets, extractor, triggers and tables across the cells of one grid."""

    def __init__(self, cfg: ExperimentConfig):
        self.cfg = cfg
        self.store = cfg.store
        self._datasets: dict[str, ImageDataset] = {}
        self._extractor = None
        self._extractor_cached = None
        self._triggers: dict[str, TriggerSpec] = {}
        self._tables: dict[str, SimilarityTable] = {}
        self.trained = 0

    def dataset(self, split: str) -> ImageDataset:
        if split not in self._datasets:
            d = self.cfg.dataset
            name = d.get("name", "synthetic")
            if name == "synthetic":
                root = d.get("root") or synthetic_spec(int(d.get("seed", 0)), tuple(d.get("shape", (3, 32, 32))),
                                                       float(d.get("noise", 0.12)))
                size = int(d.get("train_size" if split == "train" else "test_size", 1000))
                self._datasets[split] = open_dataset(name, split, root, size, int(d.get("num_classes", 10)))
            else:
                self._datasets[split] = open_dataset(name, split, str(Path(d.get("root", "data")).expanduser()))
        return self._datasets[split]

    def extractor(self):
        if self._extractor is None:
            self._extractor, self._extractor_cached = get_or_train_extractor(
                self.dataset("train"), self.cfg.extractor, self.store, self.dataset("test"))
        return self._extractor

    def trigger(self, block: dict) -> TriggerSpec:
        key = canonical_json(block)
        if key in self._triggers:
            return self._triggers[key]
        shape = self.dataset("train").image_shape
        kind = block.get("kind", "badnets_patch")
        if kind == "badnets_patch":
            patch = None
            if "size" in block:
                from .triggers import checkerboard_patch
                patch = checkerboard_patch(int(block["size"]), shape[0])
            spec = badnets_trigger(shape, patch, block.get("location"))
        elif kind == "blended":
            spec = blended_trigger(shape, float(block.get("lambda", 0.15)), path=block.get("image"))
        elif kind == "optimized_uap":
            spec = self._uap(block)
        elif kind == "plugin":
            spec = TriggerSpec("plugin", plugin_id=block["plugin_id"], plugin_params=block.get("params", {}))
        else:
            raise ValueError(f"unknown trigger kind {kind!r}")
        self.store.put_trigger(spec)
        self._triggers[key] = spec
        return spec

    def _uap(self, block: dict) -> TriggerSpec:
        ext = self.extractor()
        eps = float(block.get("eps", 8 / 255))
        params = {"extractor": ext.weights_ref, "eps": eps, "steps": int(block.get("steps", 200)),
                  "step_size": float(block.get("step_size", eps / 10)), "target": self.cfg.target_label,
                  "seed": int(block.get("seed", 0))}
        index = self.store.path("json", "uap_index", sha256_hex(canonical_json(params).encode()) + ".json")
        if index.exists():
            return self.store.get_trigger(index.read_text().strip())
        res = generate_uap(ext.model, self.dataset("train"), self.cfg.target_label, eps, params["steps"],
                           params["step_size"], derive_rng(params["seed"], "uap"))
        h = self.store.put_trigger(res.trigger)
        index.write_text(h)
        self.store.append_line("uap.jsonl", json.dumps({"trigger": h, "fooling_rate": res.fooling_rate,
                                                         "base_rate": res.base_rate, "status": res.status}))
        return res.trigger

    def table(self, trigger: TriggerSpec) -> SimilarityTable:
        ext = self.extractor()
        probe = SimilarityTable(self.dataset("train").ref, trigger, ext.extractor_id,
                                np.zeros(len(self.dataset("train"))))
        key = probe.key
        if key not in self._tables:
            if self.store.path("tables", f"{key}.npy").exists():
                tab = SimilarityTable.load(self.store, key, self.dataset("train").ref.root_path)
                meta = self.store.path("tables", f"{key}.seconds").read_text()
                tab.seconds = float(meta)
            else:
                tab = similarity_table(self.dataset("train"), trigger, ext)
                tab.save(self.store)
                self.store.path("tables", f"{key}.seconds").write_text(repr(tab.seconds))
            self._tables[key] = tab
        return self._tables[key]

    # -- selection ---------------------------------------------------------

    def select(self, strat: StrategyConfig, trigger: TriggerSpec, rate: float, seed: int) -> tuple[str, dict]:
        """Return ``(plan_hash, selection_record)``, reusing a cached selection."""
        train = self.dataset("train")
        key_rec = {"dataset": train.ref.to_record(), "trigger": trigger.hash, "strategy": strat.to_record(),
                   "r": rate, "k": self.cfg.target_label, "seed": seed}
        if strat.kind in ("pfs", "top_r", "bottom_r", "fus_pfs"):
            key_rec["extractor"] = self.cfg.extractor.to_record()
        key = sha256_hex(canonical_json(key_rec).encode())
        index = self.store.path("json", "selection_index", f"{key}.json")
        if index.exists():
            rec = json.loads(index.read_text())
            if has_plan(rec["plan"], self.store):
                return rec["plan"], rec

        strat.check_pool(rate, len(train))
        rng = derive_rng(seed, f"select/{strat.tag}")
        k = self.cfg.target_label
        t_pretrain = 0.0
        extractor_cached = None
        history: list = []
        t0 = time.perf_counter()
        if strat.kind == "random":
            plan = select_random(train.ref, rate, rng, trigger, k, seed)
            t_select = time.perf_counter() - t0
        elif strat.kind == "fus":
            plan = select_fus(train, trigger, rate, strat.proxy_victim, strat.fus_iterations,
                              strat.fus_keep_fraction, rng, k, seed, history)
            t_select = time.perf_counter() - t0
        else:
            ext = self.extractor()
            t_pretrain, extractor_cached = ext.train_seconds, self._extractor_cached
            tab = self.table(trigger)
            t0 = time.perf_counter()
            if strat.kind == "pfs":
                plan = select_pfs(tab, rate, strat.m, rng, k, seed)
            elif strat.kind in ("top_r", "bottom_r"):
                plan = select_extremes(tab, rate, "top" if strat.kind == "top_r" else "bottom", k, seed)
            else:
                plan = select_fus_pfs(tab, train, trigger, rate, strat.m, strat.proxy_victim, strat.fus_iterations,
                                      strat.fus_keep_fraction, rng, k, seed, history)
            # the table is part of the selection cost even when it came from cache
            t_select = time.perf_counter() - t0 + tab.seconds
        plan_hash = save_plan(plan, self.store)
        rec = {"plan": plan_hash, "strategy": strat.kind, "tag": strat.tag, "trigger": trigger.kind, "r": rate,
               "t_select": t_select, "t_pretrain": t_pretrain, "extractor_cached": extractor_cached, "seed": seed}
        if history:
            rec["fus_log"] = self.store.put_json("fus_logs", history)
        index.write_text(json.dumps(rec))
        self.store.append_line("selections.jsonl", json.dumps(rec))
        return plan_hash, rec

    # -- cells -------------------------------------------------------------

    def completed(self) -> set[tuple[str, str]]:
        return {(r.plan, r.victim) for r in self.store.read_results()}

    def run_cell(self, strat_block: dict, trig_block: dict, victim_block: dict, rate: float, seed: int,
                 done: set) -> Optional[RunReport]:
        strat = strategy_config(strat_block, self.cfg)
        trigger = self.trigger(trig_block)
        vcfg = victim_config(self.cfg.victim, victim_block, seed)
        plan_hash, sel = self.select(strat, trigger, rate, seed)
        victim_hash = self.store.put_json("victims", vcfg.to_record())
        if (plan_hash, victim_hash) in done:
            return None
        train, test = self.dataset("train"), self.dataset("test")
        plan = load_plan(plan_hash, self.store, train.ref.root_path)
        view = build_poisoned_dataset(train, plan)
        t0 = time.perf_counter()
        victim = train_victim(view, vcfg, derive_rng(seed, f"victim/{victim_hash}/{plan_hash}"), self.store)
        t_train = time.perf_counter() - t0
        self.trained += 1
        t0 = time.perf_counter()
        asr, ba = evaluate(victim, test, plan.trigger, plan.target_label)
        t_eval = time.perf_counter() - t0
        report = RunReport(plan_hash, victim_hash, asr, ba, sel["t_select"], t_train, t_eval, seed)
        self.store.append_result(report)
        done.add((plan_hash, victim_hash))
        log.info("cell %s/%s seed=%d: asr=%.4f ba=%.4f", strat.tag, trigger.kind, seed, asr, ba)
        return report


    def run(self) -> Iterator[RunReport]:
        done = self.completed()
        for strat, trig, vic, rate, s in self.cfg.cells():
            try:
                report = self.run_cell(strat, trig, vic, rate, s, done)
            except Exception as exc:  # noqa: BLE001 - a failed cell must not stop the grid
                cell = {"strategy": strat, "trigger": trig, "victim": vic, "rate": rate, "seed": s}
                self.store.append_line("failures.jsonl", json.dumps(
                    {"cell": cell, "error": repr(exc), "traceback": traceback.format_exc(limit=5), "ts": time.time()}))
                log.error("cell %s failed: %r", cell, exc)
                continue
            if report is not None:
                yield report


def run_experiment_grid(config, paper_scale: bool = False, seed: Optional[int] = None,
                        out: Optional[str] = None) -> Iterator[RunReport]:
    """Run every cell of the grid, yielding each new RunReport.

    ``config`` is a YAML path or an ExperimentConfig. Cells whose
    (plan, victim) pair already has a report are skipped. A failing cell is
    logged to ``failures.jsonl`` and the grid moves on.
    """
    cfg = config if isinstance(config, ExperimentConfig) else load_config(config, paper_scale=paper_scale,
                                                                          seed=seed, out=out)
    yield from GridRunner(cfg).run()
