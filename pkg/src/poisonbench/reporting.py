"""Figures and tables rebuilt from the results log.

Every figure is written next to a ``.json`` sidecar holding the numbers it
was drawn from; the sidecar is the artifact tests and reviewers rely on.
"""

from __future__ import annotations

import json
import logging
import math
from collections import defaultdict
from pathlib import Path
from typing import Iterable, Optional, Sequence

import numpy as np

from .core import ArtifactStore, PoisonPlan
from .selection import parse_tag

log = logging.getLogger(__name__)

TABLE_COLUMNS = ("random", "pfs", "fus", "fus_pfs")
COLUMN_TITLES = {"random": "Random", "pfs": "PFS", "fus": "FUS", "fus_pfs": "FUS+PFS",
                 "top_r": "Top-r", "bottom_r": "Bottom-r"}
REPORT_KINDS = ("similarity_hist", "embedding_scatter", "asr_table", "timing_table", "ablation_curve")


class MissingData(ValueError):
    pass


# ---------------------------------------------------------------------------
# joining the log
# ---------------------------------------------------------------------------


def plan_header(store: ArtifactStore, plan_hash: str) -> dict:
    """Header fields of a stored manifest, without loading trigger tensors."""
    out = {}
    with open(store.path("plans", f"{plan_hash}.plan"), encoding="utf-8") as fh:
        next(fh)
        for line in fh:
            key, _, value = line.rstrip("\n").partition(" ")
            out[key] = value
            if key == "indices":
                break
    return out


def _selections(store: ArtifactStore) -> dict:
    return {rec["plan"]: rec for rec in map(json.loads, store.read_lines("selections.jsonl"))}


def joined_records(store: ArtifactStore, filters: Optional[dict] = None) -> list[dict]:
    """One flat dict per RunReport, enriched with plan, victim and selection fields."""
    sel = _selections(store)
    rows = []
    for rep in store.read_results():
        head = plan_header(store, rep.plan)
        victim = store.get_json("victims", rep.victim)
        kind, params = parse_tag(head["strategy_tag"])
        dataset = json.loads(head["dataset"])
        row = {
            "plan": rep.plan, "victim": rep.victim, "asr": rep.asr, "ba": rep.ba,
            "t_select": rep.t_select, "t_train": rep.t_train, "t_eval": rep.t_eval, "seed": rep.seed,
            "strategy": kind, "tag": head["strategy_tag"], "m": int(params["m"]) if "m" in params else None,
            "trigger": json.loads(head["trigger"])["kind"], "r": float(head["r"]), "k": int(head["k"]),
            "dataset": dataset["name"], "architecture": victim["architecture"],
            "optimizer": victim["optimizer"], "lr": victim["lr"], "epochs": victim["epochs"],
            "transforms": "+".join(victim["transforms"]) or "none",
            "t_pretrain": sel.get(rep.plan, {}).get("t_pretrain", 0.0),
        }
        rows.append(row)
    return [r for r in rows if _matches(r, filters or {})]


def _matches(row: dict, filters: dict) -> bool:
    for key, want in filters.items():
        have = row.get(key)
        if isinstance(have, (int, float)) and not isinstance(have, bool):
            try:
                if not math.isclose(float(have), float(want)):
                    return False
                continue
            except (TypeError, ValueError):
                return False
        if str(have) != str(want):
            return False
    return True


def parse_filters(items: Iterable[str]) -> dict:
    out = {}
    for item in items or ():
        key, sep, value = item.partition("=")
        if not sep:
            raise ValueError(f"filter {item!r} is not key=value")
        out[key.strip()] = value.strip()
    return out


def _write_record(store: Optional[ArtifactStore], kind: str, record: dict, out: Optional[str]) -> dict:
    if out:
        Path(out).parent.mkdir(parents=True, exist_ok=True)
        Path(out).with_suffix(".json").write_text(json.dumps(record, indent=2, default=float), encoding="utf-8")
    if store is not None:
        store.append_line("reports.jsonl", json.dumps({"kind": kind, "out": out, "record": record}, default=float))
    return record


def _savefig(fig, out: Optional[str]) -> None:
    if out:
        fig.savefig(out, bbox_inches="tight")
    import matplotlib.pyplot as plt

    plt.close(fig)


def _plt():
    import matplotlib

    matplotlib.use("Agg")
    import matplotlib.pyplot as plt

    return plt


# ---------------------------------------------------------------------------
# similarity histogram
# ---------------------------------------------------------------------------


def similarity_histogram(table, plans: Sequence[PoisonPlan], out: Optional[str] = None, bins: int = 40,
                         labels: Optional[Sequence[str]] = None, store: Optional[ArtifactStore] = None) -> dict:
    """Per-plan similarity distribution with mean/median/min/max."""
    labels = list(labels) if labels else [p.strategy_tag for p in plans]
    edges = np.linspace(float(table.values.min()), float(table.values.max()) + 1e-12, bins + 1)
    stats = []
    for label, plan in zip(labels, plans):
        if plan.dataset.identity() != table.dataset.identity():
            raise ValueError("plan and table refer to different datasets")
        if not plan.indices:
            raise MissingData(f"plan {label!r} is empty")
        v = table.values[np.asarray(plan.indices)]
        counts, _ = np.histogram(v, bins=edges)
        stats.append({"label": label, "n": int(len(v)), "mean": float(v.mean()), "median": float(np.median(v)),
                      "min": float(v.min()), "max": float(v.max()), "counts": counts.tolist()})
    record = {"edges": edges.tolist(), "plans": stats}
    if out:
        plt = _plt()
        fig, ax = plt.subplots(figsize=(6, 4))
        for s in stats:
            ax.stairs(s["counts"], edges, label=f"{s['label']} (mean {s['mean']:.3f})")
        ax.set_xlabel("cosine similarity (clean vs poisoned)")
        ax.set_ylabel("count")
        ax.legend(fontsize=7)
        _savefig(fig, out)
    return _write_record(store, "similarity_hist", record, out)


# ---------------------------------------------------------------------------
# embedding scatter
# ---------------------------------------------------------------------------


def grid_occupancy(points: np.ndarray, bounds: tuple[float, float, float, float], cells: int = 20) -> int:
    """Number of distinct cells of a ``cells x cells`` grid over ``bounds`` hit by ``points``."""
    x0, x1, y0, y1 = bounds
    gx = np.clip(((points[:, 0] - x0) / max(x1 - x0, 1e-12) * cells).astype(int), 0, cells - 1)
    gy = np.clip(((points[:, 1] - y0) / max(y1 - y0, 1e-12) * cells).astype(int), 0, cells - 1)
    return int(len(set(zip(gx.tolist(), gy.tolist()))))


def project_2d(emb: np.ndarray, seed: int = 0, perplexity: float = 30.0) -> np.ndarray:
    from sklearn.manifold import TSNE

    n = len(emb)
    if n < 2:
        return np.zeros((n, 2))
    perp = min(perplexity, n - 1)
    return TSNE(n_components=2, perplexity=perp, init="pca", random_state=seed).fit_transform(emb)


def embedding_scatter(extractor, dataset, plans: Sequence[PoisonPlan], out: Optional[str] = None, seed: int = 0,
                      perplexity: float = 30.0, cells: int = 20, labels: Optional[Sequence[str]] = None,
                      store: Optional[ArtifactStore] = None, coords: Optional[np.ndarray] = None) -> dict:
    """t-SNE of all N embeddings with each plan overplotted.

    Diversity of a plan is the occupancy of a ``cells x cells`` grid laid over
    the bounding box of the full projection.
    """
    from .features import embed

    if coords is None:
        coords = project_2d(embed(extractor, dataset.floats()), seed, perplexity)
    bounds = (float(coords[:, 0].min()), float(coords[:, 0].max()), float(coords[:, 1].min()),
              float(coords[:, 1].max())) if len(coords) else (0.0, 1.0, 0.0, 1.0)
    labels = list(labels) if labels else [p.strategy_tag for p in plans]
    per_plan = []
    for label, plan in zip(labels, plans):
        pts = coords[np.asarray(plan.indices, dtype=np.int64)]
        per_plan.append({"label": label, "n": len(pts), "occupancy": grid_occupancy(pts, bounds, cells)})
    record = {"n_points": int(len(coords)), "grid": cells, "bounds": list(bounds), "plans": per_plan,
              "coords": coords.tolist()}
    if out:
        plt = _plt()
        fig, axes = plt.subplots(1, max(1, len(plans)), figsize=(4 * max(1, len(plans)), 4), squeeze=False)
        for ax, s, plan in zip(axes[0], per_plan, plans):
            ax.scatter(coords[:, 0], coords[:, 1], s=1, c="tab:blue", alpha=0.3)
            sel = coords[np.asarray(plan.indices, dtype=np.int64)]
            ax.scatter(sel[:, 0], sel[:, 1], s=4, c="gold")
            ax.set_title(f"{s['label']} (cells {s['occupancy']})", fontsize=8)
            ax.set_xticks([])
            ax.set_yticks([])
        if not plans:
            axes[0][0].scatter(coords[:, 0], coords[:, 1], s=1)
        _savefig(fig, out)
    return _write_record(store, "embedding_scatter", record, out)


# ---------------------------------------------------------------------------
# ASR table
# ---------------------------------------------------------------------------


def _column(row: dict) -> str:
    if row["strategy"] in ("pfs", "fus_pfs") and row["m"] not in (None, 10):
        return f"{row['strategy']}(m={row['m']})"
    return row["strategy"]


def asr_table(store: ArtifactStore, filters: Optional[dict] = None, out: Optional[str] = None,
              metric: str = "asr") -> dict:
    """Mean ``metric`` over seeds per (setting, strategy) cell.

    Rows group by trigger, poisoning rate and victim setting; the four main
    strategy columns always appear first and absent cells are marked missing.
    Best and second-best are flagged per row.
    """
    rows = joined_records(store, filters)
    if not rows:
        raise MissingData("no results match the filters")
    groups: dict = defaultdict(lambda: defaultdict(list))
    extra = []
    for r in rows:
        key = (r["dataset"], r["trigger"], r["r"], r["architecture"], f"{r['optimizer']}-{r['lr']}", r["transforms"])
        col = _column(r)
        groups[key][col].append(r[metric])
        if col not in TABLE_COLUMNS and col not in extra:
            extra.append(col)
    columns = list(TABLE_COLUMNS) + sorted(extra)
    out_rows = []
    for key in sorted(groups, key=str):
        cells = {}
        for col in columns:
            vals = groups[key].get(col, [])
            cells[col] = {"mean": math.fsum(vals) / len(vals), "n": len(vals)} if vals else {"mean": None, "missing": True}
        ranked = sorted((c for c in columns if cells[c]["mean"] is not None), key=lambda c: -cells[c]["mean"])
        if ranked:
            cells[ranked[0]]["best"] = True
        if len(ranked) > 1:
            cells[ranked[1]]["second"] = True
        out_rows.append({"setting": dict(zip(("dataset", "trigger", "r", "architecture", "optimizer", "transforms"),
                                             key)), "cells": cells})
    record = {"metric": metric, "columns": columns, "rows": out_rows, "text": format_table(columns, out_rows)}
    if out and not str(out).endswith(".json"):
        Path(out).write_text(record["text"], encoding="utf-8")
    return _write_record(store, "asr_table", record, out)


def format_table(columns, rows) -> str:
    head = ["setting"] + [COLUMN_TITLES.get(c, c) for c in columns]
    lines = ["| " + " | ".join(head) + " |", "|" + "---|" * len(head)]
    for row in rows:
        s = row["setting"]
        name = f"{s['trigger']} r={s['r']} {s['architecture']} {s['optimizer']} {s['transforms']}"
        cells = []
        for c in columns:
            cell = row["cells"][c]
            if cell["mean"] is None:
                cells.append("-")
                continue
            txt = f"{cell['mean']:.3f}"
            if cell.get("best"):
                txt = f"**{txt}**"
            elif cell.get("second"):
                txt = f"_{txt}_"
            cells.append(txt)
        lines.append("| " + " | ".join([name] + cells) + " |")
    return "\n".join(lines) + "\n"


# ---------------------------------------------------------------------------
# timing and ablation
# ---------------------------------------------------------------------------


def timing_table(store: ArtifactStore, filters: Optional[dict] = None, out: Optional[str] = None) -> dict:
    """Selection wall-clock per strategy, with and without extractor pre-training.

    Read from the selection log so that every selection counts once, however
    many victims were trained on its plan.
    """
    sel = list(map(json.loads, store.read_lines("selections.jsonl")))
    filters = dict(filters or {})
    by: dict = defaultdict(list)
    for rec in sel:
        if not _matches({"strategy": rec["strategy"], "tag": rec["tag"], "seed": rec["seed"]},
                        {k: v for k, v in filters.items() if k in ("strategy", "tag", "seed")}):
            continue
        by[rec["strategy"]].append(rec)
    strategies = {}
    for kind, recs in by.items():
        t = [r["t_select"] for r in recs]
        pre = [r["t_select"] + (r.get("t_pretrain") or 0.0) for r in recs]
        strategies[kind] = {"n": len(recs), "without_pretraining": math.fsum(t) / len(t),
                            "with_pretraining": math.fsum(pre) / len(pre)}
    record = {"strategies": strategies}
    return _write_record(store, "timing_table", record, out)


def ablation_curve(store: ArtifactStore, filters: Optional[dict] = None, out: Optional[str] = None) -> dict:
    """Mean ASR of PFS against the diversity rate m, with the random baseline."""
    rows = joined_records(store, filters)
    by_m: dict = defaultdict(list)
    base = []
    top = []
    for r in rows:
        if r["strategy"] == "pfs":
            by_m[r["m"]].append(r["asr"])
        elif r["strategy"] == "random":
            base.append(r["asr"])
        elif r["strategy"] == "top_r":
            top.append(r["asr"])
    if not by_m:
        raise MissingData("no PFS results to build an ablation curve")
    ms = sorted(by_m)
    record = {
        "m": ms,
        "asr": [math.fsum(by_m[m]) / len(by_m[m]) for m in ms],
        "n": [len(by_m[m]) for m in ms],
        "random_baseline": math.fsum(base) / len(base) if base else None,
        "top_r": math.fsum(top) / len(top) if top else None,
    }
    if out:
        plt = _plt()
        fig, ax = plt.subplots(figsize=(5, 3.5))
        ax.plot(ms, record["asr"], marker="o", label="PFS")
        if record["random_baseline"] is not None:
            ax.axhline(record["random_baseline"], color="tab:red", ls="--", label="Random")
        ax.set_xscale("log")
        ax.set_xlabel("diversity rate m")
        ax.set_ylabel("ASR")
        ax.legend()
        _savefig(fig, out)
    return _write_record(store, "ablation_curve", record, out)
