import json

import numpy as np
import pytest

from poisonbench.core import PoisonPlan, RunReport, derive_rng, save_plan
from poisonbench.data import from_arrays
from poisonbench.features import identity_extractor
from poisonbench.harness import VictimConfig
from poisonbench.reporting import (TABLE_COLUMNS, MissingData, ablation_curve, asr_table, embedding_scatter,
                                   grid_occupancy, parse_filters, similarity_histogram, timing_table)
from poisonbench.selection import select_extremes, select_pfs, select_random

from conftest import table_from_values

VALUES = derive_rng(0, "values").uniform(-1, 1, 200)


def add_run(store, plan, asr, seed=0, ba=0.9, t_select=1.0, t_pretrain=0.0, victim=None):
    victim = victim or VictimConfig(seed=seed)
    h = save_plan(plan, store)
    v = store.put_json("victims", victim.to_record())
    store.append_result(RunReport(h, v, asr, ba, t_select, 1.0, 1.0, seed))
    kind = plan.strategy_tag.split(":")[0]
    store.append_line("selections.jsonl", json.dumps({"plan": h, "strategy": kind, "tag": plan.strategy_tag,
                                                      "t_select": t_select, "t_pretrain": t_pretrain, "seed": seed}))
    return h


def test_histogram_top_minimum_is_order_statistic():
    table = table_from_values(VALUES)
    top = select_extremes(table, 0.05, "top")
    rec = similarity_histogram(table, [top])
    assert rec["plans"][0]["min"] == np.sort(VALUES)[::-1][top.size - 1]
    assert sum(rec["plans"][0]["counts"]) == top.size


def test_histogram_identical_plans_identical_stats():
    table = table_from_values(VALUES)
    a = select_pfs(table, 0.05, 4, derive_rng(1, "p"))
    b = select_pfs(table, 0.05, 4, derive_rng(1, "p"))
    rec = similarity_histogram(table, [a, b])
    assert rec["plans"][0] == rec["plans"][1]


def test_histogram_figure_and_sidecar(tmp_path, store):
    table = table_from_values(VALUES)
    plans = [select_random(table.dataset, 0.05, derive_rng(0, "r"), table.trigger),
             select_extremes(table, 0.05, "top")]
    rec = similarity_histogram(table, plans, str(tmp_path / "hist.png"), store=store)
    assert (tmp_path / "hist.png").stat().st_size > 0
    assert json.loads((tmp_path / "hist.json").read_text()) == json.loads(json.dumps(rec))
    assert json.loads(next(store.read_lines("reports.jsonl")))["kind"] == "similarity_hist"
    assert rec["plans"][1]["mean"] > rec["plans"][0]["mean"]


def test_histogram_empty_plan():
    table = table_from_values(VALUES)
    empty = select_random(table.dataset, 0.001, derive_rng(0, "r"), table.trigger)
    with pytest.raises(MissingData):
        similarity_histogram(table, [empty])


def test_asr_single_run_identity(store):
    table = table_from_values(VALUES)
    add_run(store, select_random(table.dataset, 0.05, derive_rng(0, "r"), table.trigger), 0.8125)
    rec = asr_table(store)
    assert rec["rows"][0]["cells"]["random"]["mean"] == 0.8125
    assert rec["rows"][0]["cells"]["pfs"] == {"mean": None, "missing": True}
    assert "-" in rec["text"]


def test_asr_five_seed_mean_and_layout(store):
    table = table_from_values(VALUES)
    asrs = [0.91, 0.87, 0.95, 0.90, 0.93]
    for s, a in enumerate(asrs):
        add_run(store, select_pfs(table, 0.05, 4, derive_rng(s, "p"), seed=s), a, seed=s)
        add_run(store, select_random(table.dataset, 0.05, derive_rng(s, "r"), table.trigger, seed=s), 0.5, seed=s)
    add_run(store, select_extremes(table, 0.05, "top"), 0.4)
    rec = asr_table(store)
    assert rec["columns"][:4] == list(TABLE_COLUMNS) == ["random", "pfs", "fus", "fus_pfs"]
    cells = rec["rows"][0]["cells"]
    assert cells["pfs(m=4)"]["mean"] == pytest.approx((0.91 + 0.87 + 0.95 + 0.90 + 0.93) / 5, abs=1e-15)
    assert cells["pfs(m=4)"]["best"] and cells["random"]["second"]
    assert cells["fus"]["missing"] and cells["fus_pfs"]["missing"]
    header = rec["text"].splitlines()[0]
    assert header.index("Random") < header.index("PFS") < header.index("FUS") < header.index("FUS+PFS")


def test_asr_filters_and_missing(store):
    table = table_from_values(VALUES)
    add_run(store, select_random(table.dataset, 0.05, derive_rng(0, "r"), table.trigger), 0.5,
            victim=VictimConfig(architecture="vgg16"))
    add_run(store, select_random(table.dataset, 0.05, derive_rng(1, "r"), table.trigger, seed=1), 0.7, seed=1)
    assert asr_table(store, parse_filters(["architecture=vgg16"]))["rows"][0]["cells"]["random"]["mean"] == 0.5
    assert len(asr_table(store, {"r": "0.05"})["rows"]) == 2
    with pytest.raises(MissingData):
        asr_table(store, {"trigger": "blended"})
    with pytest.raises(ValueError):
        parse_filters(["architecture"])


def test_timing_with_and_without_pretraining(store):
    table = table_from_values(VALUES)
    add_run(store, select_pfs(table, 0.05, 4, derive_rng(0, "p")), 0.9, t_select=2.0, t_pretrain=100.0)
    add_run(store, select_pfs(table, 0.05, 4, derive_rng(1, "p"), seed=1), 0.9, seed=1, t_select=4.0, t_pretrain=0.0)
    rec = timing_table(store)["strategies"]["pfs"]
    assert rec["without_pretraining"] == 3.0 and rec["with_pretraining"] == 53.0 and rec["n"] == 2


def test_ablation_curve(tmp_path, store):
    table = table_from_values(VALUES)
    top = select_extremes(table, 0.05, "top")
    m1 = select_pfs(table, 0.05, 1, derive_rng(0, "p"))
    assert m1.indices == top.indices
    add_run(store, m1, 0.6)
    add_run(store, top, 0.6)
    add_run(store, select_pfs(table, 0.05, 10, derive_rng(0, "p")), 0.9)
    add_run(store, select_random(table.dataset, 0.05, derive_rng(0, "r"), table.trigger), 0.8)
    rec = ablation_curve(store, out=str(tmp_path / "abl.png"))
    assert rec["m"] == [1, 10] and rec["asr"] == [0.6, 0.9]
    assert rec["asr"][0] == rec["top_r"] and rec["random_baseline"] == 0.8
    assert (tmp_path / "abl.png").exists() and (tmp_path / "abl.json").exists()


def test_ablation_needs_pfs(store):
    with pytest.raises(MissingData):
        ablation_curve(store)


def test_grid_occupancy_hand_count():
    pts = np.array([[0.0, 0.0], [0.01, 0.01], [0.99, 0.99], [0.5, 0.5], [1.0, 1.0]])
    assert grid_occupancy(pts, (0.0, 1.0, 0.0, 1.0), 20) == 3
    assert grid_occupancy(pts, (0.0, 1.0, 0.0, 1.0), 1) == 1


def test_scatter_occupancy_and_determinism():
    rng = derive_rng(0, "pts")
    n = 120
    images = rng.random((n, 1, 2, 2)).astype(np.float32)
    ds = from_arrays(images, np.zeros(n, int), num_classes=2)
    ext = identity_extractor(ds.image_shape)
    a = embedding_scatter(ext, ds, [], seed=3)
    b = embedding_scatter(ext, ds, [], seed=3)
    assert a["coords"] == b["coords"] and a["n_points"] == n
    coords = np.array(a["coords"])
    # plan of the 6 points nearest one corner versus 6 spread points
    corner = np.argsort(((coords - coords.min(0)) ** 2).sum(1))[:6]
    spread = np.linspace(0, n - 1, 6).astype(int)
    table = table_from_values(np.zeros(n), ref=ds.ref)
    plans = [PoisonPlan(ds.ref, 0, 0.05, tuple(corner), table.trigger, "top_r", 0),
             PoisonPlan(ds.ref, 0, 0.05, tuple(spread), table.trigger, "random", 0)]
    rec = embedding_scatter(ext, ds, plans, coords=coords)
    assert rec["plans"][0]["occupancy"] < rec["plans"][1]["occupancy"]


def test_scatter_three_points(tmp_path):
    ds = from_arrays(derive_rng(1, "x").random((3, 1, 2, 2)).astype(np.float32), [0, 1, 0], num_classes=2)
    ext = identity_extractor(ds.image_shape)
    plan = PoisonPlan(ds.ref, 0, 0.34, (1,), table_from_values(np.zeros(3), ref=ds.ref).trigger, "random", 0)
    rec = embedding_scatter(ext, ds, [plan], str(tmp_path / "sc.png"))
    assert rec["n_points"] == 3 and len(rec["coords"]) == 3
    assert (tmp_path / "sc.png").exists()
