import json

import pytest
import yaml

from poisonbench.grid import GridRunner, deep_merge, load_config, run_experiment_grid

BASE = {
    "dataset": {"name": "synthetic", "train_size": 120, "test_size": 60, "num_classes": 4, "seed": 1,
                "shape": [3, 16, 16]},
    "target_label": 0,
    "poison_rate": 0.05,
    "extractor": {"architecture": "custom", "epochs": 1, "batch_size": 64, "width": 4},
    "victim": {"architecture": "small_cnn", "epochs": 1, "batch_size": 64, "width": 4, "lr": 0.05},
    "grid": {
        "strategies": [{"kind": "random"}, {"kind": "pfs", "m": 2}],
        "triggers": [{"kind": "badnets_patch"}],
        "victims": [{"transforms": ["random_crop", "random_horizontal_flip"]}, {"transforms": ["random_rotation"]}],
    },
    "seeds": [0],
}


def write(tmp_path, cfg):
    path = tmp_path / "exp.yaml"
    path.write_text(yaml.safe_dump(cfg))
    return path


def test_grid_cardinality_and_resume(tmp_path):
    path = write(tmp_path, BASE)
    reports = list(run_experiment_grid(path, out=str(tmp_path / "store")))
    assert len(reports) == 4
    assert len({(r.plan, r.victim) for r in reports}) == 4
    runner = GridRunner(load_config(path, out=str(tmp_path / "store")))
    assert list(runner.run()) == [] and runner.trained == 0
    lines = (tmp_path / "store" / "results.jsonl").read_text().splitlines()
    assert len(lines) == 4 and all(0 <= json.loads(x)["asr"] <= 1 for x in lines)


def test_rerun_reproduces_plans(tmp_path):
    path = write(tmp_path, BASE)
    a = {r.plan for r in run_experiment_grid(path, out=str(tmp_path / "a"))}
    b = {r.plan for r in run_experiment_grid(path, out=str(tmp_path / "b"))}
    assert a == b
    manifests = sorted(p.read_bytes() for p in (tmp_path / "a" / "plans").iterdir())
    assert manifests == sorted(p.read_bytes() for p in (tmp_path / "b" / "plans").iterdir())


def test_failed_cell_is_recorded(tmp_path):
    cfg = deep_merge(BASE, {"grid": {"strategies": [{"kind": "pfs", "m": 50}, {"kind": "random"}],
                                     "victims": [{}]}})
    reports = list(run_experiment_grid(write(tmp_path, cfg), out=str(tmp_path / "s")))
    assert len(reports) == 1
    failures = (tmp_path / "s" / "failures.jsonl").read_text().splitlines()
    assert len(failures) == 1 and "PoolOverflow" in json.loads(failures[0])["error"]


def test_selection_log_timings(tmp_path):
    cfg = deep_merge(BASE, {"grid": {"victims": [{}]}})
    list(run_experiment_grid(write(tmp_path, cfg), out=str(tmp_path / "s")))
    recs = [json.loads(x) for x in (tmp_path / "s" / "selections.jsonl").read_text().splitlines()]
    pfs = next(r for r in recs if r["strategy"] == "pfs")
    assert pfs["t_pretrain"] > 0 and pfs["extractor_cached"] is False and pfs["t_select"] > 0
    assert next(r for r in recs if r["strategy"] == "random")["t_pretrain"] == 0


def test_paper_scale_profile(tmp_path):
    cfg = deep_merge(BASE, {"profiles": {"paper-scale": {"victim": {"batch_size": 128}}}})
    loaded = load_config(write(tmp_path, cfg), paper_scale=True, out=str(tmp_path / "s"))
    assert loaded.victim["epochs"] == 70 and loaded.victim["batch_size"] == 128
    assert loaded.extractor.epochs == 70 and loaded.seeds == [0, 1, 2, 3, 4]
    assert load_config(write(tmp_path, cfg), paper_scale=True, seed=3, out=str(tmp_path / "s")).seeds == [3]


def test_relative_store_resolves_next_to_config(tmp_path):
    cfg = deep_merge(BASE, {"store": "runs/x"})
    loaded = load_config(write(tmp_path, cfg))
    assert loaded.store.root == tmp_path / "runs" / "x"


def test_deep_merge_does_not_alias():
    base = {"a": {"b": 1, "c": [1]}}
    out = deep_merge(base, {"a": {"b": 2}})
    out["a"]["c"].append(2)
    assert base == {"a": {"b": 1, "c": [1]}} and out["a"]["b"] == 2


def test_unknown_trigger_kind_fails_cell(tmp_path):
    cfg = deep_merge(BASE, {"grid": {"triggers": [{"kind": "wanet"}], "strategies": [{"kind": "random"}],
                                     "victims": [{}]}})
    assert list(run_experiment_grid(write(tmp_path, cfg), out=str(tmp_path / "s"))) == []
    assert "wanet" in (tmp_path / "s" / "failures.jsonl").read_text()


@pytest.mark.parametrize("kind", ["blended", "optimized_uap"])
def test_other_triggers_run(tmp_path, kind):
    trig = {"kind": kind} if kind == "blended" else {"kind": kind, "steps": 3}
    cfg = deep_merge(BASE, {"grid": {"triggers": [trig], "strategies": [{"kind": "pfs", "m": 2}], "victims": [{}]}})
    reports = list(run_experiment_grid(write(tmp_path, cfg), out=str(tmp_path / "s")))
    assert len(reports) == 1
