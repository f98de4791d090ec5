import json

import yaml

from poisonbench.cli import build_parser, main

CFG = {
    "dataset": {"name": "synthetic", "train_size": 100, "test_size": 40, "num_classes": 4, "seed": 2,
                "shape": [3, 16, 16]},
    "poison_rate": 0.05,
    "extractor": {"architecture": "custom", "epochs": 1, "batch_size": 64, "width": 4},
    "victim": {"architecture": "small_cnn", "epochs": 1, "batch_size": 64, "width": 4, "transforms": []},
    "grid": {"strategies": [{"kind": "random"}, {"kind": "pfs", "m": 2}, {"kind": "top_r"}],
             "triggers": [{"kind": "badnets_patch"}]},
    "seeds": [0],
}


def lines(capsys):
    return [json.loads(x) for x in capsys.readouterr().out.splitlines() if x.startswith("{")]


def test_select_train_eval_report(tmp_path, capsys):
    cfg = tmp_path / "c.yaml"
    cfg.write_text(yaml.safe_dump(CFG))
    common = ["--config", str(cfg), "--out", str(tmp_path / "s")]
    assert main(["select", *common]) == 0
    sel = lines(capsys)
    assert len(sel) == 3 and len({s["plan"] for s in sel}) == 3
    assert main(["select", *common]) == 0
    assert [s["plan"] for s in lines(capsys)] == [s["plan"] for s in sel]
    assert main(["train", *common, "--plan", sel[0]["plan"]]) == 0
    trained = lines(capsys)
    assert len(trained) == 1
    assert main(["eval", *common]) == 0
    reports = lines(capsys)
    assert len(reports) == 1 and reports[0]["plan"] == sel[0]["plan"]
    assert main(["eval", *common]) == 0
    assert lines(capsys) == []
    assert main(["grid", *common]) == 0
    assert len(lines(capsys)) == 2  # the first plan was already evaluated
    assert main(["report", *common, "--kind", "asr_table"]) == 0
    assert "| setting | Random | PFS |" in capsys.readouterr().out
    assert main(["report", "--store", str(tmp_path / "s"), "--kind", "timing_table"]) == 0
    assert set(lines(capsys)[0]["strategies"]) == {"random", "pfs", "top_r"}
    out = tmp_path / "h.png"
    assert main(["report", *common, "--kind", "similarity_hist", "--filter", "strategy=top_r",
                 "--report-out", str(out)]) == 0
    assert lines(capsys)[0]["plans"][0]["label"] == "top_r" and out.exists()
    assert main(["report", *common, "--kind", "embedding_scatter", "--filter", "strategy=pfs"]) == 0
    assert lines(capsys)[0]["n_points"] == 100


def test_ntk_verify(tmp_path, capsys):
    out = tmp_path / "ntk.png"
    assert main(["ntk-verify", "--trials", "20", "--dims", "1", "--gamma", "1.0", "--report-out", str(out)]) == 0
    summary = lines(capsys)[0]
    assert summary["monotone_violations"] == 0
    assert json.loads((tmp_path / "ntk.json").read_text())["dims"] == [1]
    assert out.exists()


def test_parser_flags():
    args = build_parser().parse_args(["grid", "--config", "x.yaml", "--seed", "3", "--out", "o", "--paper-scale"])
    assert (args.config, args.seed, args.out, args.paper_scale) == ("x.yaml", 3, "o", True)
