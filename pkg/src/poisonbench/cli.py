"""``poisonbench`` command line: select, train, eval, grid, report, ntk-verify."""

from __future__ import annotations

import argparse
import json
import logging
import sys
import time
from pathlib import Path

import numpy as np
import torch

from .core import RunReport, derive_rng, load_plan
from .grid import GridRunner, load_config, strategy_config, victim_config
from .harness import VictimModel, build_poisoned_dataset, build_victim, evaluate, train_victim
from .reporting import (REPORT_KINDS, ablation_curve, asr_table, embedding_scatter, parse_filters,
                        similarity_histogram, timing_table)
from .training import default_device

log = logging.getLogger("poisonbench")


def _emit(obj) -> None:
    print(json.dumps(obj, default=float), flush=True)


def _runner(args) -> GridRunner:
    if not args.config:
        raise SystemExit("--config is required")
    return GridRunner(load_config(args.config, paper_scale=args.paper_scale, seed=args.seed, out=args.out))


def _selection_cells(runner: GridRunner):
    cfg = runner.cfg
    for strat in cfg.strategies:
        for trig in cfg.triggers:
            for rate in cfg.poison_rates:
                for seed in cfg.seeds:
                    yield strat, trig, rate, seed


def cmd_select(args) -> int:
    runner = _runner(args)
    for strat_block, trig_block, rate, seed in _selection_cells(runner):
        strat = strategy_config(strat_block, runner.cfg)
        trigger = runner.trigger(trig_block)
        plan_hash, rec = runner.select(strat, trigger, rate, seed)
        _emit({"plan": plan_hash, "tag": rec["tag"], "r": rate, "seed": seed, "t_select": rec["t_select"]})
    return 0


def _plans(runner: GridRunner, args) -> list[tuple[str, int]]:
    if args.plan:
        return [(h, args.seed if args.seed is not None else 0) for h in args.plan]
    out = []
    for strat_block, trig_block, rate, seed in _selection_cells(runner):
        strat = strategy_config(strat_block, runner.cfg)
        out.append((runner.select(strat, runner.trigger(trig_block), rate, seed)[0], seed))
    return out


def cmd_train(args) -> int:
    runner = _runner(args)
    store = runner.store
    train = runner.dataset("train")
    for plan_hash, seed in _plans(runner, args):
        plan = load_plan(plan_hash, store, train.ref.root_path)
        view = build_poisoned_dataset(train, plan)
        for block in runner.cfg.victims:
            vcfg = victim_config(runner.cfg.victim, block, seed)
            victim_hash = store.put_json("victims", vcfg.to_record())
            t0 = time.perf_counter()
            victim = train_victim(view, vcfg, derive_rng(seed, f"victim/{victim_hash}/{plan_hash}"), store)
            rec = {"plan": plan_hash, "victim": victim_hash, "weights": victim.weights_ref,
                   "t_train": time.perf_counter() - t0, "seed": seed}
            store.append_line("trained.jsonl", json.dumps(rec))
            _emit(rec)
    return 0


def cmd_eval(args) -> int:
    runner = _runner(args)
    store = runner.store
    test = runner.dataset("test")
    train = runner.dataset("train")
    done = runner.completed()
    wanted = set(args.plan or ())
    for rec in map(json.loads, list(store.read_lines("trained.jsonl"))):
        if wanted and rec["plan"] not in wanted:
            continue
        if (rec["plan"], rec["victim"]) in done:
            continue
        plan = load_plan(rec["plan"], store, train.ref.root_path)
        vcfg = victim_config(store.get_json("victims", rec["victim"]), {}, rec["seed"])
        net = build_victim(vcfg, train)
        net.load_state_dict(torch.load(store.path("models", f"{rec['weights']}.pt"), map_location="cpu",
                                       weights_only=True))
        net.to(default_device())
        t0 = time.perf_counter()
        asr, ba = evaluate(VictimModel(net, vcfg, rec["weights"]), test, plan.trigger, plan.target_label)
        sel = [json.loads(s) for s in store.read_lines("selections.jsonl")]
        t_select = next((s["t_select"] for s in sel if s["plan"] == rec["plan"]), 0.0)
        report = RunReport(rec["plan"], rec["victim"], asr, ba, t_select, rec["t_train"],
                           time.perf_counter() - t0, rec["seed"])
        store.append_result(report)
        done.add((rec["plan"], rec["victim"]))
        _emit(json.loads(report.to_line()))
    return 0


def cmd_grid(args) -> int:
    runner = _runner(args)
    for report in runner.run():
        _emit(json.loads(report.to_line()))
    failures = list(runner.store.read_lines("failures.jsonl"))
    log.info("trained %d victims; %d failure records in the log", runner.trained, len(failures))
    return 0


def _filtered_plans(runner: GridRunner, filters: dict):
    """Plans from the selection log matching strategy, tag, seed, trigger or r filters."""
    from .reporting import _matches

    keys = ("strategy", "tag", "seed", "trigger", "r")
    seen = []
    for rec in map(json.loads, runner.store.read_lines("selections.jsonl")):
        row = {k: rec.get(k) for k in keys}
        if _matches(row, {k: v for k, v in filters.items() if k in keys}) and rec["plan"] not in seen:
            seen.append(rec["plan"])
    train = runner.dataset("train")
    return [load_plan(h, runner.store, train.ref.root_path) for h in seen]


def cmd_report(args) -> int:
    filters = parse_filters(args.filter)
    if args.kind in ("asr_table", "timing_table", "ablation_curve"):
        from .core import ArtifactStore

        store = ArtifactStore(args.store) if args.store else _runner(args).store
        fn = {"asr_table": asr_table, "timing_table": timing_table, "ablation_curve": ablation_curve}[args.kind]
        record = fn(store, filters, args.report_out)
        if args.kind == "asr_table":
            print(record["text"], end="")
        else:
            _emit(record)
        return 0
    runner = _runner(args)
    plans = _filtered_plans(runner, filters)
    if not plans:
        raise SystemExit("no stored plans match the filters")
    if args.kind == "similarity_hist":
        trigger = plans[0].trigger
        same = [p for p in plans if p.trigger == trigger]
        if len(same) < len(plans):
            log.warning("plans use several triggers; add --filter trigger=... (showing %s only)", trigger.kind)
        record = similarity_histogram(runner.table(trigger), same, args.report_out, store=runner.store)
    else:
        record = embedding_scatter(runner.extractor(), runner.dataset("train"), plans, args.report_out,
                                   seed=args.seed or 0, store=runner.store)
        record = {k: v for k, v in record.items() if k != "coords"}
    _emit(record)
    return 0


def cmd_ntk_verify(args) -> int:
    from .ntk import verify_theorem

    t0 = time.perf_counter()
    report = verify_theorem(trials=args.trials, dims=tuple(args.dims), gamma=args.gamma,
                            rng=np.random.default_rng(args.seed or 0))
    report["seconds"] = time.perf_counter() - t0
    if args.report_out:
        path = Path(args.report_out)
        path.parent.mkdir(parents=True, exist_ok=True)
        path.with_suffix(".json").write_text(json.dumps(report, indent=2, default=float), encoding="utf-8")
        if path.suffix in (".png", ".pdf", ".svg"):
            _ntk_plot(report, path)
    summary = {"min_regime_spearman": report["min_regime_spearman"],
               "monotone_violations": report["monotone_violations"], "seconds": report["seconds"]}
    for d, fams in report["families"].items():
        for name, fam in fams.items():
            summary[f"d={d}/{name}"] = fam["spearman"]
    _emit(summary)
    return 0


def _ntk_plot(report: dict, path: Path) -> None:
    from .reporting import _plt, _savefig

    plt = _plt()
    fig, ax = plt.subplots(figsize=(5, 3.5))
    for d, fams in report["families"].items():
        ax.plot(fams["similarity"]["confidence"], marker=".", label=f"d={d}")
    ax.set_xlabel("sweep step (clean-poison gap shrinking)")
    ax.set_ylabel("kernel confidence")
    ax.legend()
    _savefig(fig, str(path))


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", help="experiment YAML file")
    common.add_argument("--seed", type=int, default=None, help="override the config's seed list")
    common.add_argument("--out", default=None, help="artifact store directory (overrides the config)")
    common.add_argument("--paper-scale", action="store_true", help="70-epoch, 5-seed profile")
    common.add_argument("-v", "--verbose", action="store_true")

    parser = argparse.ArgumentParser(prog="poisonbench", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("select", parents=[common], help="compute poison plans for every configured strategy")
    p.set_defaults(fn=cmd_select)

    p = sub.add_parser("train", parents=[common], help="train victims on stored plans")
    p.add_argument("--plan", action="append", help="plan hash (repeatable); default: every configured selection")
    p.set_defaults(fn=cmd_train)

    p = sub.add_parser("eval", parents=[common], help="evaluate trained victims and append run reports")
    p.add_argument("--plan", action="append", help="restrict to these plan hashes")
    p.set_defaults(fn=cmd_eval)

    p = sub.add_parser("grid", parents=[common], help="run the whole resumable grid")
    p.set_defaults(fn=cmd_grid)

    p = sub.add_parser("report", parents=[common], help="tables and figures from the results log")
    p.add_argument("--kind", required=True, choices=REPORT_KINDS)
    p.add_argument("--filter", action="append", default=[], metavar="KEY=VALUE")
    p.add_argument("--store", help="read this artifact store directly (table kinds only)")
    p.add_argument("--report-out", help="figure or table path; a .json record is written beside it")
    p.set_defaults(fn=cmd_report)

    p = sub.add_parser("ntk-verify", parents=[common], help="kernel-regression check of the similarity argument")
    p.add_argument("--trials", type=int, default=200)
    p.add_argument("--dims", type=int, nargs="+", default=[1, 2, 8])
    p.add_argument("--gamma", type=float, default=1.0)
    p.add_argument("--report-out", help="report path (.json, or a figure path to also plot the sweep)")
    p.set_defaults(fn=cmd_ntk_verify)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(asctime)s %(name)s %(levelname)s %(message)s")
    return args.fn(args)


if __name__ == "__main__":
    sys.exit(main())
