"""Command-line entry point.

Subcommands: generate, split, train, search, benchmark, dump-embeddings.
Every command takes --config PATH plus optional --set overrides, --out,
--seed, and (for benchmark) --jobs. Failures print one machine-parsable
JSON line to stderr and exit with 2 (config), 3 (numerical), or 4 (I/O).
"""

from __future__ import annotations

import argparse
import json
import sys
from concurrent.futures import ProcessPoolExecutor
from dataclasses import replace
from pathlib import Path

from . import datagen, evalsel, networks, trainer
from .config import RunConfig, config_from_dict, load_config, to_provenance
from .errors import (
    BatchTooSmallError,
    ConfigError,
    ContractError,
    CsvFormatError,
    DegenerateInputError,
    NonFiniteLossError,
    PlanMismatchError,
    ShapeError,
)
from .seeding import subseed

EXIT_CONFIG = 2
EXIT_NUMERIC = 3
EXIT_IO = 4

_CONFIG_ERRORS = (ConfigError, CsvFormatError, PlanMismatchError, ContractError)
_NUMERIC_ERRORS = (NonFiniteLossError, DegenerateInputError, BatchTooSmallError, ShapeError)


def build_dataset(cfg: RunConfig) -> datagen.Dataset:
    if cfg.dataset.csv_path is not None:
        return datagen.ingest_csv(cfg.dataset.csv_path)
    return datagen.generate_synthetic(cfg.dataset.synthetic, subseed(cfg.seed, "dataset"))


def build_plan(cfg: RunConfig, dataset: datagen.Dataset, setting) -> datagen.SplitPlan:
    if cfg.split.plan_path is not None:
        return datagen.SplitPlan.load(cfg.split.plan_path)
    num_domains = max(dataset.domain_set()) + 1
    return datagen.make_split_plan(dataset.class_set(), num_domains,
                                   cfg.split.target_domain, setting,
                                   subseed(cfg.seed, "plan", setting))


def _network_config(cfg: RunConfig, dataset: datagen.Dataset,
                    plan: datagen.SplitPlan) -> networks.NetworkConfig:
    return cfg.network.to_network_config(dataset.input_dim, max(plan.classes) + 1)


def _metrics_payload(report: evalsel.MetricsReport) -> dict:
    return {
        "y_l_accuracy": report.y_l_accuracy,
        "y_s_accuracy": report.y_s_accuracy,
        "overall_accuracy": report.overall_accuracy,
        "per_class_accuracy": {str(k): v for k, v in sorted(report.per_class_accuracy.items())},
        "counts": {str(k): v for k, v in sorted(report.counts.items())},
        "excluded_classes": list(report.excluded_classes),
    }


def _write_json(path, payload: dict) -> None:
    with open(path, "w", encoding="utf-8") as fh:
        json.dump(payload, fh, indent=2, sort_keys=True)
        fh.write("\n")


def cmd_generate(cfg: RunConfig, out: Path, jobs: int) -> int:
    if cfg.dataset.synthetic is None:
        raise ConfigError("generate needs a dataset.synthetic section")
    dataset = build_dataset(cfg)
    datagen.export_csv(dataset, out / "dataset.csv",
                       provenance={"config": to_provenance(cfg)})
    print(f"wrote {out / 'dataset.csv'} ({len(dataset)} samples)")
    return 0


def cmd_split(cfg: RunConfig, out: Path, jobs: int) -> int:
    dataset = build_dataset(cfg)
    plan = build_plan(cfg, dataset, cfg.split.setting)
    plan.save(out / "plan.json")
    _write_json(out / "plan_provenance.json", {"config": to_provenance(cfg)})
    print(f"wrote {out / 'plan.json'} "
          f"(shared {len(plan.shared_classes)}, linked {len(plan.linked_classes)})")
    return 0


def cmd_train(cfg: RunConfig, out: Path, jobs: int) -> int:
    dataset = build_dataset(cfg)
    plan = build_plan(cfg, dataset, cfg.split.setting)
    net_cfg = _network_config(cfg, dataset, plan)
    pool, target = datagen.apply_split(dataset, plan)
    params = networks.init_params(net_cfg, subseed(cfg.seed, "init"))
    trainer_cfg = replace(cfg.trainer, seed=subseed(cfg.seed, "train"))
    final, best, log = trainer.train(params, pool, plan, cfg.loss, trainer_cfg)
    report = evalsel.evaluate(best, target, plan)

    networks.save_checkpoint(best, out / "checkpoint_best.npz")
    networks.save_checkpoint(final, out / "checkpoint_final.npz")
    log.write_jsonl(out / "trainlog.jsonl")
    log.write_summary_csv(out / "trainlog.csv")
    _write_json(out / "metrics.json",
                {"metrics": _metrics_payload(report), "best_step": log.best_step})
    _write_json(out / "run.json", {"config": to_provenance(cfg),
                                   "plan": json.loads(plan.to_json())})
    print(f"target y_l={report.y_l_accuracy} y_s={report.y_s_accuracy} "
          f"overall={report.overall_accuracy}")
    return 0


def _search_one(cfg: RunConfig, dataset, plan, net_cfg, seed_root):
    """Random search scored by leave-one-source-domain-out validation."""
    val_seed = subseed(seed_root, "validation")

    def score_fn(hyper):
        loss_cfg, trainer_cfg = evalsel.apply_hyper(cfg.loss, cfg.trainer, hyper)
        result = evalsel.training_domain_validation(
            dataset, plan, net_cfg, loss_cfg, trainer_cfg, val_seed)
        return result.score

    return evalsel.random_search(cfg.search.space, cfg.search.n_trials,
                                 subseed(seed_root, "hyper"), score_fn)


def cmd_search(cfg: RunConfig, out: Path, jobs: int) -> int:
    if cfg.search.n_trials < 1:
        raise ConfigError("search needs search.n_trials >= 1")
    dataset = build_dataset(cfg)
    plan = build_plan(cfg, dataset, cfg.split.setting)
    net_cfg = _network_config(cfg, dataset, plan)
    result = _search_one(cfg, dataset, plan, net_cfg, cfg.seed)
    _write_json(out / "search.json", {
        "config": to_provenance(cfg),
        "trials": [{"index": t.index, "hyper": t.hyper, "score": t.score}
                   for t in result.trials],
        "winner": {"index": result.best_index, "hyper": result.best_hyper,
                   "score": result.best_score},
    })
    print(f"winner trial {result.best_index} score {result.best_score}")
    return 0


def run_benchmark_cell(doc_json: str, setting, variant: str, rep: int) -> dict:
    """One (setting, variant, repetition) cell; pure function of its
    arguments so cells can run in any process in any order.

    The cell seed deliberately excludes the variant: within a repetition
    every variant trains from the same initialization on the same batch
    sequence, so per-repetition comparisons isolate the objective.
    """
    cfg = config_from_dict(json.loads(doc_json))
    dataset = build_dataset(cfg)
    plan = build_plan(cfg, dataset, setting)
    net_cfg = _network_config(cfg, dataset, plan)
    cell_seed = subseed(cfg.seed, "cell", setting, rep)

    loss_cfg = replace(cfg.loss, variant=variant)
    trainer_cfg = cfg.trainer
    cell_cfg = replace(cfg, loss=loss_cfg)
    winner = None
    if cfg.search.n_trials >= 1:
        result = _search_one(cell_cfg, dataset, plan, net_cfg, cell_seed)
        winner = {"index": result.best_index, "hyper": result.best_hyper,
                  "score": result.best_score}
        loss_cfg, trainer_cfg = evalsel.apply_hyper(loss_cfg, trainer_cfg,
                                                    result.best_hyper)

    pool, target = datagen.apply_split(dataset, plan)
    params = networks.init_params(net_cfg, subseed(cell_seed, "final-init"))
    final_cfg = replace(trainer_cfg, seed=subseed(cell_seed, "final-train"))
    _, best, _ = trainer.train(params, pool, plan, loss_cfg, final_cfg)
    report = evalsel.evaluate(best, target, plan)
    return {
        "setting": str(setting), "variant": variant, "rep": rep,
        "y_l": report.y_l_accuracy, "y_s": report.y_s_accuracy,
        "per_class": {int(k): v for k, v in report.per_class_accuracy.items()},
        "winner": winner,
    }


def cmd_benchmark(cfg: RunConfig, out: Path, jobs: int) -> int:
    doc_json = json.dumps(to_provenance(cfg))
    cells = [(setting, variant, rep)
             for setting in cfg.benchmark.settings
             for variant in cfg.benchmark.variants
             for rep in range(cfg.benchmark.reps)]

    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            futures = [pool.submit(run_benchmark_cell, doc_json, *cell) for cell in cells]
            outcomes = [f.result() for f in futures]   # submission order, not completion
    else:
        outcomes = [run_benchmark_cell(doc_json, *cell) for cell in cells]

    rows = [evalsel.ResultRow(dataset=cfg.dataset.name, setting=o["setting"],
                              variant=o["variant"], rep=o["rep"],
                              y_l_accuracy=o["y_l"], y_s_accuracy=o["y_s"],
                              per_class=o["per_class"])
            for o in outcomes]
    agg = evalsel.aggregate(rows)
    provenance = {"config": to_provenance(cfg)}
    evalsel.write_results_csv(rows, out / "results.csv", provenance)
    evalsel.write_aggregate_csv(agg, out / "aggregate.csv", provenance)
    _write_json(out / "benchmark.json", {
        "config": to_provenance(cfg),
        "cells": [{k: o[k] for k in ("setting", "variant", "rep", "y_l", "y_s", "winner")}
                  for o in outcomes],
    })
    for row in agg:
        se_l = "" if row.y_l_se is None else f" +- {row.y_l_se:.4f}"
        se_s = "" if row.y_s_se is None else f" +- {row.y_s_se:.4f}"
        y_l = "n/a" if row.y_l_mean is None else f"{row.y_l_mean:.4f}{se_l}"
        y_s = "n/a" if row.y_s_mean is None else f"{row.y_s_mean:.4f}{se_s}"
        print(f"{row.dataset} {row.setting:>5} {row.variant:<9} "
              f"y_l {y_l:<20} y_s {y_s}")
    return 0


def cmd_dump_embeddings(cfg: RunConfig, out: Path, jobs: int,
                        checkpoint: str, plan_path: str | None) -> int:
    if checkpoint is None:
        raise ConfigError("dump-embeddings needs --checkpoint")
    params = networks.load_checkpoint(checkpoint)
    dataset = build_dataset(cfg)
    if plan_path is not None:
        plan = datagen.SplitPlan.load(plan_path)
    else:
        plan = build_plan(cfg, dataset, cfg.split.setting)
    evalsel.dump_embeddings(params, dataset, plan, out / "embeddings.csv")
    print(f"wrote {out / 'embeddings.csv'} ({len(dataset)} rows)")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(
        prog="fond",
        description="Contrastive multi-domain training and evaluation harness")
    sub = parser.add_subparsers(dest="command", required=True)

    def common(p):
        p.add_argument("--config", required=True, help="JSON run config")
        p.add_argument("--set", dest="overrides", action="append", default=[],
                       metavar="KEY=VALUE", help="dotted-path config override")
        p.add_argument("--out", default=None, help="output directory")
        p.add_argument("--seed", type=int, default=None, help="master seed override")
        p.add_argument("--jobs", type=int, default=1, help="parallel worker count")

    for name in ("generate", "split", "train", "search", "benchmark"):
        common(sub.add_parser(name))
    dump = sub.add_parser("dump-embeddings")
    common(dump)
    dump.add_argument("--checkpoint", default=None, help="model checkpoint file")
    dump.add_argument("--plan", default=None, help="split plan file")
    return parser


_COMMANDS = {
    "generate": cmd_generate,
    "split": cmd_split,
    "train": cmd_train,
    "search": cmd_search,
    "benchmark": cmd_benchmark,
}


def _fail(kind: str, exc: BaseException, code: int) -> int:
    sys.stderr.write(json.dumps(
        {"error": kind, "type": type(exc).__name__, "message": str(exc)}) + "\n")
    return code


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        cfg = load_config(args.config, args.overrides)
        if args.seed is not None:
            cfg = replace(cfg, seed=args.seed)
        if args.out is not None:
            cfg = replace(cfg, out_dir=args.out)
        out = Path(cfg.out_dir)
        out.mkdir(parents=True, exist_ok=True)
        if args.command == "dump-embeddings":
            return cmd_dump_embeddings(cfg, out, args.jobs, args.checkpoint, args.plan)
        return _COMMANDS[args.command](cfg, out, args.jobs)
    except _NUMERIC_ERRORS as exc:
        return _fail("numerical", exc, EXIT_NUMERIC)
    except _CONFIG_ERRORS as exc:
        return _fail("config", exc, EXIT_CONFIG)
    except OSError as exc:
        return _fail("io", exc, EXIT_IO)


if __name__ == "__main__":
    sys.exit(main())
