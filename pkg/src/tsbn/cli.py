"""Command line entry point: ``tsbn run|ablation|report``."""

from __future__ import annotations

import argparse
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from .config import ExperimentConfig, dump_config, load_config
from .data import DataError
from .model import ConfigError
from .report import ReportError, run_summary, write_ablation, write_aggregate, write_report
from .trainer import ABLATION_VARIANTS, ablation_configs, build_benchmark, prepare_data, pretrain_for, \
    run_incremental

log = logging.getLogger("tsbn")


def _apply_overrides(cfg: ExperimentConfig, seeds=None, epochs_scale=None) -> ExperimentConfig:
    if seeds:
        cfg = dataclasses.replace(cfg, seeds=list(seeds))
    if epochs_scale is not None:
        cfg = dataclasses.replace(cfg, epochs_scale=epochs_scale)
    return cfg.validate()


def run_experiment(cfg: ExperimentConfig, out_dir) -> dict:
    """One sub-run per seed plus an aggregate (mean and variance) across seeds."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")
    bench = build_benchmark(cfg)
    dirs, results = [], {}
    for seed in cfg.seeds:
        t0 = time.time()
        sub = out_dir / f"seed_{seed}"
        res = run_incremental(dataclasses.replace(cfg, seeds=[seed]), seed, sub, benchmark=bench)
        write_report(sub)
        dirs.append(sub)
        results[seed] = res
        log.info("seed %d done in %.1fs: Last-MCR %.4f", seed, time.time() - t0, res.log.mcrs[-1])
    agg = write_aggregate(dirs, out_dir, cfg.seeds)
    return {"aggregate": agg, "results": results}


def _collapse(record) -> float:
    """Share of the final TP decisions that went to the first task."""
    total = sum(record.tp_counts)
    return record.tp_counts[0] / total if total else 0.0


def run_ablation(cfg: ExperimentConfig, out_dir) -> list[dict]:
    """All four ablation variants on identical data, schedules and pretrained backbones."""
    out_dir = Path(out_dir)
    out_dir.mkdir(parents=True, exist_ok=True)
    dump_config(cfg, out_dir / "config.yaml")
    variants = ablation_configs(cfg)
    bench = build_benchmark(cfg)
    per_variant = {label: [] for label, _ in variants}
    schedules = {}
    for seed in cfg.seeds:
        prepared, schedule = prepare_data(cfg, seed, bench)
        pre = pretrain_for(cfg, prepared, seed)
        for label, vcfg in variants:
            res = run_incremental(dataclasses.replace(vcfg, seeds=[seed]), seed, out_dir / label / f"seed_{seed}",
                                  benchmark=bench, pretrained=pre)
            write_report(out_dir / label / f"seed_{seed}")
            per_variant[label].append(res)
            schedules.setdefault(str(seed), {})[label] = res.schedule.digest()
            log.info("seed %d %-18s Last-MCR %.4f", seed, label, res.log.mcrs[-1])
    rows = []
    for (label, tsbn, unknown, align) in ABLATION_VARIANTS:
        runs = per_variant[label]
        sums = [run_summary([{"phase": r.phase, "mcr": r.mcr, "tp_acc": r.tp_acc, "wp_given_tp": r.wp_given_tp,
                              "overall_acc": r.overall_acc} for r in res.log.records]) for res in runs]
        rows.append({"label": label, "task_specific_bn": tsbn, "unknown_class": unknown, "alignment": align,
                     "last": sum(s["last_mcr"] for s in sums) / len(sums),
                     "avg": sum(s["avg_mcr"] for s in sums) / len(sums),
                     "last_tp": sum(s["last_tp_acc"] for s in sums) / len(sums),
                     "collapse": sum(_collapse(res.log.records[-1]) for res in runs) / len(runs)})
    write_ablation(rows, out_dir)
    (out_dir / "ablation.json").write_text(json.dumps({"rows": rows, "schedule_digests": schedules},
                                                      indent=2, sort_keys=True))
    return rows


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="tsbn", description=__doc__)
    p.add_argument("-q", "--quiet", action="store_true", help="only print warnings and errors")
    sub = p.add_subparsers(dest="command", required=True)
    for name, helptext in (("run", "train and evaluate one configuration"),
                           ("ablation", "run the four ablation variants")):
        s = sub.add_parser(name, help=helptext)
        s.add_argument("config", type=Path)
        s.add_argument("--seed", type=int, action="append", help="seed to run; repeat for several seeds")
        s.add_argument("--epochs-scale", type=float, help="multiply configured epochs and LR milestones")
        s.add_argument("--output", type=Path, help="run directory (default: <output root>/<name>)")
    r = sub.add_parser("report", help="regenerate plots and tables for a run directory")
    r.add_argument("run_dir", type=Path)
    return p


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(asctime)s %(levelname)s %(message)s")
    try:
        if args.command == "report":
            for path in write_report(args.run_dir):
                print(path)
            return 0
        cfg = _apply_overrides(load_config(args.config), args.seed, args.epochs_scale)
        suffix = "-ablation" if args.command == "ablation" else ""
        out = args.output or cfg.output_root() / f"{cfg.name}{suffix}"
        if args.command == "run":
            agg = run_experiment(cfg, out)["aggregate"]
            print(f"{out}: Last-MCR {agg['last_mcr']['mean']:.4f} (var {agg['last_mcr']['variance']:.6f}), "
                  f"Avg-MCR {agg['avg_mcr']['mean']:.4f}")
        else:
            run_ablation(cfg, out)
            print((out / "ablation.md").read_text(), end="")
        return 0
    except (ConfigError, DataError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except (ReportError, FileNotFoundError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 3


if __name__ == "__main__":
    sys.exit(main())
