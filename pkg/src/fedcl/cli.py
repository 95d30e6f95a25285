"""Command line entry point: ``fedcl run | partition-report | compare``."""

from __future__ import annotations

import argparse
import csv
import logging
import sys

from .harness import (MetricsWriter, parse_config, partition_report, rounds_to_target, run_experiment,
                      write_summary)

log = logging.getLogger("fedcl")


def cmd_run(args) -> int:
    cfg = parse_config(args.config)
    with MetricsWriter(args.out) as writer:
        def on_record(rec):
            writer.write(rec)
            log.info("round %d  initial_acc=%.4f  divergence=%.4f", rec.t, rec.initial_acc,
                     rec.weight_divergence)
        _, summary = run_experiment(cfg, on_record=on_record)
    write_summary(summary, args.out)
    print(f"final initial accuracy {summary.final_initial_acc:.4f}, "
          f"personalize {summary.final_personalize_acc:.4f}, "
          f"extra cost ratio {summary.extra_cost_ratio} -> {args.out}")
    return 0


def cmd_partition_report(args) -> int:
    rows = partition_report(parse_config(args.config))
    writer = csv.DictWriter(sys.stdout, fieldnames=list(rows[0]), lineterminator="\n")
    writer.writeheader()
    writer.writerows(rows)
    return 0


def cmd_compare(args) -> int:
    print("config\tstrategy\tN\trounds_to_target\tfinal_initial_acc\textra_cost_ratio")
    for path in args.configs:
        cfg = parse_config(path)
        records, summary = run_experiment(cfg)
        hit = rounds_to_target(records, args.target)
        if hit is None and summary.final_initial_acc >= args.target:
            hit = cfg.fl.rounds
        print(f"{path}\t{cfg.fl.strategy}\t{cfg.fl.interval}\t{'-' if hit is None else hit}\t"
              f"{summary.final_initial_acc:.4f}\t{summary.extra_cost_ratio}")
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fedcl", description="Federated continual-training simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="log every round")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run one experiment and write metrics.csv + summary.json")
    p.add_argument("--config", required=True)
    p.add_argument("--out", required=True, help="output directory")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("partition-report", help="print per-client class histograms as CSV")
    p.add_argument("--config", required=True)
    p.set_defaults(func=cmd_partition_report)

    p = sub.add_parser("compare", help="tabulate rounds-to-target across configs")
    p.add_argument("--configs", nargs="+", required=True)
    p.add_argument("--target", type=float, required=True)
    p.set_defaults(func=cmd_compare)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(message)s")
    try:
        return args.func(args)
    except (ValueError, ArithmeticError, OSError) as err:
        print(f"fedcl: error: {err}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
