"""Command-line entry point.

Three subcommands: ``run`` trains one configuration and writes a results
directory, ``report`` aggregates one or more results directories into tables,
``plot`` renders a figure from a results directory. Config files are JSON
documents whose keys mirror the experiment config fields; a handful of flags
override the most commonly swept fields.
"""

from __future__ import annotations

import argparse
import dataclasses
import sys

from sdaf.errors import ConfigError
from sdaf.harness import ExperimentConfig, run_experiment
from sdaf.report import PLOT_KINDS, emit_report


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sdaf")
    sub = parser.add_subparsers(dest="command", required=True)

    run_p = sub.add_parser("run", help="train one configuration")
    run_p.add_argument("--config", help="JSON config file; defaults used if omitted")
    run_p.add_argument("--out", required=True, help="results directory")
    run_p.add_argument("--method")
    run_p.add_argument("--memory-size", type=int, dest="memory_size")
    run_p.add_argument("--stages", type=int)
    run_p.add_argument("--batch-size", type=int, dest="batch_size")
    run_p.add_argument("--class-order-seed", type=int, dest="class_order_seed")
    run_p.add_argument("--ncm-metric", choices=("mahalanobis", "euclidean"),
                       dest="ncm_metric")

    rep_p = sub.add_parser("report", help="aggregate results directories")
    rep_p.add_argument("--in", dest="run_dirs", nargs="+", required=True)
    rep_p.add_argument("--format", choices=("csv", "json"), default="json")
    rep_p.add_argument("--out", help="write tables here as well as stdout")

    plot_p = sub.add_parser("plot", help="render a figure from one run")
    plot_p.add_argument("--in", dest="run_dir", required=True)
    plot_p.add_argument("--kind", choices=tuple(PLOT_KINDS), required=True)
    plot_p.add_argument("--out", help="target image path")
    return parser


def _config_from_args(args: argparse.Namespace) -> ExperimentConfig:
    cfg = ExperimentConfig.load(args.config) if args.config else ExperimentConfig()
    overrides = {}
    for name in ("method", "memory_size", "stages", "batch_size", "ncm_metric"):
        value = getattr(args, name)
        if value is not None:
            overrides[name] = value
    if args.class_order_seed is not None:
        overrides["seeds"] = dataclasses.replace(
            cfg.seeds, class_order=args.class_order_seed
        )
    return dataclasses.replace(cfg, **overrides) if overrides else cfg


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    try:
        if args.command == "run":
            result = run_experiment(_config_from_args(args), out_dir=args.out)
            print(f"wrote {result.out_dir}")
            print(
                f"end accuracy {100.0 * result.report['end_accuracy']:.1f} "
                f"over {result.report['stages']} stages "
                f"({result.gradient_steps} gradient steps)"
            )
        elif args.command == "report":
            text = emit_report(args.run_dirs, fmt=args.format, out=args.out)
            sys.stdout.write(text)
        elif args.command == "plot":
            out = PLOT_KINDS[args.kind](args.run_dir, out=args.out)
            print(f"wrote {out}")
    except ConfigError as err:
        print(f"error: {err}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    raise SystemExit(main())
