# app.py
"""
fccl-sim: central command router.

Subcommands
-----------
  run      --config <path> [--set key=value ...] [--print-config]
  sweep    --config <path> --axis key=v1,v2 [--axis ...] [--set ...] [--seeds 2021,2022]
  plotdata --records <dir> --figure <name> [--out <dir>]

Exit codes: 0 success, 2 config, 3 data/shape/plot-data, 4 numeric, 1 anything else.
Output root: experiment.output_dir, else $FCCL_SIM_OUTPUT_ROOT, else ./runs.
"""

from __future__ import annotations
import argparse
import sys
from pathlib import Path
from typing import List, Optional, Sequence

from services.exp_config import resolve_config
from utils.exceptions import ConfigError, SimulatorError
from utils.logging import log_event


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="fccl-sim", description="Federated class-continual learning simulator")
    sub = parser.add_subparsers(dest="command", required=True)

    def add_config_args(p: argparse.ArgumentParser) -> None:
        p.add_argument("--config", default=None, help="flat key = value config file")
        p.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                       help="override one config key (repeatable)")
        p.add_argument("--print-config", action="store_true", help="print the resolved config and exit")

    p_run = sub.add_parser("run", help="run one multi-task federated experiment")
    add_config_args(p_run)

    p_sweep = sub.add_parser("sweep", help="Cartesian sweep over config keys x seeds")
    add_config_args(p_sweep)
    p_sweep.add_argument("--axis", action="append", default=[], metavar="KEY=V1,V2",
                         help="swept key and its values (repeatable)")
    p_sweep.add_argument("--seeds", default=None, help="comma-separated seeds (default: config `seeds`)")

    p_plot = sub.add_parser("plotdata", help="emit tidy CSV for one figure from saved run records")
    p_plot.add_argument("--records", required=True, help="run folder or folder of run folders")
    p_plot.add_argument("--figure", required=True, help="figure name")
    p_plot.add_argument("--out", default=None, help="output folder (default: the records folder)")
    return parser


def _warn(warnings: Sequence[str]) -> None:
    for w in warnings:
        print(f"warning: {w}", file=sys.stderr)


def _cmd_run(args: argparse.Namespace) -> int:
    from services.exp_runner import run

    cfg, warnings = resolve_config(args.config, args.overrides)
    _warn(warnings)
    if args.print_config:
        sys.stdout.write(cfg.to_text())
        return 0
    record = run(cfg)
    final = record.report.average_accuracy[-1] if record.report else float("nan")
    print(f"{record.run_id}: {record.status}, final average accuracy {100.0 * final:.2f}%")
    return 0


def _cmd_sweep(args: argparse.Namespace) -> int:
    from services.exp_sweep import parse_axis, sweep

    cfg, warnings = resolve_config(args.config, args.overrides)
    _warn(warnings)
    if args.print_config:
        sys.stdout.write(cfg.to_text())
        return 0
    seeds = None
    if args.seeds:
        try:
            seeds = [int(s) for s in args.seeds.split(",") if s.strip()]
        except ValueError as e:
            raise ConfigError(f"[app] --seeds must be comma-separated integers, got '{args.seeds}'") from e
    records = sweep(cfg, parse_axis(args.axis), seeds=seeds)
    print(f"{len(records)} runs complete")
    return 0


def _cmd_plotdata(args: argparse.Namespace) -> int:
    from services.exp_plotdata import emit_plot_data, load_records

    records = load_records(args.records)
    src = Path(args.records)
    out = Path(args.out) if args.out else (src if src.is_dir() else src.parent)
    print(emit_plot_data(records, args.figure, out))
    return 0


COMMANDS = {"run": _cmd_run, "sweep": _cmd_sweep, "plotdata": _cmd_plotdata}


def main(argv: Optional[List[str]] = None) -> int:
    args = _build_parser().parse_args(argv)
    try:
        return COMMANDS[args.command](args)
    except SimulatorError as e:
        print(f"error: {e}", file=sys.stderr)
        return int(e.exit_code)
    except Exception as e:  # anything unexpected exits 1
        log_event(stage="experiment", event="cli_failure", level="ERROR",
                  details={"command": args.command, "error": f"{type(e).__name__}: {e}"})
        print(f"error: {type(e).__name__}: {e}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
