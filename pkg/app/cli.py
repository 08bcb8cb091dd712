# app/cli.py
"""Command-line entry point: train, eval, dp, compare, ablate, maps."""

import argparse
import logging
import sys
from typing import List, Optional

from app.core.config import configure_logging, help_config_text
from app.core.errors import WorkbenchError
from app.services import experiment_service

logger = logging.getLogger(__name__)


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="shev-workbench",
                                     description="Energy-management workbench for series hybrid vehicles")
    parser.add_argument("--seed", type=int, default=None, help="Master seed (overrides experiment.seed)")
    parser.add_argument("--out", default=None, help="Output directory (overrides experiment.out_dir)")
    parser.add_argument("--log-level", default=None, help="DEBUG, INFO, WARNING or ERROR")
    parser.add_argument("--help-config", action="store_true", help="List every config key with its default")
    sub = parser.add_subparsers(dest="command")

    p = sub.add_parser("train", help="Train one actor-critic variant")
    p.add_argument("--config", default=None)

    p = sub.add_parser("eval", help="Deterministic rollout of a checkpoint on a cycle")
    p.add_argument("--ckpt", required=True)
    p.add_argument("--cycle", required=True, help="Trace path or synth:<kind>:<duration>:<v_peak>[:<seed>], '*N' repeats")
    p.add_argument("--soc", type=float, default=0.85)
    p.add_argument("--unit", default="mps", choices=["mps", "mph", "kph"])
    p.add_argument("--config", default=None)

    p = sub.add_parser("dp", help="Dynamic-programming baseline on a cycle")
    p.add_argument("--cycle", required=True)
    p.add_argument("--soc", type=float, default=0.85)
    p.add_argument("--unit", default="mps", choices=["mps", "mph", "kph"])
    p.add_argument("--config", default=None)

    p = sub.add_parser("compare", help="DP-vs-agent table from trace files")
    p.add_argument("--dp", required=True, help="DP trace file")
    p.add_argument("--runs", nargs="+", required=True, help="Agent traces, optionally LABEL=path")
    p.add_argument("--dt", type=float, default=1.0)
    p.add_argument("--cycle-name", default="")

    p = sub.add_parser("ablate", help="Run one ablation study")
    p.add_argument("--study", type=int, required=True, choices=sorted(experiment_service.STUDIES))
    p.add_argument("--config", default=None)
    p.add_argument("--workers", type=int, default=1)

    p = sub.add_parser("maps", help="Emit the default component maps")
    p.add_argument("--emit", default=None, help="Directory for the map files")
    p.add_argument("--config", default=None)

    for child in sub.choices.values():
        child.add_argument("--seed", type=int, default=argparse.SUPPRESS)
        child.add_argument("--out", default=argparse.SUPPRESS)
    return parser


def run(args: argparse.Namespace) -> int:
    if args.help_config:
        print(help_config_text(), end="")
        return 0
    if args.command == "train":
        result = experiment_service.cmd_train(args.config, args.seed, args.out)
        print(f"run {result.run_id}: {len(result.log)} episodes -> {result.out_dir}")
    elif args.command == "eval":
        result = experiment_service.cmd_eval(args.ckpt, args.cycle, args.soc, args.config, args.seed, args.out,
                                             args.unit)
        print(f"{result.variant} on {result.cycle_name}: MPG {result.summary.mpg:.3f}, "
              f"final SOC {100 * result.summary.final_soc:.2f}% -> {result.trace_path}")
    elif args.command == "dp":
        result = experiment_service.cmd_dp(args.cycle, args.soc, args.config, args.seed, args.out, args.unit)
        print(f"DP on {result.cycle_name}: fuel {result.summary.fuel_g:.1f} g, "
              f"final SOC {100 * result.summary.final_soc:.2f}% -> {result.trace_path}")
    elif args.command == "compare":
        frame = experiment_service.cmd_compare(args.dp, args.runs, args.out, args.dt, cycle_name=args.cycle_name)
        print(frame.to_string(index=False))
    elif args.command == "ablate":
        summary = experiment_service.cmd_ablate(args.study, args.config, args.seed, args.out, args.workers)
        print(summary.to_string(index=False))
    elif args.command == "maps":
        paths = experiment_service.cmd_maps(args.emit or args.out or "maps", args.config)
        print("\n".join(str(p) for p in paths))
    else:
        build_parser().print_help()
        return 2
    return 0


def main(argv: Optional[List[str]] = None) -> int:
    args = build_parser().parse_args(argv)
    configure_logging(args.log_level)
    try:
        return run(args)
    except WorkbenchError as e:
        logger.error("%s: %s", type(e).__name__, e)
        return e.exit_code


if __name__ == "__main__":
    sys.exit(main())
