"""Command-line front door: one subcommand per pipeline stage plus `run`.

Exit codes: 0 success, 1 usage error, 2 stage failure.
"""

from __future__ import annotations

import argparse
import logging
import sys

from .config import RunConfig, load_config
from .pipeline import RUN_STAGES, EvalReport, RunPaths, StageError, \
    run_pipeline, run_stage

log = logging.getLogger(__name__)

USAGE_EXIT = 1
STAGE_EXIT = 2


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        print(f"{self.prog}: error: {message}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="pgslam",
                     description="Pose-graph SLAM pipeline on simulated data")
    parser.add_argument("-v", "--verbose", action="store_true",
                        help="log stage progress to stderr")
    sub = parser.add_subparsers(dest="command", required=True,
                                parser_class=_Parser)
    commands = RUN_STAGES + ["covis", "run"]
    for name in commands:
        p = sub.add_parser(name, help=f"{name} stage")
        p.add_argument("--config", required=True, help="YAML run config")
        p.add_argument("--seed", type=int, default=None,
                       help="override config seed")
        p.add_argument("--workers", type=int, default=None,
                       help="override worker count")
        if name == "run":
            p.add_argument("--resume", action="store_true",
                           help="skip stages whose outputs already exist")
    return parser


def _load(args) -> RunConfig:
    try:
        cfg = load_config(args.config)
    except (OSError, ValueError) as exc:
        print(f"pgslam: config error: {exc}", file=sys.stderr)
        raise SystemExit(USAGE_EXIT)
    if args.seed is not None:
        cfg.seed = args.seed
    if args.workers is not None:
        cfg.workers = args.workers
    return cfg


def _print_report(report: EvalReport) -> None:
    print(f"ate_rmse {report.ate_rmse:.6f}")
    print(f"odometry_ate_rmse {report.odometry_ate_rmse:.6f}")
    if report.odometry_ate_rmse > 0:
        ratio = report.ate_rmse / report.odometry_ate_rmse
        print(f"ate_ratio {ratio:.4f}")
    for delta, val in report.rpe_trans.items():
        print(f"rpe_trans_{delta} {val:.6f}")
    for delta, val in report.rpe_rot.items():
        print(f"rpe_rot_{delta} {val:.6f}")
    print(f"kept_edges {report.kept_edges}")
    print(f"rejected_edges {report.rejected_edges}")
    for stage, seconds in report.timings.items():
        print(f"time_{stage} {seconds:.2f}s")


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        format="%(levelname)s %(name)s: %(message)s")
    cfg = _load(args)
    try:
        if args.command == "run":
            report = run_pipeline(cfg, resume=args.resume)
            _print_report(report)
        else:
            result = run_stage(args.command, cfg)
            if isinstance(result, EvalReport):
                _print_report(result)
            else:
                paths = RunPaths(cfg)
                print(f"{args.command}: done (outputs in {paths.out})")
    except StageError as exc:
        print(f"pgslam: stage '{exc.stage}' failed: {exc}", file=sys.stderr)
        return STAGE_EXIT
    return 0


if __name__ == "__main__":
    sys.exit(main())
