"""
Maxwell Partial-Data Toolkit - Command-line launcher

Examples:
    python start.py calc verify --config data/flatdisc.json
    python start.py rt roundtrip --config data/flatdisc.json --seed 3
    python start.py reconstruct run --config data/pipeline.json --workers 4
    python start.py report runs/20260101-120000

Exit codes: 0 success, 1 stage failure (stage named on stderr),
2 invalid configuration.
"""

import argparse
import logging
import os
import sys
from pathlib import Path
from typing import List, Optional

# Add src directory to path
sys.path.insert(0, os.path.dirname(os.path.abspath(__file__)))

from config import LOG_LEVEL, WORKERS  # noqa: E402

ACTIONS = {
    "calc": ("verify",),
    "forward": ("solve",),
    "cgo": ("build", "sweep"),
    "carleman": ("scan",),
    "rt": ("forward", "invert", "roundtrip"),
    "reconstruct": ("run",),
}


def _add_run_flags(parser: argparse.ArgumentParser) -> None:
    parser.add_argument("--config", required=True, help="JSON run config (schema 1)")
    parser.add_argument("--out", default=None, help="Output root, overrides the config")
    parser.add_argument("--seed", type=int, default=None, help="Seed, overrides the config")
    parser.add_argument("--workers", type=int, default=WORKERS, help="Worker threads for sweeps and batches")
    parser.add_argument("--tol-override", action="append", default=[], metavar="KEY=VAL",
                        help="Replace one tolerance for this run (repeatable)")


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="start.py", description="Maxwell partial-data inverse problem toolkit")
    groups = parser.add_subparsers(dest="group", required=True)
    for group, actions in ACTIONS.items():
        sub = groups.add_parser(group)
        sub.add_argument("action", choices=actions)
        _add_run_flags(sub)
    report = groups.add_parser("report", help="Check a finished run directory against its manifest")
    report.add_argument("run_dir")
    return parser


def main(argv: Optional[List[str]] = None) -> int:
    """Parse arguments, run one subcommand and map errors to exit codes."""
    logging.basicConfig(
        level=getattr(logging, LOG_LEVEL),
        format='%(asctime)s | %(levelname)-8s | %(name)-15s | %(message)s',
        datefmt='%H:%M:%S'
    )
    args = build_parser().parse_args(argv)

    from experiment_runner import ExperimentRunner
    from models.run_config import RunConfig, load_run_config
    from utils.errors import ConfigInvalid, StageFailure

    try:
        if args.group == "report":
            source = Path(args.run_dir)
            if not (source / "manifest.json").exists():
                raise ConfigInvalid(f"no manifest.json in {source}")
            config = RunConfig(chart={}, out=str(source))
            runner = ExperimentRunner(config, run_dir=str(source / "report"), report_source=str(source))
            runner.run("report")
        else:
            config = load_run_config(args.config).with_overrides(args.seed, args.out, args.tol_override)
            runner = ExperimentRunner(config, workers=args.workers)
            runner.run(f"{args.group} {args.action}")
    except ConfigInvalid as e:
        print(f"❌ Invalid configuration: {e}", file=sys.stderr)
        return 2
    except StageFailure as e:
        print(f"❌ Stage '{e.stage}' failed: {e.cause}", file=sys.stderr)
        return 1
    except KeyboardInterrupt:
        print("\n🛑 Interrupted", file=sys.stderr)
        return 1

    print(f"✅ Results in {runner.run_dir}")
    return 0


if __name__ == "__main__":
    sys.exit(main())
