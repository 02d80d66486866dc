"""Command-line entry point: ``hyperrom <stage> --config FILE [options]``."""
from __future__ import annotations

import argparse
import json
import logging
import sys

from .config import load_config
from .errors import HyperromError
from .pipeline import STAGES, Pipeline, output_root

log = logging.getLogger("hyperrom")


def build_parser() -> argparse.ArgumentParser:
    common = argparse.ArgumentParser(add_help=False)
    common.add_argument("--config", required=True, help="experiment YAML file")
    common.add_argument("--force", action="store_true", help="re-run even when up to date")
    common.add_argument("--smoke", action="store_true",
                        help="apply the config's smoke scale-down (epochs, inits, geometry)")
    common.add_argument("--jobs", type=int, default=1, metavar="N",
                        help="worker processes for training")
    common.add_argument("--seed-base", type=int, default=None, metavar="S",
                        help="override training.seed_base")
    common.add_argument("--output-dir", default=None,
                        help="override the output root (default: config output_dir)")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = argparse.ArgumentParser(
        prog="hyperrom",
        description="Snapshot generation, POD, TPWL and PANN hyperreduction, solves and reports.")
    sub = parser.add_subparsers(dest="command", required=True)
    helps = {"generate": "solve the full-order model on all load cases",
             "reduce": "POD basis and reduced datasets",
             "build-tpwl": "sample linearizations into a TPWL model",
             "train": "train every PANN variant and initialization",
             "solve": "Newton continuation with TPWL and the selected PANN",
             "report": "error tables and study summaries",
             "all": "run every stage in order"}
    for name in (*STAGES, "all"):
        sub.add_parser(name, parents=[common], help=helps[name])
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs < 1:
            raise HyperromError("--jobs must be at least 1")
        config = load_config(args.config)
        if args.seed_base is not None:
            if args.seed_base < 0:
                raise HyperromError("--seed-base must be nonnegative")
            config = config.model_copy(update={"training": config.training.model_copy(
                update={"seed_base": args.seed_base})})
        if args.smoke:
            config = config.smoke_scaled()
        pipe = Pipeline(config, output_root(config, args.smoke, args.output_dir),
                        force=args.force, jobs=args.jobs)
        stages = STAGES if args.command == "all" else (args.command,)
        for stage in stages:
            rec = pipe.run(stage)
            state = "skipped (up to date)" if rec["skipped"] else "done"
            print(f"{stage}: {state} -> {pipe.stage_dir(stage)}")
            if not args.quiet and not rec["skipped"]:
                print(json.dumps(rec["info"], indent=2, sort_keys=True, default=str))
    except HyperromError as exc:
        print(f"hyperrom: error: {exc}", file=sys.stderr)
        return 2
    except (OSError, ValueError) as exc:
        print(f"hyperrom: error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1
    return 0


if __name__ == "__main__":
    sys.exit(main())
