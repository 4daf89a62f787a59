"""Command line front end: `mpclab run` executes a campaign, `mpclab report`
regenerates tables and plots from stored records."""

from __future__ import annotations

import argparse
import json
import sys
from dataclasses import replace

from .config import load_scenario
from .harness import regenerate_report, run_campaign


def _build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="mpclab", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a simulation campaign from a scenario config")
    run.add_argument("--config", required=True, help="scenario file (.toml or .json)")
    run.add_argument("--cores", type=int, help="computational units K for the limited strategies")
    run.add_argument("--alpha", type=float, help="run a single safety margin instead of the configured sweep")
    run.add_argument("--strategy", help="run a single strategy instead of the configured list")
    run.add_argument("--episodes", type=int, help="episodes per formulation")
    run.add_argument("--seed", type=int, help="base sampling seed")
    run.add_argument("--out", help="output directory (overrides the config)")

    report = sub.add_parser("report", help="regenerate summary and plots from stored records")
    report.add_argument("--in", dest="in_dir", required=True, help="directory containing runs.csv")
    report.add_argument("--out", help="write regenerated artifacts here instead of in place")
    return parser


def main(argv=None) -> int:
    args = _build_parser().parse_args(argv)
    if args.command == "run":
        scenario = load_scenario(args.config)
        updates = {}
        if args.cores is not None:
            updates["cores"] = (args.cores,)
        if args.alpha is not None:
            updates["alphas"] = (args.alpha,)
        if args.strategy is not None:
            updates["strategies"] = (args.strategy,)
        if args.episodes is not None:
            updates["episodes"] = args.episodes
        if args.seed is not None:
            updates["seed"] = args.seed
        if updates:
            scenario = replace(scenario, **updates)
        out_dir = args.out or scenario.out_dir
        result = run_campaign(scenario, out_dir=out_dir)
        json.dump(result.summary, sys.stdout, indent=2, sort_keys=True)
        print()
        print(f"artifacts written to {result.out_dir}", file=sys.stderr)
        return 0
    summary = regenerate_report(args.in_dir, args.out)
    json.dump(summary, sys.stdout, indent=2, sort_keys=True)
    print()
    return 0


if __name__ == "__main__":
    sys.exit(main())
