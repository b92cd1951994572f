"""Command-line entry point: ``edgeattest run --scenario ...``."""

from __future__ import annotations

import argparse
import logging
import sys

from .scenario import Scenario, ScenarioConfig, emit_report, run_scenario


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="edgeattest", description="Attested edge-worker enrollment scenarios")
    sub = parser.add_subparsers(dest="command", required=True)
    run = sub.add_parser("run", help="run one scenario and write a report")
    run.add_argument("--scenario", choices=[s.value for s in Scenario], default=Scenario.HAPPY_PATH.value)
    run.add_argument("--devices", type=int, default=1)
    run.add_argument("--poll-interval", type=float, default=2000.0, help="verifier poll interval in ms")
    run.add_argument("--worker-startup-delay", type=float, default=0.0, help="simulated worker start time in s")
    run.add_argument("--repetitions", type=int, default=1)
    run.add_argument("--seed", type=int, default=0)
    run.add_argument("--transport", choices=["loopback", "inproc"], default="loopback")
    run.add_argument("--timeout", type=float, default=60.0, help="per-run timeout in s")
    run.add_argument("--report", help="write the report here instead of stdout")
    run.add_argument("--format", choices=["json", "table"], default="json")
    run.add_argument("-v", "--verbose", action="count", default=0)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    level = logging.WARNING - 10 * min(args.verbose, 2)
    logging.basicConfig(level=level, format="%(asctime)s %(name)s %(levelname)s %(message)s")
    try:
        config = ScenarioConfig(
            scenario=Scenario(args.scenario),
            device_count=args.devices,
            poll_interval=args.poll_interval / 1000.0,
            worker_startup_delay=args.worker_startup_delay,
            repetitions=args.repetitions,
            seed=args.seed,
            transport=args.transport,
            timeout=args.timeout,
        )
    except ValueError as e:
        print(f"edgeattest: {e}", file=sys.stderr)
        return 2
    report = run_scenario(config)
    data = emit_report(report, args.format)
    if args.report:
        with open(args.report, "wb") as fh:
            fh.write(data)
    else:
        sys.stdout.write(data.decode())
    return 0 if report.ok else 1


if __name__ == "__main__":
    sys.exit(main())
