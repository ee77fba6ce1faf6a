"""Command line: ``run <config>``, ``report <run-dir>``, ``attack <kind> <target>``."""

from __future__ import annotations

import argparse
import asyncio
import dataclasses
import json
import logging
import sys
import time
from pathlib import Path

from . import redteam
from .orchestrator import ConfigError, build_report, load_config, run_scenario


def _cmd_run(args) -> int:
    try:
        cfg = load_config(args.config)
    except ConfigError as exc:
        print(exc, file=sys.stderr)
        return 2
    overrides = {}
    if args.duration is not None:
        overrides["duration"] = args.duration
    if args.time_scale is not None:
        overrides["time_scale"] = args.time_scale
    if args.seed is not None:
        overrides["seed"] = args.seed
    if overrides:
        cfg = dataclasses.replace(cfg, **overrides)
    run_dir = Path(args.run_dir or f"runs/{time.strftime('%Y%m%d-%H%M%S')}")
    status = run_scenario(cfg, run_dir)
    if status == 0:
        print((run_dir / "report.txt").read_text(encoding="utf-8"), end="")
    return status


def _cmd_report(args) -> int:
    run_dir = Path(args.run_dir)
    if not run_dir.is_dir():
        print(f"no such run directory: {run_dir}", file=sys.stderr)
        return 2
    rep = build_report(run_dir)
    text = rep.render()
    (run_dir / "report.txt").write_text(text, encoding="utf-8")
    print(text, end="")
    return 0


def _cmd_attack(args) -> int:
    kind = args.kind
    if kind == "stop-cpu":
        web = redteam.parse_target(args.target, 80)
        modbus = redteam.parse_target(args.modbus, 502) if args.modbus else None
        coro = redteam.attack_stop_cpu(web, modbus, run_dir=args.run_dir, timeout=args.timeout)
    elif kind == "write-coils":
        values = [v.strip() not in ("0", "") for v in args.values.split(",")]
        coro = redteam.attack_write_coils(redteam.parse_target(args.target, 502), args.start, values,
                                          expect_state=args.expect_state, run_dir=args.run_dir,
                                          timeout=args.timeout)
    elif kind == "fingerprint-s7":
        coro = redteam.fingerprint_s7(redteam.parse_target(args.target, 102), timeout=args.timeout)
    else:
        coro = redteam.attack_read_recon(redteam.parse_target(args.target, 502), args.max_address,
                                         timeout=args.timeout)
    outcome = asyncio.run(coro)
    if args.run_dir:
        redteam.write_outcome(args.run_dir, outcome)
    print(json.dumps(outcome.to_record(), indent=2, default=str))
    return 0 if outcome.success else 1


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="honeyturbine", description="Wind-turbine ICS honeynet")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="start the honeynet from a config file")
    run.add_argument("config")
    run.add_argument("--run-dir")
    run.add_argument("--duration", type=float, help="simulated seconds (0 = until interrupted)")
    run.add_argument("--time-scale", type=float)
    run.add_argument("--seed", type=int)
    run.set_defaults(func=_cmd_run)

    rep = sub.add_parser("report", help="summarize a run directory")
    rep.add_argument("run_dir")
    rep.set_defaults(func=_cmd_report)

    att = sub.add_parser("attack", help="run a scripted attack")
    att.add_argument("kind", choices=sorted(redteam.ATTACKS))
    att.add_argument("target", help="host:port (web panel for stop-cpu)")
    att.add_argument("--modbus", help="host:port used to verify the effect of stop-cpu")
    att.add_argument("--start", type=int, default=3, help="first coil for write-coils")
    att.add_argument("--values", default="1", help="comma separated coil values for write-coils")
    att.add_argument("--expect-state", type=int, help="FSM state code write-coils should produce")
    att.add_argument("--max-address", type=int, default=64)
    att.add_argument("--run-dir", help="append the outcome to <run-dir>/attacks.jsonl")
    att.add_argument("--timeout", type=float, default=5.0)
    att.set_defaults(func=_cmd_attack)
    return parser


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.INFO,
                        format="%(asctime)s %(levelname)s %(name)s: %(message)s")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
