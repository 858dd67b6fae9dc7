"""Command line entry point: ``sras run``, ``sras gen-policy``, ``sras coordinator``."""

from __future__ import annotations

import argparse
import logging
import sys
import time
from dataclasses import replace
from pathlib import Path

from .errors import ConfigError, Deadlock, SrasError
from .harness import build_infrastructure, generate_policy, load_config, parse_attack, report_render, run_scenario
from .harness.scenario import new_session_id
from .policy import dump_policy
from .vnet import BoardServer, parse_address


def _apply_overrides(cfg, args):
    changes = {}
    if getattr(args, "transport", None):
        changes["transport"] = args.transport
    if getattr(args, "coordinator", None):
        changes["coordinator"] = parse_address(args.coordinator)
        changes.setdefault("transport", "tcp")
    if getattr(args, "attack", None):
        changes["attacks"] = cfg.attacks + tuple(parse_attack(a) for a in args.attack)
    if args.seed is not None:
        changes["seed"] = args.seed
    if getattr(args, "timeout", None) is not None:
        changes["timeout"] = args.timeout
    return replace(cfg, **changes) if changes else cfg


def cmd_run(args) -> int:
    cfg = _apply_overrides(load_config(args.config), args)
    try:
        report = run_scenario(cfg)
    except Deadlock as exc:
        print(f"deadlock: {exc}", file=sys.stderr)
        for entity, snap in sorted(exc.snapshot.items()):
            print(f"  {entity}: phase {snap.get('phase')} failure {snap.get('failure')}", file=sys.stderr)
        return 1
    print(report_render(report))
    if args.report:
        Path(args.report).write_text(report.dumps() + "\n", encoding="utf-8")
    return 0 if report.ok else 1


def cmd_gen_policy(args) -> int:
    import random

    cfg = _apply_overrides(load_config(args.config), args)
    infra = build_infrastructure(cfg)
    rng = random.Random(cfg.seed) if cfg.seed is not None else None
    text = dump_policy(generate_policy(cfg, infra, new_session_id(rng)))
    if args.output:
        Path(args.output).write_text(text + "\n", encoding="utf-8")
    else:
        print(text)
    return 0


def cmd_coordinator(args) -> int:
    server = BoardServer(parse_address(args.listen)).start()
    host, port = server.address
    print(f"board coordinator listening on {host}:{port}", flush=True)
    try:
        if args.duration is not None:
            time.sleep(args.duration)
        else:
            while True:
                time.sleep(3600)
    except KeyboardInterrupt:
        pass
    finally:
        server.stop()
    return 0


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="sras", description="Multi-party remote attestation simulator")
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True)

    run = sub.add_parser("run", help="run a scenario end to end")
    run.add_argument("--config", required=True, help="scenario config (JSON)")
    run.add_argument("--transport", choices=("inmem", "tcp"))
    run.add_argument("--coordinator", metavar="HOST:PORT", help="external board coordinator (implies tcp)")
    run.add_argument("--attack", action="append", metavar="SPEC", help="inject an attack; repeatable")
    run.add_argument("--seed", type=int)
    run.add_argument("--timeout", type=float, help="seconds before waiting parties give up")
    run.add_argument("--report", metavar="PATH", help="write the JSON report here")
    run.set_defaults(func=cmd_run)

    gen = sub.add_parser("gen-policy", help="print the policy a config would generate")
    gen.add_argument("--config", required=True)
    gen.add_argument("--seed", type=int)
    gen.add_argument("--output", "-o")
    gen.set_defaults(func=cmd_gen_policy)

    coord = sub.add_parser("coordinator", help="serve a board over TCP in the foreground")
    coord.add_argument("--listen", default="127.0.0.1:7400", metavar="HOST:PORT")
    coord.add_argument("--duration", type=float, help="stop after this many seconds")
    coord.add_argument("--seed", type=int, help=argparse.SUPPRESS)
    coord.set_defaults(func=cmd_coordinator)
    return parser


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.DEBUG if args.verbose else logging.WARNING, format="%(name)s: %(message)s")
    try:
        return args.func(args)
    except (ConfigError, ValueError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2
    except SrasError as exc:
        print(f"error: {type(exc).__name__}: {exc}", file=sys.stderr)
        return 1


if __name__ == "__main__":
    sys.exit(main())
