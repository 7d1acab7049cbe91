"""Command line entry point.

Exit codes: 0 success, 1 domain failure (invalid policy, failed scenario),
2 environment failure (I/O, transport, usage).  Machine-readable JSON goes to
stdout; everything for humans goes to stderr.
"""

from __future__ import annotations

import argparse
import json
import logging
import os
import signal
import sys
from typing import Optional, Sequence

from .bench import DEFAULT_SIZES, format_table, measure_latency
from .codec import CodecError, load_signal_map
from .engine import Engine
from .pipeline import PipelineConfig, run_firewall
from .policy import PolicyError, load_policy, pool_behaviours, validate_policy
from .simulators import SCENARIOS, run_scenario
from .storage import JsonlSink, QueryError, RecordFilter, StoredRecord
from .transport import Role, TransportError, open_endpoint

log = logging.getLogger("obd_firewall")

EXIT_OK, EXIT_FAIL, EXIT_ENV = 0, 1, 2

ENV_CAR = "OBD_FIREWALL_CAR"
ENV_DONGLE = "OBD_FIREWALL_DONGLE"


def _emit(obj) -> None:
    print(json.dumps(obj), flush=True)


def cmd_validate(args: argparse.Namespace) -> int:
    try:
        policy = load_policy(args.path)
    except OSError as exc:
        print(f"cannot read {args.path}: {exc}", file=sys.stderr)
        return EXIT_ENV
    except PolicyError as exc:
        _emit({"path": exc.path, "message": exc.message, "error": type(exc).__name__})
        return EXIT_FAIL
    report = validate_policy(policy)
    for line in report.to_lines():
        print(line)
    print(f"{args.path}: {'valid' if report.valid else 'invalid'}", file=sys.stderr)
    return EXIT_OK if report.valid else EXIT_FAIL


def _positive_list(text: str) -> list[int]:
    try:
        sizes = [int(x) for x in text.split(",") if x.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"expected comma-separated integers, got {text!r}") from None
    if not sizes or any(s < 0 for s in sizes):
        raise argparse.ArgumentTypeError("sizes must be a non-empty list of non-negative integers")
    return sizes


def cmd_run(args: argparse.Namespace) -> int:
    car_spec = args.car or os.environ.get(ENV_CAR)
    dongle_spec = args.dongle or os.environ.get(ENV_DONGLE)
    if not car_spec or not dongle_spec:
        print(f"need --car/--dongle (or {ENV_CAR}/{ENV_DONGLE})", file=sys.stderr)
        return EXIT_ENV
    try:
        policies = [load_policy(p) for p in args.policy]
        smap = load_signal_map(args.signals)
    except OSError as exc:
        print(f"cannot read input: {exc}", file=sys.stderr)
        return EXIT_ENV
    except (PolicyError, CodecError) as exc:
        print(f"invalid configuration: {exc}", file=sys.stderr)
        return EXIT_FAIL
    for p in policies:
        report = validate_policy(p)
        if not report.valid:
            print(f"policy {p.name!r} invalid: {report.violations}", file=sys.stderr)
            return EXIT_FAIL
    store = None if args.store in (None, "off") else args.store
    try:
        cfg = PipelineConfig(
            processor_concurrency=args.concurrency,
            batch_size=args.batch_size,
            batch_timeout=args.batch_timeout,
            storage_enabled=store is not None,
        )
        car = open_endpoint(car_spec, "car", Role.CAR_SIDE)
        dongle = open_endpoint(dongle_spec, "dongle", Role.DONGLE_SIDE)
        sink = JsonlSink(store) if store else None
    except ValueError as exc:
        print(str(exc), file=sys.stderr)
        return EXIT_ENV
    except (TransportError, OSError) as exc:
        print(f"endpoint failure: {exc}", file=sys.stderr)
        return EXIT_ENV

    pool, labels = pool_behaviours(policies)
    engine = Engine(pool, smap, labels)
    fw = run_firewall(cfg, car, dongle, engine, sink)
    print(f"firewall running with {len(pool)} behaviours", file=sys.stderr)
    if hasattr(signal, "SIGUSR1"):
        signal.signal(signal.SIGUSR1, lambda *_: _emit({"stats": fw.stats.snapshot()}))
    try:
        while not fw.wait(0.2):
            pass
    except KeyboardInterrupt:
        print("stopping, draining in-flight frames", file=sys.stderr)
        fw.stop()
        fw.wait()
    finally:
        for ep in (car, dongle):
            ep.transport.close()
        if sink is not None:
            sink.close()
    _emit({"stats": fw.stats.snapshot(), "engine": engine.state.snapshot()})
    if fw.error is not None:
        print(f"transport error: {fw.error}", file=sys.stderr)
        return EXIT_ENV
    return EXIT_OK


def cmd_bench(args: argparse.Namespace) -> int:
    rows = measure_latency(args.sizes, args.frames, seed=args.seed)
    print(format_table(rows), file=sys.stderr)
    for row in rows:
        _emit(row.to_dict())
    return EXIT_OK


def cmd_scenario(args: argparse.Namespace) -> int:
    cfg = PipelineConfig(processor_concurrency=args.concurrency, storage_enabled=args.store is not None)
    sink = JsonlSink(args.store) if args.store else None
    try:
        report = run_scenario(args.name, cfg, sink)
    finally:
        if sink is not None:
            sink.close()
    _emit(report)
    for check in report["expectations"]:
        print(f"[{'PASS' if check['passed'] else 'FAIL'}] {check['name']}: {check['detail']}", file=sys.stderr)
    if report["error"]:
        print(f"scenario error: {report['error']}", file=sys.stderr)
    return EXIT_OK if report["passed"] else EXIT_FAIL


def cmd_query(args: argparse.Namespace) -> int:
    try:
        flt = RecordFilter.build(args.identifier, args.verdict, args.since, args.until)
    except QueryError as exc:
        print(f"bad filter: {exc}", file=sys.stderr)
        return EXIT_ENV
    if not os.path.exists(args.store):
        return EXIT_OK
    try:
        sink = JsonlSink(args.store)
    except OSError as exc:
        print(f"cannot open store: {exc}", file=sys.stderr)
        return EXIT_ENV
    try:
        for line in sink.lines():
            if flt(StoredRecord.from_json(line)):
                print(line)
    finally:
        sink.close()
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    parser = argparse.ArgumentParser(prog="obd-firewall", description="OBD-II/CAN man-in-the-middle firewall")
    parser.add_argument("-v", "--verbose", action="store_true")
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("validate", help="check a policy file")
    p.add_argument("path")
    p.set_defaults(func=cmd_validate)

    p = sub.add_parser("run", help="run the firewall between two endpoints")
    p.add_argument("--policy", action="append", default=[], help="policy file (repeatable)")
    p.add_argument("--signals", help="DBC-lite signal map (default: bundled map)")
    p.add_argument("--car", help="car endpoint: tcp:host:port, listen:host:port or file:in.bin,out.bin")
    p.add_argument("--dongle", help="dongle endpoint, same forms as --car")
    p.add_argument("--store", help="record file path, or 'off' (default)")
    p.add_argument("--concurrency", type=int, default=1)
    p.add_argument("--batch-size", type=int, default=64)
    p.add_argument("--batch-timeout", type=int, default=50, help="milliseconds")
    p.set_defaults(func=cmd_run)

    p = sub.add_parser("bench", help="latency versus behaviour count")
    p.add_argument("--sizes", type=_positive_list, default=list(DEFAULT_SIZES))
    p.add_argument("--frames", type=int, default=100)
    p.add_argument("--seed", type=int, default=0)
    p.set_defaults(func=cmd_bench)

    p = sub.add_parser("scenario", help="run a bundled end-to-end scenario")
    p.add_argument("name", choices=SCENARIOS)
    p.add_argument("--store")
    p.add_argument("--concurrency", type=int, default=1)
    p.set_defaults(func=cmd_scenario)

    p = sub.add_parser("query", help="search the record store")
    p.add_argument("--store", required=True)
    p.add_argument("--identifier")
    p.add_argument("--verdict")
    p.add_argument("--since")
    p.add_argument("--until")
    p.set_defaults(func=cmd_query)
    return parser


def main(argv: Optional[Sequence[str]] = None) -> int:
    parser = build_parser()
    args = parser.parse_args(argv)
    logging.basicConfig(
        level=logging.INFO if args.verbose else logging.WARNING,
        stream=sys.stderr,
        format="%(levelname)s %(name)s: %(message)s",
    )
    if args.command == "bench" and args.frames < 1:
        parser.error("--frames must be >= 1")
    if getattr(args, "concurrency", 1) < 1:
        parser.error("--concurrency must be >= 1")
    return args.func(args)


if __name__ == "__main__":
    sys.exit(main())
