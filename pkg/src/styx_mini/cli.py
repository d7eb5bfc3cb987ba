"""``styx-mini`` command line."""

from __future__ import annotations

import argparse
import logging
import sys

from .core import ClusterConfig
from .report import run
from .transport import FaultInjector
from .workloads import WorkloadSpec, parse_dist


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="styx-mini",
                                description="Deterministic transactional stateful-function runtime")
    sub = p.add_subparsers(dest="command", required=True)
    r = sub.add_parser("run", help="run a workload and report metrics and oracle verdicts")
    r.add_argument("--workload", choices=("ycsbt", "travel"), default="ycsbt")
    r.add_argument("--keys", type=int, default=10_000)
    r.add_argument("--txns", type=int, default=1000)
    r.add_argument("--dist", default="uniform", help="uniform or zipf:<theta>")
    r.add_argument("--rate", type=float, default=1000.0, help="requests per logical ms")
    r.add_argument("--balance", type=int, default=1_000_000, help="initial ycsbt balance")
    r.add_argument("--amount", type=int, default=1, help="ycsbt transfer amount")
    r.add_argument("--workers", type=int, default=4)
    r.add_argument("--seed", type=int, default=0)
    r.add_argument("--epoch-max", type=int, default=1000)
    r.add_argument("--epoch-interval-ms", type=int, default=1)
    r.add_argument("--snapshot-interval-ms", type=int, default=10_000)
    r.add_argument("--heartbeat-timeout-ms", type=int, default=1000)
    r.add_argument("--faults", help="TOML fault schedule ([[fault]] entries)")
    r.add_argument("--report", help="summary CSV path; figures and detail CSVs go beside it")
    r.add_argument("--trace", help="write the oracle trace as JSON")
    r.add_argument("--no-check", action="store_true", help="skip the oracles")
    r.add_argument("--data-dir", help="keep snapshots here instead of a temporary directory")
    r.add_argument("-v", "--verbose", action="store_true")
    return p


def main(argv: list[str] | None = None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        spec = WorkloadSpec(args.workload, args.keys, args.txns, parse_dist(args.dist), args.rate,
                            args.seed, args.balance, args.amount)
        config = ClusterConfig(
            n_workers=args.workers, epoch_interval_ms=args.epoch_interval_ms,
            epoch_max_txns=args.epoch_max, snapshot_interval_ms=args.snapshot_interval_ms,
            heartbeat_timeout_ms=args.heartbeat_timeout_ms, rng_seed=args.seed)
    except ValueError as exc:
        print(f"styx-mini: {exc}", file=sys.stderr)
        return 2
    faults = FaultInjector.from_toml(args.faults) if args.faults else None
    report, cluster = run(spec, config, faults, root=args.data_dir, check=not args.no_check,
                          trace_path=args.trace)
    print(report.to_text())
    if args.report:
        written = report.write_csv(args.report) + report.write_figures(args.report)
        for path in written:
            print(f"wrote {path}")
    cluster.close()
    ok = report.serializable and report.exactly_once and report.lost == 0
    return 0 if ok else 1


if __name__ == "__main__":  # pragma: no cover
    sys.exit(main())
