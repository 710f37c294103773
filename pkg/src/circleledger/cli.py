"""Command line: ``circle run|demo|verify-chain|audit-trace|schemas``."""

from __future__ import annotations

import argparse
import json
import sys
import time
from pathlib import Path

from circleledger.errors import CircleError
from circleledger.scenario import demo_path, load_scenario, run_scenario, verify_chain
from circleledger.traceaudit import read_trace, throttle_violations
from circleledger.wire import schema_document


def _summary(metrics, wall: float) -> str:
    lines = [
        f"scenario {metrics.scenario} seed {metrics.seed}",
        f"  verified {metrics.verified_blocks}  revoked {metrics.revoked_blocks}  "
        f"pending {metrics.pending_at_end}",
        f"  quorum acks {metrics.quorum_ack_counts}",
        f"  abyss events {metrics.abyss_events}  audit failures {metrics.audit_failures}  "
        f"dropped {metrics.dropped_envelopes}",
        f"  converged {metrics.converged}  canonical {metrics.canonical_hash}",
        f"  wall clock {wall:.2f}s",
    ]
    return "\n".join(lines)


def _run(scenario: Path, seed: int | None, out: Path) -> int:
    config = load_scenario(scenario)
    if seed is not None:
        config.seed = seed
    started = time.perf_counter()
    metrics, _ = run_scenario(config, out)
    print(_summary(metrics, time.perf_counter() - started))
    print(f"  wrote {out / 'metrics.json'} and {out / 'trace.jsonl'}")
    return 0


def main(argv: list[str] | None = None) -> int:
    parser = argparse.ArgumentParser(prog="circle", description=__doc__)
    sub = parser.add_subparsers(dest="command", required=True)

    p = sub.add_parser("run", help="run a scenario file")
    p.add_argument("--scenario", required=True, type=Path)
    p.add_argument("--seed", type=int)
    p.add_argument("--out", required=True, type=Path)

    p = sub.add_parser("demo", help="run the bundled 3-Mystic, 1-Watchtower scenario")
    p.add_argument("--seed", type=int)
    p.add_argument("--out", type=Path, default=Path("demo-out"))

    p = sub.add_parser("verify-chain", help="replay a Mystic block file")
    p.add_argument("--store", required=True, type=Path)

    p = sub.add_parser("audit-trace", help="check gossip throttling in a trace file")
    p.add_argument("--trace", required=True, type=Path)
    p.add_argument("--interval", type=int, default=900)

    p = sub.add_parser("schemas", help="print the JSON schema of every wire message")

    args = parser.parse_args(argv)
    try:
        if args.command == "run":
            return _run(args.scenario, args.seed, args.out)
        if args.command == "demo":
            return _run(demo_path(), args.seed, args.out)
        if args.command == "verify-chain":
            verdict = verify_chain(args.store)
            if verdict.valid:
                print(f"VALID {verdict.length} blocks")
                return 0
            print(f"INVALID height {verdict.height}: {verdict.reason}")
            return 1
        if args.command == "audit-trace":
            bad = throttle_violations(read_trace(args.trace), args.interval)
            for v in bad:
                print(f"{v['src']}->{v['dst']}: {v['previous']} then {v['sent']}")
            print("OK" if not bad else f"{len(bad)} violations")
            return 0 if not bad else 1
        if args.command == "schemas":
            print(json.dumps(schema_document(), indent=2, sort_keys=True))
            return 0
    except CircleError as exc:
        print(f"error {exc.code}: {exc.detail}", file=sys.stderr)
        return 2
    except OSError as exc:
        print(f"error IO_ERROR: {exc}", file=sys.stderr)
        return 2
    return 0


if __name__ == "__main__":
    sys.exit(main())
