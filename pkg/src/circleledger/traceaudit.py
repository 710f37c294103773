"""Checks that run over a recorded event trace."""

from __future__ import annotations

import json
from pathlib import Path


def read_trace(path: str | Path) -> list[dict]:
    return [json.loads(line) for line in Path(path).read_text(encoding="utf-8").splitlines() if line]


def gossip_sends(trace: list[dict]) -> list[tuple[int, str, str]]:
    """(send time, src, dst) for every gossip push, delivered or dropped."""
    return [
        (e["sent"], e["src"], e["dst"])
        for e in trace
        if e["event"] in ("deliver", "drop") and e["msg"]["kind"] == "gossip_block"
    ]


def throttle_violations(trace: list[dict], min_interval: int = 900) -> list[dict]:
    """Ordered peer pairs whose consecutive gossip pushes came too close together."""
    last: dict[tuple[str, str], int] = {}
    bad = []
    for sent, src, dst in sorted(gossip_sends(trace)):
        prev = last.get((src, dst))
        if prev is not None and sent - prev < min_interval:
            bad.append({"src": src, "dst": dst, "previous": prev, "sent": sent})
        last[(src, dst)] = sent
    return bad
