"""Deterministic discrete-event network.

A single global queue ordered by ``(deliver_time, insertion sequence)``
drives every node. Time is integer virtual seconds. Nodes never talk to
each other directly: handlers fill an outbox that the network drains after
each event, stamping every emitted envelope with the current time.
"""

from __future__ import annotations

import heapq
import math
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable

from circleledger._json import canonical_json
from circleledger.errors import PastDelivery, UnroutableKind
from circleledger.wire import WireMessage, decode, dispatch, encode, error_message

BROADCAST = "*"


def distance(a, b) -> float:
    return math.dist(a, b)


@dataclass
class Envelope:
    src: str
    dst: str
    send_time: int
    deliver_time: int
    message: WireMessage


@dataclass(frozen=True)
class Timer:
    node: str
    at: int
    name: str


@dataclass(frozen=True)
class Drop:
    src: str
    dst: str
    start: int
    end: int

    def matches(self, src: str, dst: str, t: int) -> bool:
        return (
            self.start <= t < self.end
            and self.src in (src, BROADCAST)
            and self.dst in (dst, BROADCAST)
        )


@dataclass(frozen=True)
class Partition:
    nodes: frozenset
    start: int
    end: int

    def matches(self, src: str, dst: str, t: int) -> bool:
        return self.start <= t < self.end and ((src in self.nodes) != (dst in self.nodes))


@dataclass
class FaultPlan:
    drops: list[Drop] = field(default_factory=list)
    partitions: list[Partition] = field(default_factory=list)

    def blocks(self, src: str, dst: str, t: int) -> bool:
        return any(d.matches(src, dst, t) for d in self.drops) or any(
            p.matches(src, dst, t) for p in self.partitions
        )


class Node:
    """Base class for anything attached to the network."""

    ROUTES: dict[str, str] = {}
    accepts_broadcast = False

    def __init__(self, node_id: str, position: tuple[float, float]):
        self.id = node_id
        self.position = (float(position[0]), float(position[1]))
        self.online = True
        self.outbox: list = []
        self.events: list[dict] = []

    def position_at(self, now: int) -> tuple[float, float]:
        return self.position

    def send(self, dst: str, kind: str, body: dict, correlation_id: str = "") -> None:
        self.outbox.append((dst, WireMessage(kind, body, correlation_id)))

    def set_timer(self, at: int, name: str) -> None:
        self.outbox.append(Timer(self.id, at, name))

    def on_timer(self, name: str, now: int) -> None:
        pass

    def log(self, now: int, event: str, **fields) -> None:
        self.events.append({"t": now, "event": event, **fields})


class Network:
    def __init__(
        self,
        base_latency: int = 1,
        per_km_latency: float = 0.0,
        validate: bool = True,
    ):
        self.now = 0
        self.base_latency = base_latency
        self.per_km_latency = per_km_latency
        self.validate = validate
        self.nodes: dict[str, Node] = {}
        self.faults = FaultPlan()
        self.trace: list[dict] = []
        self.dropped = 0
        self._queue: list = []
        self._seq = 0

    def add_node(self, node: Node) -> Node:
        self.nodes[node.id] = node
        return node

    def inject_fault(self, plan: FaultPlan) -> None:
        self.faults.drops.extend(plan.drops)
        self.faults.partitions.extend(plan.partitions)

    def latency(self, src: str, dst: str) -> int:
        if not self.per_km_latency:
            return self.base_latency
        d = distance(self.nodes[src].position_at(self.now), self.nodes[dst].position_at(self.now))
        return self.base_latency + math.ceil(d * self.per_km_latency)

    def _push(self, when: int, item) -> None:
        heapq.heappush(self._queue, (when, self._seq, item))
        self._seq += 1

    def schedule(self, envelope: Envelope) -> None:
        if envelope.deliver_time < self.now:
            raise PastDelivery(f"deliver_time {envelope.deliver_time} < now {self.now}")
        self._push(envelope.deliver_time, envelope)

    def set_timer(self, timer: Timer) -> None:
        if timer.at < self.now:
            raise PastDelivery(f"timer at {timer.at} < now {self.now}")
        self._push(timer.at, timer)

    def broadcast_targets(self, src: str) -> list[str]:
        return [
            nid for nid, n in self.nodes.items()
            if nid != src and n.accepts_broadcast and n.online
        ]

    def send(self, src: str, dst: str, message: WireMessage) -> list[Envelope]:
        """Expand, fault-filter and enqueue one message sent at ``now``."""
        targets = self.broadcast_targets(src) if dst == BROADCAST else [dst]
        queued = []
        for target in targets:
            env = Envelope(src, target, self.now, self.now + self.latency(src, target), message)
            if self.faults.blocks(src, target, self.now):
                self.dropped += 1
                self._record("drop", env.send_time, env)
                continue
            self.schedule(env)
            queued.append(env)
        return queued

    def _record(self, event: str, t: int, env: Envelope) -> None:
        self.trace.append(
            {
                "seq": len(self.trace),
                "t": t,
                "event": event,
                "src": env.src,
                "dst": env.dst,
                "sent": env.send_time,
                "deliver": env.deliver_time,
                "msg": env.message.to_doc(),
            }
        )

    def _flush(self, node: Node) -> None:
        out, node.outbox = node.outbox, []
        for item in out:
            if isinstance(item, Timer):
                self.set_timer(item)
            else:
                dst, message = item
                self.send(node.id, dst, message)

    def step(self) -> None:
        when, _, item = heapq.heappop(self._queue)
        self.now = when
        if isinstance(item, Timer):
            self.trace.append(
                {"seq": len(self.trace), "t": when, "event": "timer", "node": item.node, "name": item.name}
            )
            node = self.nodes[item.node]
            node.on_timer(item.name, when)
            self._flush(node)
            return
        self._record("deliver", when, item)
        node = self.nodes[item.dst]
        message = decode(encode(item.message)) if self.validate else item.message
        try:
            reply = dispatch(message, node, item.src, when)
        except UnroutableKind as exc:
            reply = error_message(exc, message.correlation_id)
        if reply is not None:
            node.outbox.insert(0, (item.src, reply))
        self._flush(node)

    def run_until(self, t_end: int) -> list[dict]:
        """Process every event with time < ``t_end``; return the new trace entries."""
        start = len(self.trace)
        while self._queue and self._queue[0][0] < t_end:
            self.step()
        self.now = max(self.now, t_end)
        return self.trace[start:]

    def pending(self) -> int:
        return len(self._queue)

    def boot(self, nodes: Iterable[Node]) -> None:
        """Flush whatever the given nodes queued before the first event."""
        for node in nodes:
            self._flush(node)


def trace_lines(trace: list[dict]) -> bytes:
    return b"".join(canonical_json(entry) + b"\n" for entry in trace)


def write_trace(trace: list[dict], path: str | Path) -> None:
    Path(path).write_bytes(trace_lines(trace))
