"""Simulated suborbital device: telemetry, discovery and transmission."""

from __future__ import annotations

import math
import random
from dataclasses import dataclass

from circleledger._json import canonical_json
from circleledger.errors import FlightAlreadyStarted, NoMystics
from circleledger.netsim import BROADCAST, Node, distance


def make_circle_token(rng_seed) -> str:
    """32 seeded-random bytes as 64 lowercase hex characters."""
    return random.Random(rng_seed).randbytes(32).hex()


@dataclass(frozen=True)
class SensorPayload:
    readings: dict[str, float]
    sequence: int
    sampled_at: int

    def to_dict(self) -> dict:
        return {"readings": dict(self.readings), "sequence": self.sequence, "sampled_at": self.sampled_at}

    def to_json(self) -> bytes:
        return canonical_json(self.to_dict())


@dataclass(frozen=True)
class LinePath:
    origin: tuple[float, float]
    velocity: tuple[float, float] = (0.0, 0.0)

    def __call__(self, t: int) -> tuple[float, float]:
        return (self.origin[0] + self.velocity[0] * t, self.origin[1] + self.velocity[1] * t)


@dataclass(frozen=True)
class CirclePath:
    center: tuple[float, float]
    radius: float
    period: float

    def __call__(self, t: int) -> tuple[float, float]:
        angle = 2 * math.pi * t / self.period
        return (self.center[0] + self.radius * math.cos(angle), self.center[1] + self.radius * math.sin(angle))


def make_path(spec: dict):
    kind = spec.get("kind", "line")
    if kind == "line":
        return LinePath(tuple(spec.get("origin", (0.0, 0.0))), tuple(spec.get("velocity", (0.0, 0.0))))
    if kind == "circle":
        return CirclePath(tuple(spec["center"]), float(spec["radius"]), float(spec["period"]))
    raise ValueError(f"unknown path kind {kind!r}")


class SatelliteNode(Node):
    ROUTES = {
        "discover_reply": "on_discover_reply",
        "data_accept": "on_data_accept",
        "error": "on_error",
    }

    def __init__(
        self,
        node_id: str,
        path,
        *,
        seed: int = 0,
        token: str | None = None,
        passes=(),
        response_window: int = 5,
        timeout: int = 30,
    ):
        super().__init__(node_id, path(0))
        self.path = path
        self.seed = seed
        self.passes = list(passes)
        self.response_window = response_window
        self.timeout = timeout
        self.sequence = 0
        self.flight_started = False
        self.token = token if token is not None else make_circle_token(seed)
        self.responders: dict[str, tuple[float, float]] = {}
        self.outstanding: dict[str, dict] = {}
        self._listening = False

    def position_at(self, now: int) -> tuple[float, float]:
        return self.path(now)

    def make_circle_token(self, rng_seed) -> str:
        if self.flight_started:
            raise FlightAlreadyStarted("the circle token is fixed once the device has left the ground")
        self.token = make_circle_token(rng_seed)
        return self.token

    def generate_payload(self, now: int) -> SensorPayload:
        """Smooth synthetic readings plus noise seeded by (seed, now)."""
        noise = random.Random(f"{self.seed}:{now}")
        altitude = 18000 + 12000 * math.sin(now / 3600)
        readings = {
            "altitude_m": round(altitude + noise.gauss(0, 5), 3),
            "pressure_hpa": round(1013.25 * math.exp(-altitude / 8434.5) + noise.gauss(0, 0.05), 3),
            "temperature_c": round(15 - 0.0065 * min(altitude, 11000) + 2 * math.sin(now / 900) + noise.gauss(0, 0.2), 3),
        }
        self.sequence += 1
        return SensorPayload(readings, self.sequence, now)

    # -- a pass: probe, choose, send -----------------------------------------

    def start(self, now: int) -> None:
        for i, at in enumerate(self.passes):
            self.set_timer(max(now, at), f"pass:{i}")

    def begin_pass(self, now: int) -> None:
        self.responders = {}
        self._listening = True
        self.send(BROADCAST, "discover_probe", {"satellite_id": self.id, "sent_at": now})
        self.set_timer(now + self.response_window, "select")

    def discover_and_select(self, now: int) -> str:
        here = self.position_at(now)
        if not self.responders:
            raise NoMystics("no Mystic answered the discovery probe")
        return min(self.responders, key=lambda m: (distance(here, self.responders[m]), m))

    def on_discover_reply(self, msg, src, now):
        if self._listening:
            self.responders[msg.body["mystic_id"]] = tuple(msg.body["position"])
        return None

    def transmit(self, payload: SensorPayload, target: str, now: int) -> str:
        """Send ``payload`` to ``target``; the outcome arrives asynchronously."""
        self.flight_started = True
        cid = f"{self.id}:{payload.sequence}"
        self.outstanding[cid] = {"target": target, "sequence": payload.sequence, "sent_at": now}
        self.send(target, "data_submit", {"payload": payload.to_dict(), "circle_token": self.token}, cid)
        self.set_timer(now + self.timeout, f"timeout:{cid}")
        return cid

    def on_timer(self, name: str, now: int) -> None:
        if name.startswith("pass:"):
            self.begin_pass(now)
        elif name == "select":
            self._listening = False
            try:
                target = self.discover_and_select(now)
            except NoMystics:
                self.log(now, "no_mystics")
                return
            self.transmit(self.generate_payload(now), target, now)
        elif name.startswith("timeout:"):
            cid = name.split(":", 1)[1]
            sent = self.outstanding.pop(cid, None)
            if sent is not None:
                self.log(now, "timeout", target=sent["target"], sequence=sent["sequence"])

    def on_data_accept(self, msg, src, now):
        sent = self.outstanding.pop(msg.correlation_id, None)
        if sent is not None:
            self.log(now, "accepted", target=src, sequence=sent["sequence"], block_hash=msg.body["block_hash"])
        return None

    def on_error(self, msg, src, now):
        sent = self.outstanding.pop(msg.correlation_id, None)
        if sent is not None:
            self.log(now, "rejected", target=src, sequence=sent["sequence"], code=msg.body["code"])
        return None
