"""Scenario loading, end-to-end runs, metrics and on-disk chain verification."""

from __future__ import annotations

import hashlib
import json
import math
import shutil
from dataclasses import asdict, dataclass, field
from importlib import resources
from pathlib import Path
from typing import Any, Optional

import pydantic
from pydantic import BaseModel, ConfigDict, Field, field_validator, model_validator

from circleledger.errors import Malformed, ParseError, ValidationError
from circleledger.ledger import (
    DEFAULT_SALT,
    Chain,
    Failure,
    block_from_doc,
    derive_key,
    make_genesis,
    verify_block,
)
from circleledger.mystic import MysticConfig, MysticNode
from circleledger.netsim import Drop, FaultPlan, Network, Partition, trace_lines
from circleledger.satellite import SatelliteNode, make_circle_token, make_path
from circleledger.store import FileStore, MemoryStore, parse_record, split_records
from circleledger.watchtower import ForeignWatchtower, WatchtowerNode, quota

Point = tuple[float, float]


class _Model(BaseModel):
    model_config = ConfigDict(extra="forbid", populate_by_name=True)


class DropSpec(_Model):
    src: str
    dst: str
    start: int = Field(alias="from", ge=0)
    end: int = Field(alias="to", ge=0)


class PartitionSpec(_Model):
    nodes: list[str]
    start: int = Field(alias="from", ge=0)
    end: int = Field(alias="to", ge=0)


class FaultSpec(_Model):
    drops: list[DropSpec] = []
    partitions: list[PartitionSpec] = []

    def to_plan(self) -> FaultPlan:
        return FaultPlan(
            drops=[Drop(d.src, d.dst, d.start, d.end) for d in self.drops],
            partitions=[Partition(frozenset(p.nodes), p.start, p.end) for p in self.partitions],
        )


class SatelliteSpec(_Model):
    path: dict[str, Any] = {"kind": "line", "origin": [-20.0, -20.0], "velocity": [0.0, 0.0]}
    passes: list[int] = [600]
    corrupt_token: bool = False
    response_window_s: int = Field(5, ge=1)
    timeout_s: int = Field(30, ge=1)


class ForeignSpec(_Model):
    watchtower_id: str = "fw1"
    position: Point = (100.0, 100.0)
    actions: list[dict[str, Any]] = []


class ScenarioConfig(_Model):
    name: str = "scenario"
    seed: int = 0
    circle_id: str = "circle-1"
    mystic_count: int = Field(3, ge=1)
    watchtower_count: int = Field(1, ge=1)
    mystic_positions: Optional[list[Point]] = None
    watchtower_positions: Optional[list[Point]] = None
    difficulty: int = Field(8, ge=0, le=32)
    gossip_fanout: int = Field(2, ge=1)
    gossip_min_interval_s: int = Field(900, ge=1)
    charm_interval_s: int = Field(300, ge=1)
    quorum_fraction: float = 0.8
    token_ttl_s: int = Field(900, ge=1)
    pending_timeout_s: int = Field(3600, ge=1)
    audit_sample: int = Field(3, ge=1)
    base_latency_s: int = Field(1, ge=0)
    per_km_latency_s: float = Field(0.0, ge=0)
    duration_s: int = Field(1200, ge=0)
    satellite: SatelliteSpec = SatelliteSpec()
    faults: FaultSpec = FaultSpec()
    foreign: Optional[ForeignSpec] = None
    key_source_path: Optional[str] = None
    salt_hex: Optional[str] = None
    registration_secret: str = "circle-secret"

    @field_validator("quorum_fraction")
    @classmethod
    def _fraction(cls, v: float) -> float:
        if not 0 < v <= 1:
            raise ValueError("quorum_fraction must be in (0, 1]")
        return v

    @field_validator("salt_hex")
    @classmethod
    def _salt(cls, v):
        if v is not None and (len(v) != 64 or v != v.lower() or not all(c in "0123456789abcdef" for c in v)):
            raise ValueError("salt_hex must be 64 lowercase hex characters")
        return v

    @model_validator(mode="after")
    def _positions(self):
        if self.mystic_positions is not None and len(self.mystic_positions) != self.mystic_count:
            raise ValueError("mystic_positions must have mystic_count entries")
        if self.watchtower_positions is not None and len(self.watchtower_positions) != self.watchtower_count:
            raise ValueError("watchtower_positions must have watchtower_count entries")
        return self

    def mystic_ids(self) -> list[str]:
        return [f"m{i + 1}" for i in range(self.mystic_count)]

    def watchtower_ids(self) -> list[str]:
        return [f"w{i + 1}" for i in range(self.watchtower_count)]

    def resolved_mystic_positions(self) -> list[Point]:
        if self.mystic_positions is not None:
            return [tuple(p) for p in self.mystic_positions]
        n = self.mystic_count
        return [
            (round(10 * math.cos(2 * math.pi * i / n), 6), round(10 * math.sin(2 * math.pi * i / n), 6))
            for i in range(n)
        ]

    def resolved_watchtower_positions(self) -> list[Point]:
        if self.watchtower_positions is not None:
            return [tuple(p) for p in self.watchtower_positions]
        return [(float(5 * i), 0.0) for i in range(self.watchtower_count)]


def _field_errors(exc: pydantic.ValidationError) -> dict[str, str]:
    return {".".join(str(p) for p in err["loc"]) or "<root>": err["msg"] for err in exc.errors()}


def scenario_from_dict(doc: dict, base_dir: Path | None = None) -> ScenarioConfig:
    try:
        config = ScenarioConfig.model_validate(doc)
    except pydantic.ValidationError as exc:
        fields = _field_errors(exc)
        detail = "; ".join(f"{k}: {v}" for k, v in fields.items())
        raise ValidationError(detail, fields) from None
    if base_dir is not None and config.key_source_path and not Path(config.key_source_path).is_absolute():
        config.key_source_path = str(Path(base_dir) / config.key_source_path)
    return config


def load_scenario(path: str | Path) -> ScenarioConfig:
    path = Path(path)
    try:
        doc = json.loads(path.read_text(encoding="utf-8"))
    except json.JSONDecodeError as exc:
        raise ParseError(f"{path}: {exc}") from None
    if not isinstance(doc, dict):
        raise ParseError(f"{path}: top level must be an object")
    return scenario_from_dict(doc, path.parent)


def demo_path() -> Path:
    return Path(str(resources.files("circleledger") / "data" / "demo.json"))


def load_demo() -> ScenarioConfig:
    return load_scenario(demo_path())


def key_source_bytes(config: ScenarioConfig) -> bytes:
    if config.key_source_path:
        return Path(config.key_source_path).read_bytes()
    return (resources.files("circleledger") / "data" / "keysource.txt").read_bytes()


@dataclass
class MetricsReport:
    scenario: str
    seed: int
    ingests: int
    verified_blocks: int
    revoked_blocks: int
    pending_at_end: int
    mean_verification_latency_virtual_s: float | None
    quorum_ack_counts: list[int]
    blocks: list[dict]
    sparkling: dict[str, int]
    abyss_events: int
    abyss_log: list[dict]
    resurrections: list[dict]
    audits: list[dict]
    audit_failures: int
    dropped_envelopes: int
    data_submits: int
    submit_rejections: dict[str, int]
    transmissions: dict[str, int]
    external: dict[str, Any]
    canonical_hash: str | None
    final_tips: dict[str, str]
    alive_mystics: list[str]
    converged: bool
    end_time: int
    trace_sha256: str
    events: list[dict] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)

    def to_json(self) -> bytes:
        return (json.dumps(self.to_dict(), sort_keys=True, indent=2) + "\n").encode("utf-8")


@dataclass
class Simulation:
    """Built but not yet (or partially) run scenario; handy for tests."""

    config: ScenarioConfig
    network: Network
    watchtowers: list[WatchtowerNode]
    mystics: list[MysticNode]
    satellite: SatelliteNode
    foreign: ForeignWatchtower | None

    @property
    def watchtower(self) -> WatchtowerNode:
        return self.watchtowers[0]

    def mystic(self, mid: str) -> MysticNode:
        return next(m for m in self.mystics if m.id == mid)

    def any_pending(self) -> bool:
        return any(m.pending is not None for m in self.mystics)

    def run(self) -> None:
        cfg = self.config
        net = self.network
        net.run_until(cfg.duration_s)
        limit = cfg.duration_s + cfg.pending_timeout_s + 2 * cfg.gossip_min_interval_s
        while self.any_pending() and net.now < limit:
            net.run_until(net.now + cfg.charm_interval_s)
        # let notices and any audit they trigger finish
        net.run_until(net.now + 60)


def build_simulation(config: ScenarioConfig, store_dir: Path | None = None, validate: bool = True) -> Simulation:
    salt = bytes.fromhex(config.salt_hex) if config.salt_hex else DEFAULT_SALT
    key = derive_key(key_source_bytes(config), salt)
    genesis = make_genesis(key, config.difficulty)
    circle_token = make_circle_token(f"{config.seed}:{config.circle_id}")
    net = Network(config.base_latency_s, config.per_km_latency_s, validate=validate)

    foreign_ids = [config.foreign.watchtower_id] if config.foreign else []
    wt_positions = dict(zip(config.watchtower_ids(), config.resolved_watchtower_positions()))
    watchtowers = [
        net.add_node(
            WatchtowerNode(
                wid, pos,
                circle_id=config.circle_id,
                registration_secret=config.registration_secret,
                seed=config.seed,
                charm_interval=config.charm_interval_s,
                token_ttl=config.token_ttl_s,
                audit_sample=config.audit_sample,
                known_watchtowers=foreign_ids,
            )
        )
        for wid, pos in wt_positions.items()
    ]
    mconf = MysticConfig(
        difficulty=config.difficulty,
        fanout=config.gossip_fanout,
        gossip_min_interval=config.gossip_min_interval_s,
        quorum_fraction=config.quorum_fraction,
        charm_interval=config.charm_interval_s,
        pending_timeout=config.pending_timeout_s,
    )
    mystics = []
    for mid, pos in zip(config.mystic_ids(), config.resolved_mystic_positions()):
        if store_dir is not None:
            path = store_dir / f"{mid}.jsonl"
            path.unlink(missing_ok=True)
            store = FileStore(path, mid)
        else:
            store = MemoryStore(mid)
        mystics.append(
            net.add_node(
                MysticNode(
                    mid, pos,
                    circle_id=config.circle_id,
                    circle_token=circle_token,
                    key=key,
                    genesis=genesis,
                    watchtowers=wt_positions,
                    registration_secret=config.registration_secret,
                    config=mconf,
                    store=store,
                )
            )
        )
    sat_cfg = config.satellite
    sat_token = make_circle_token(f"{config.seed}:corrupt") if sat_cfg.corrupt_token else circle_token
    satellite = net.add_node(
        SatelliteNode(
            "sat1", make_path(sat_cfg.path),
            seed=config.seed, token=sat_token, passes=sat_cfg.passes,
            response_window=sat_cfg.response_window_s, timeout=sat_cfg.timeout_s,
        )
    )
    foreign = None
    if config.foreign:
        foreign = net.add_node(
            ForeignWatchtower(
                config.foreign.watchtower_id, config.foreign.position,
                watchtowers[0].id, config.foreign.actions,
            )
        )
    net.inject_fault(config.faults.to_plan())
    nodes = [*watchtowers, *mystics, satellite] + ([foreign] if foreign else [])
    for node in nodes:
        node.start(0)
    net.boot(nodes)
    return Simulation(config, net, watchtowers, mystics, satellite, foreign)


def _count(items) -> dict[str, int]:
    out: dict[str, int] = {}
    for item in items:
        out[item] = out.get(item, 0) + 1
    return dict(sorted(out.items()))


def collect_metrics(sim: Simulation) -> MetricsReport:
    cfg = sim.config
    wt = sim.watchtower
    merged = []
    for order, node in enumerate([*sim.watchtowers, *sim.mystics, sim.satellite]):
        for idx, ev in enumerate(node.events):
            merged.append((ev["t"], order, idx, {"node": node.id, **ev}))
    merged.sort(key=lambda x: x[:3])
    events = [m[3] for m in merged]

    blocks: dict[str, dict] = {}
    verified_acks = []
    latencies = []
    for ev in events:
        if ev["event"] == "ingest":
            blocks[ev["block_hash"]] = {
                "block_hash": ev["block_hash"], "origin": ev["node"], "height": ev["height"],
                "ingested_at": ev["t"], "status": "pending", "resolved_at": None, "acks": None, "reason": None,
            }
        elif ev["event"] == "verified":
            b = blocks[ev["block_hash"]]
            b.update(status="verified", resolved_at=ev["t"], acks=ev["acks"])
            verified_acks.append(ev["acks"])
            latencies.append(ev["latency"])
        elif ev["event"] == "revoked":
            blocks[ev["block_hash"]].update(status="revoked", resolved_at=ev["t"], reason=ev["reason"])
    block_list = list(blocks.values())

    wt_events = [e for e in events if e["node"] == wt.id]
    sat_events = [e for e in events if e["node"] == sim.satellite.id]
    foreign_events = sim.foreign.events if sim.foreign else []
    audits = [
        {k: e[k] for k in ("t", "audit_id", "canonical", "sampled", "passed", "failures", "missing")}
        for e in wt_events if e["event"] == "audit"
    ]
    alive = sorted(wt.alive)
    tips = {m.id: m.tip_hex for m in sim.mystics}
    converged = wt.canonical_hash is not None and all(tips[m] == wt.canonical_hash for m in alive)
    trace_bytes = trace_lines(sim.network.trace)
    return MetricsReport(
        scenario=cfg.name,
        seed=cfg.seed,
        ingests=len(block_list),
        verified_blocks=sum(b["status"] == "verified" for b in block_list),
        revoked_blocks=sum(b["status"] == "revoked" for b in block_list),
        pending_at_end=sum(b["status"] == "pending" for b in block_list),
        mean_verification_latency_virtual_s=(sum(latencies) / len(latencies)) if latencies else None,
        quorum_ack_counts=verified_acks,
        blocks=block_list,
        sparkling={m.id: m.sparkling for m in sim.mystics},
        abyss_events=sum(e["event"] == "abyss" for e in wt_events),
        abyss_log=[{"t": e["t"], "mystic_id": e["mystic_id"]} for e in wt_events if e["event"] == "abyss"],
        resurrections=[
            {"t": e["t"], "mystic_id": e["mystic_id"]}
            for e in wt_events if e["event"] == "admitted" and e["resurrected"]
        ],
        audits=audits,
        audit_failures=sum(len(a["failures"]) for a in audits),
        dropped_envelopes=sim.network.dropped,
        data_submits=sum(
            1 for e in sim.network.trace
            if e["event"] in ("deliver", "drop") and e["msg"]["kind"] == "data_submit"
        ),
        submit_rejections=_count(e["code"] for e in events if e["event"] == "submit_rejected"),
        transmissions=_count(e["event"] for e in sat_events),
        external={
            "admitted": sum(e["event"] == "external_admitted" for e in wt_events),
            "denied": _count(e["code"] for e in foreign_events if e["event"] == "error"),
            "quota": quota(len(wt.alive)),
        },
        canonical_hash=wt.canonical_hash,
        final_tips=tips,
        alive_mystics=alive,
        converged=converged,
        end_time=sim.network.now,
        trace_sha256=hashlib.sha256(trace_bytes).hexdigest(),
        events=events,
    )


def run_scenario(
    config: ScenarioConfig,
    out_dir: str | Path | None = None,
    validate: bool = True,
) -> tuple[MetricsReport, list[dict]]:
    """Build, run and measure one scenario.

    With ``out_dir`` set, writes ``metrics.json``, ``trace.jsonl`` and one
    block file per Mystic under ``stores/``.
    """
    store_dir = None
    if out_dir is not None:
        out_dir = Path(out_dir)
        out_dir.mkdir(parents=True, exist_ok=True)
        store_dir = out_dir / "stores"
        if store_dir.exists():
            shutil.rmtree(store_dir)
        store_dir.mkdir()
    sim = build_simulation(config, store_dir, validate=validate)
    sim.run()
    metrics = collect_metrics(sim)
    if out_dir is not None:
        (out_dir / "metrics.json").write_bytes(metrics.to_json())
        (out_dir / "trace.jsonl").write_bytes(trace_lines(sim.network.trace))
    return metrics, sim.network.trace


@dataclass(frozen=True)
class ChainVerdict:
    valid: bool
    length: int
    height: int | None = None
    reason: str | None = None


def verify_chain(store_path: str | Path) -> ChainVerdict:
    """Replay every stored block through block verification.

    Reports the first failing height. A torn trailing record (crash during
    append) is ignored, matching what the store itself does on reload.
    """
    raw = Path(store_path).read_bytes()
    lines, _ = split_records(raw)
    chain = Chain()
    for line in lines:
        pos = len(chain)
        try:
            doc = parse_record(line)
            if isinstance(doc, dict) and set(doc) == {"truncate"}:
                height = doc["truncate"]
                if type(height) is not int or not -1 <= height < len(chain):
                    raise Malformed("bad tombstone")
                chain = chain.truncate(height)
                continue
            block = block_from_doc(doc)
        except Malformed as exc:
            return ChainVerdict(False, pos, pos, f"{Failure.MALFORMED.value}: {exc.detail}")
        if doc["h"] != pos:
            return ChainVerdict(False, pos, pos, Failure.HEIGHT_MISMATCH.value)
        failure = verify_block(chain, block)
        if failure is not None:
            return ChainVerdict(False, pos, pos, failure.value)
        if doc["hash"] != block.hash_hex:
            return ChainVerdict(False, pos, pos, Failure.HASH_MISMATCH.value)
        chain = chain.append(block)
    return ChainVerdict(True, len(chain))
