"""Working node: ingests telemetry, gossips it, tallies the verification quorum.

A block from the satellite is held as *pending* at its entry Mystic and is
only written to that Mystic's chain once enough of the circle has
acknowledged it. Peers append the block as soon as it verifies locally; if
the origin later revokes it they roll it back.
"""

from __future__ import annotations

import enum
import math
from dataclasses import dataclass, field
from fractions import Fraction

from circleledger._json import canonical_json
from circleledger.errors import AuthFailure, Busy, StaleAck, TokenMismatch, UnknownSender
from circleledger.ledger import (
    Block,
    Chain,
    DerivedKey,
    Failure,
    block_from_doc,
    block_nonce,
    block_to_doc,
    mine_block,
    open_payload,
    seal_payload,
    verify_block,
)
from circleledger.netsim import Node, distance
from circleledger.store import BlockStore, MemoryStore

LAGGING = "Lagging"
AUTH_FAILURE = "AuthFailure"


class QuorumState(str, enum.Enum):
    PENDING = "pending"
    VERIFIED = "verified"
    REVOKED = "revoked"


def quorum_threshold(alive_count: int, fraction: float = 0.8) -> int:
    """Smallest ack count that is at least ``fraction`` of ``alive_count``."""
    exact = Fraction(str(fraction)) if isinstance(fraction, float) else Fraction(fraction)
    return max(1, math.ceil(exact * alive_count))


@dataclass
class PendingBlock:
    block: Block
    acks: set[str]
    created_at: int


@dataclass(frozen=True)
class HashReport:
    mystic_id: str
    block_hash: str
    timestamp: int
    height: int

    def to_body(self) -> dict:
        return {
            "mystic_id": self.mystic_id,
            "block_hash": self.block_hash,
            "timestamp": self.timestamp,
            "height": self.height,
        }


@dataclass(frozen=True)
class GossipAck:
    block_hash: str
    mystic_id: str


@dataclass(frozen=True)
class GossipReject:
    block_hash: str
    mystic_id: str
    reason: str


@dataclass
class MysticConfig:
    difficulty: int = 8
    fanout: int = 2
    gossip_min_interval: int = 900
    quorum_fraction: float = 0.8
    charm_interval: int = 300
    pending_timeout: int = 3600


class MysticNode(Node):
    accepts_broadcast = True
    ROUTES = {
        "discover_probe": "on_discover_probe",
        "data_submit": "on_data_submit",
        "gossip_block": "on_gossip_block",
        "gossip_ack": "on_gossip_ack",
        "gossip_reject": "on_gossip_reject",
        "verified_notice": "on_verified_notice",
        "revoke_notice": "on_revoke_notice",
        "charm_ping": "on_charm_ping",
        "audit_request": "on_audit_request",
        "register_ack": "on_register_ack",
        "canonical_hash": "on_canonical_hash",
        "resync_request": "on_resync_request",
        "sync_blocks": "on_sync_blocks",
        "error": "on_error",
    }

    def __init__(
        self,
        node_id: str,
        position,
        *,
        circle_id: str,
        circle_token: str,
        key: DerivedKey,
        genesis: Block,
        watchtowers: dict[str, tuple[float, float]],
        registration_secret: str,
        config: MysticConfig | None = None,
        store: BlockStore | None = None,
    ):
        super().__init__(node_id, position)
        self.circle_id = circle_id
        self.circle_token = circle_token
        self.key = key
        self.watchtowers = dict(watchtowers)
        self.registration_secret = registration_secret
        self.config = config or MysticConfig()
        self.store = store if store is not None else MemoryStore(node_id)
        if self.store.tip_height < 0:
            self.store.put_block(genesis)
        self.chain = Chain(tuple(self.store.blocks()))
        self.sparkling = 0
        self.peers: dict[str, tuple[float, float]] = {}
        self.last_gossip_sent: dict[str, int] = {}
        self.pending: PendingBlock | None = None
        self.registered = False
        self.last_charm_seen = 0
        self.canonical_hash: str | None = None
        self._acked: set[str] = set()
        # blocks appended from gossip whose origin has not yet announced a verdict
        self.tentative: dict[str, int] = {}

    # -- helpers -------------------------------------------------------

    @property
    def tip_hex(self) -> str:
        return self.chain.tip.hex()

    @property
    def alive_count(self) -> int:
        return len(self.peers) + 1

    def nearest_watchtower(self) -> str:
        return min(self.watchtowers, key=lambda w: (distance(self.position, self.watchtowers[w]), w))

    def nearest_peers(self, candidates) -> list[str]:
        return sorted(candidates, key=lambda p: (distance(self.position, self.peers[p]), p))

    def _append(self, block: Block) -> None:
        self.store.put_block(block)
        self.chain = self.chain.append(block)

    def _truncate(self, height: int) -> None:
        self.store.truncate_to(height)
        self.chain = self.chain.truncate(height)
        held = {b.hash_hex for b in self.chain.blocks}
        self.tentative = {h: t for h, t in self.tentative.items() if h in held}

    def _unsettled(self, now: int) -> bool:
        """True while the tip holds someone else's block that may still be revoked."""
        limit = self.config.pending_timeout
        self.tentative = {h: t for h, t in self.tentative.items() if now - t <= limit}
        return bool(self.tentative)

    def settled_blocks(self) -> list[Block]:
        """Chain after genesis, up to the first tentative block."""
        out = []
        for block in self.chain.blocks[1:]:
            if block.hash_hex in self.tentative:
                break
            out.append(block)
        return out

    def _check(self, block: Block) -> str | None:
        failure = verify_block(self.chain, block)
        if failure is not None:
            return failure.value
        try:
            open_payload(self.key, block.payload_ciphertext)
        except AuthFailure:
            return AUTH_FAILURE
        return None

    def _set_members(self, members: list[dict]) -> None:
        self.peers = {m["id"]: tuple(m["position"]) for m in members if m["id"] != self.id}

    # -- lifecycle -----------------------------------------------------

    def start(self, now: int) -> None:
        self._register(now)
        self.set_timer(now + self.config.charm_interval, "liveness")

    def _register(self, now: int) -> None:
        body = {
            "mystic_id": self.id,
            "position": list(self.position),
            "secret": self.registration_secret,
        }
        for wt in sorted(self.watchtowers):
            self.send(wt, "register", body, f"{self.id}:register:{now}")

    def on_register_ack(self, msg, src, now):
        self.registered = True
        self.last_charm_seen = now
        self._set_members(msg.body["members"])
        self.log(now, "registered", resurrected=msg.body["resurrected"])

    def on_error(self, msg, src, now):
        if msg.body["code"] == "ALREADY_REGISTERED":
            self.registered = True
            self.last_charm_seen = now
        self.log(now, "error", code=msg.body["code"], src=src)

    def on_timer(self, name: str, now: int) -> None:
        if name == "liveness":
            interval = self.config.charm_interval
            if self.registered and now - self.last_charm_seen > 2 * interval:
                self.registered = False
                self.log(now, "lost_contact")
            if not self.registered:
                self._register(now)
            self.set_timer(now + interval, "liveness")
        elif name.startswith("gossip:") and self.pending is not None:
            if name != f"gossip:{self.pending.block.hash_hex}":
                return
            if now - self.pending.created_at >= self.config.pending_timeout:
                self._revoke("Timeout", now)
                return
            if self._check_quorum(now) is QuorumState.PENDING:
                self.gossip_round(now)
                self.set_timer(now + self.config.gossip_min_interval, name)

    # -- discovery and ingestion --------------------------------------

    def handle_discovery(self, probe: dict) -> dict | None:
        if not self.registered:
            return None
        return {"mystic_id": self.id, "position": list(self.position), "circle_id": self.circle_id}

    def on_discover_probe(self, msg, src, now):
        reply = self.handle_discovery(msg.body)
        return None if reply is None else ("discover_reply", reply)

    def ingest_payload(self, payload: dict, circle_token: str, now: int) -> tuple[Block, HashReport]:
        if circle_token != self.circle_token:
            raise TokenMismatch("circle token does not match this circle")
        if self.pending is not None:
            raise Busy(f"block {self.pending.block.hash_hex[:12]} still pending")
        if self._unsettled(now):
            raise Busy("waiting on the verdict for a gossiped block")
        height = len(self.chain)
        sealed = seal_payload(self.key, canonical_json(payload), block_nonce(self.id, height, now))
        block = mine_block(self.chain, sealed, self.config.difficulty, now, self.id)
        self.pending = PendingBlock(block, {self.id}, now)
        report = HashReport(self.id, block.hash_hex, now, block.height)
        self.send(self.nearest_watchtower(), "hash_report", report.to_body())
        self.log(now, "ingest", block_hash=block.hash_hex, height=height, sequence=payload.get("sequence"))
        return block, report

    def on_data_submit(self, msg, src, now):
        try:
            block, _ = self.ingest_payload(msg.body["payload"], msg.body["circle_token"], now)
        except (TokenMismatch, Busy) as exc:
            self.log(now, "submit_rejected", code=exc.code)
            raise
        self.send(src, "data_accept", {"block_hash": block.hash_hex}, msg.correlation_id)
        if self._check_quorum(now) is QuorumState.PENDING:
            self.gossip_round(now)
            self.set_timer(now + self.config.gossip_min_interval, f"gossip:{block.hash_hex}")
        return None

    # -- gossip ----------------------------------------------------------

    def gossip_round(self, now: int) -> list[tuple[str, dict]]:
        """Push the pending block to the nearest unacknowledged peers.

        The fan-out picks the n nearest peers that have not acked; any of
        them contacted less than ``gossip_min_interval`` ago is skipped.
        """
        if self.pending is None:
            return []
        unacked = [p for p in self.peers if p not in self.pending.acks]
        chosen = self.nearest_peers(unacked)[: self.config.fanout]
        block = self.pending.block
        body = {"block_hash": block.hash_hex, "block": block_to_doc(block)}
        sent = []
        for peer in chosen:
            last = self.last_gossip_sent.get(peer)
            if last is not None and now - last < self.config.gossip_min_interval:
                continue
            self.last_gossip_sent[peer] = now
            self.send(peer, "gossip_block", body)
            sent.append((peer, body))
        return sent

    def handle_gossip(self, block: Block, claimed_hash: str, sender: str, now: int) -> GossipAck | GossipReject:
        if sender not in self.peers:
            raise UnknownSender(f"{sender} is not a known circle member")
        digest = block.hash_hex
        if digest != claimed_hash:
            return GossipReject(claimed_hash, self.id, Failure.HASH_MISMATCH.value)
        if self.chain.index_of(block.hash) is None:
            if block.height > len(self.chain):
                return GossipReject(digest, self.id, LAGGING)
            reason = self._check(block)
            if reason is not None:
                return GossipReject(digest, self.id, reason)
            self._append(block)
            self.tentative[digest] = now
        if digest not in self._acked and block.origin_mystic != self.id:
            self._acked.add(digest)
            self.sparkling += 1
        return GossipAck(digest, self.id)

    def on_gossip_block(self, msg, src, now):
        block = block_from_doc(msg.body["block"])
        result = self.handle_gossip(block, msg.body["block_hash"], src, now)
        if isinstance(result, GossipAck):
            return "gossip_ack", {"block_hash": result.block_hash, "mystic_id": self.id}
        self.log(now, "gossip_rejected", block_hash=result.block_hash, reason=result.reason)
        return "gossip_reject", {
            "block_hash": result.block_hash,
            "mystic_id": self.id,
            "reason": result.reason,
        }

    def tally_quorum(self, ack: GossipAck | GossipReject, alive_count: int | None = None, now: int = 0) -> QuorumState:
        if self.pending is None or ack.block_hash != self.pending.block.hash_hex:
            raise StaleAck(f"no pending block {ack.block_hash[:12]}")
        if isinstance(ack, GossipReject):
            self._revoke(ack.reason, now)
            return QuorumState.REVOKED
        if ack.mystic_id == self.id or ack.mystic_id in self.peers:
            self.pending.acks.add(ack.mystic_id)
        return self._check_quorum(now, alive_count)

    def _check_quorum(self, now: int, alive_count: int | None = None) -> QuorumState:
        if self.pending is None:
            return QuorumState.PENDING
        alive = self.alive_count if alive_count is None else alive_count
        members = {p for p in self.pending.acks if p == self.id or p in self.peers}
        if len(members) < quorum_threshold(alive, self.config.quorum_fraction):
            return QuorumState.PENDING
        self._finalize(len(members), now)
        return QuorumState.VERIFIED

    def _finalize(self, acks: int, now: int) -> None:
        pending, self.pending = self.pending, None
        block = pending.block
        if block.header.prev_hash != self.chain.tip:
            self.pending = pending
            self._revoke("Superseded", now)
            return
        self._append(block)
        self.log(
            now, "verified",
            block_hash=block.hash_hex, height=block.height, acks=acks,
            latency=now - pending.created_at,
        )
        body = {"block_hash": block.hash_hex, "block": block_to_doc(block), "acks": acks}
        for peer in sorted(self.peers):
            self.send(peer, "verified_notice", body)
        self.send(self.nearest_watchtower(), "verified_notice", body)

    def _revoke(self, reason: str, now: int) -> None:
        pending, self.pending = self.pending, None
        block = pending.block
        self.log(now, "revoked", block_hash=block.hash_hex, height=block.height, reason=reason)
        body = {"block_hash": block.hash_hex, "height": block.height, "reason": reason}
        for peer in sorted(self.peers):
            self.send(peer, "revoke_notice", body)
        self.send(self.nearest_watchtower(), "revoke_notice", body)

    def on_gossip_ack(self, msg, src, now):
        try:
            self.tally_quorum(GossipAck(msg.body["block_hash"], src), now=now)
        except StaleAck:
            pass
        return None

    def on_gossip_reject(self, msg, src, now):
        reject = GossipReject(msg.body["block_hash"], src, msg.body["reason"])
        if reject.reason == LAGGING:
            if src in self.peers:
                self.send(src, "sync_blocks", {"blocks": [block_to_doc(b) for b in self.settled_blocks()]})
            return None
        try:
            self.tally_quorum(reject, now=now)
        except StaleAck:
            pass
        return None

    def on_verified_notice(self, msg, src, now):
        block = block_from_doc(msg.body["block"])
        self.tentative.pop(block.hash_hex, None)
        if self.chain.index_of(block.hash) is None and block.height == len(self.chain):
            if self._check(block) is None:
                self._append(block)
                self.log(now, "applied", block_hash=block.hash_hex, height=block.height)
        return None

    def on_revoke_notice(self, msg, src, now):
        idx = self.chain.index_of(bytes.fromhex(msg.body["block_hash"]))
        if idx is not None and idx > 0:
            self._truncate(idx - 1)
            self.log(now, "rolled_back", block_hash=msg.body["block_hash"], height=idx)
        return None

    # -- control plane ---------------------------------------------------

    def respond_control(self, kind: str, body: dict, now: int) -> tuple[str, dict]:
        if kind == "charm_ping":
            return "charm_ack", {"mystic_id": self.id, "tip": self.tip_hex, "at": now}
        if kind == "audit_request":
            return "audit_reply", {"audit_id": body["audit_id"], "mystic_id": self.id, "tip": self.tip_hex}
        raise ValueError(kind)

    def on_charm_ping(self, msg, src, now):
        self._set_members(msg.body["members"])
        self.registered = True
        self.last_charm_seen = now
        return self.respond_control("charm_ping", msg.body, now)

    def on_audit_request(self, msg, src, now):
        return self.respond_control("audit_request", msg.body, now)

    def on_canonical_hash(self, msg, src, now):
        self.canonical_hash = msg.body["block_hash"]
        return None

    def on_resync_request(self, msg, src, now):
        idx = self.chain.index_of(bytes.fromhex(msg.body["from_hash"]))
        start = 0 if idx is None else idx
        blocks = [block_to_doc(b) for b in self.settled_blocks()[start:]]
        self.send(msg.body["target"], "sync_blocks", {"blocks": blocks})
        return None

    def on_sync_blocks(self, msg, src, now):
        before = self.tip_hex
        for doc in msg.body["blocks"]:
            block = block_from_doc(doc)
            if self.pending is not None and block.hash == self.pending.block.hash:
                break
            h = block.height
            if h < len(self.chain):
                if self.chain[h].hash == block.hash:
                    continue
                if h == 0:
                    break
                self._truncate(h - 1)
            if h != len(self.chain) or self._check(block) is not None:
                break
            self._append(block)
        if self.tip_hex != before:
            self.log(now, "synced", tip=self.tip_hex, height=len(self.chain) - 1)
        return None
