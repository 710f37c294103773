"""Gatekeeper node: membership, canonical hash, audits and inter-circle tokens."""

from __future__ import annotations

import hmac
import random
from dataclasses import dataclass, field

from circleledger.errors import (
    AlreadyRegistered,
    BadCredentials,
    EmptyRound,
    ExpiredToken,
    InvalidToken,
    InvalidWindow,
    NoCanonicalHash,
    NotFound,
    QuotaExceeded,
    UnknownRequester,
)
from circleledger.mystic import HashReport
from circleledger.netsim import Node, distance

DEFAULT_TTL = 900


def quota(local_alive: int) -> int:
    """How many foreign Mystics a circle of ``local_alive`` Mystics admits."""
    return max(0, local_alive // 2 - 2)


@dataclass
class InterCircleToken:
    token_id: str
    issuer_circle: str
    bearer_watchtower: str
    issued_at: int
    ttl: int = DEFAULT_TTL
    revoked: bool = False

    @property
    def expires_at(self) -> int:
        return self.issued_at + self.ttl

    def is_valid(self, now: int) -> bool:
        return not self.revoked and now < self.expires_at

    def to_grant(self) -> dict:
        return {
            "token_id": self.token_id,
            "issuer_circle": self.issuer_circle,
            "issued_at": self.issued_at,
            "expires_at": self.expires_at,
            "ttl": self.ttl,
        }


@dataclass
class Member:
    position: tuple[float, float]
    last_charm_ack: int
    last_tip: str | None = None


@dataclass(frozen=True)
class AbyssEntry:
    mystic_id: str
    died_at: int
    last_known_tip: str | None
    position: tuple[float, float]


@dataclass
class AuditResult:
    audit_id: int
    sampled: list[str]
    passed: bool
    failures: list[str]
    missing: list[str] = field(default_factory=list)


@dataclass
class _AuditRound:
    audit_id: int
    canonical: str
    sampled: list[str]
    replies: dict[str, str] = field(default_factory=dict)


class WatchtowerNode(Node):
    ROUTES = {
        "register": "on_register",
        "hash_report": "on_hash_report",
        "charm_ack": "on_charm_ack",
        "audit_reply": "on_audit_reply",
        "verified_notice": "on_verified_notice",
        "revoke_notice": "on_revoke_notice",
        "token_request": "on_token_request",
        "token_renew": "on_token_renew",
        "token_revoke": "on_token_revoke",
    }

    def __init__(
        self,
        node_id: str,
        position,
        *,
        circle_id: str,
        registration_secret: str,
        seed: int = 0,
        charm_interval: int = 300,
        token_ttl: int = DEFAULT_TTL,
        audit_sample: int = 3,
        audit_delay: int = 10,
        audit_window: int = 10,
        round_window: int = 5,
        known_watchtowers=(),
    ):
        super().__init__(node_id, position)
        self.circle_id = circle_id
        self.registration_secret = registration_secret
        self.charm_interval = charm_interval
        self.token_ttl = token_ttl
        self.audit_sample = audit_sample
        self.audit_delay = audit_delay
        self.audit_window = audit_window
        self.round_window = round_window
        self.known_watchtowers = set(known_watchtowers)
        self.alive: dict[str, Member] = {}
        self.abyss: dict[str, AbyssEntry] = {}
        self.canonical_hash: str | None = None
        self.canonical_history: list[str] = []
        self.reports: list[HashReport] = []
        self.reported: set[str] = set()
        self.issued_tokens: list[InterCircleToken] = []
        self.external_count = 0
        self.externals: list[str] = []
        self.suspects: list[str] = []
        self.audit_rng = random.Random(f"{seed}:audit:{node_id}")
        self.token_rng = random.Random(f"{seed}:token:{node_id}")
        self._audits: dict[int, _AuditRound] = {}
        self._next_audit = 0

    def start(self, now: int) -> None:
        self.set_timer(now + self.charm_interval, "charm")

    def roster(self) -> list[dict]:
        return [{"id": mid, "position": list(m.position)} for mid, m in sorted(self.alive.items())]

    # -- membership --------------------------------------------------------

    def register_mystic(self, request: dict, now: int) -> dict:
        """Admit a local Mystic presenting the circle secret.

        Returns the ``register_ack`` body; ``resurrected`` is true when the
        Mystic came back from the abyss.
        """
        mid = request["mystic_id"]
        if "token_id" in request:
            self.admit_external_mystic(request["token_id"], mid, now)
            return {"mystic_id": mid, "members": [], "resurrected": False, "external": True}
        secret = request.get("secret", "")
        if not hmac.compare_digest(secret.encode(), self.registration_secret.encode()):
            raise BadCredentials(f"bad credentials for {mid}")
        if mid in self.alive:
            # it lost contact without us noticing; it may have missed blocks
            member = self.alive[mid]
            member.last_charm_ack = now
            self.request_resync(mid, member.last_tip, now)
            raise AlreadyRegistered(f"{mid} is already alive")
        entry = self.abyss.pop(mid, None)
        self.alive[mid] = Member(tuple(request["position"]), now, entry.last_known_tip if entry else None)
        self.log(now, "admitted", mystic_id=mid, resurrected=entry is not None)
        # existing members learn about the newcomer straight away
        body = {"members": self.roster(), "sent_at": now}
        for other in sorted(self.alive):
            if other != mid:
                self.send(other, "charm_ping", body)
        if entry is not None:
            self.request_resync(mid, entry.last_known_tip, now)
        return {
            "mystic_id": mid,
            "members": self.roster(),
            "resurrected": entry is not None,
            "external": False,
        }

    def on_register(self, msg, src, now):
        return "register_ack", self.register_mystic(msg.body, now)

    def charm_cycle(self, now: int) -> tuple[list[str], list[str]]:
        """Move silent Mystics to the abyss, then ping everyone still alive."""
        limit = 2 * self.charm_interval
        died = [mid for mid, m in sorted(self.alive.items()) if now - m.last_charm_ack > limit]
        for mid in died:
            m = self.alive.pop(mid)
            self.abyss[mid] = AbyssEntry(mid, now, m.last_tip, m.position)
            self.log(now, "abyss", mystic_id=mid)
        body = {"members": self.roster(), "sent_at": now}
        pinged = sorted(self.alive)
        for mid in pinged:
            self.send(mid, "charm_ping", body)
        return pinged, died

    def on_charm_ack(self, msg, src, now):
        member = self.alive.get(msg.body["mystic_id"])
        if member is not None:
            member.last_charm_ack = now
            member.last_tip = msg.body["tip"]
        return None

    def on_timer(self, name: str, now: int) -> None:
        if name == "charm":
            self.charm_cycle(now)
            self.set_timer(now + self.charm_interval, "charm")
        elif name == "round":
            if self.reports:
                self.select_canonical_hash(self.reports)
                self.reports = []
        elif name == "audit":
            if self.canonical_hash is not None and self.alive:
                self.start_audit(self.audit_sample, now)
        elif name.startswith("audit_close:"):
            self.close_audit(int(name.split(":")[1]), now)

    # -- hash rounds ---------------------------------------------------------

    def on_hash_report(self, msg, src, now):
        b = msg.body
        if not self.reports:
            self.set_timer(now + self.round_window, "round")
        self.reports.append(HashReport(b["mystic_id"], b["block_hash"], b["timestamp"], b["height"]))
        self.reported.add(b["block_hash"])
        return None

    def select_canonical_hash(self, reports: list[HashReport]) -> tuple[str, list[str]]:
        """Pick the most recent report (ties: smallest hex) and tell every reporter."""
        if not reports:
            raise EmptyRound("no hash reports this round")
        best = min(reports, key=lambda r: (-r.timestamp, r.block_hash))
        self._set_canonical(best.block_hash)
        self.reported.update(r.block_hash for r in reports)
        recipients = sorted({r.mystic_id for r in reports})
        for mid in recipients:
            self.send(mid, "canonical_hash", {"block_hash": best.block_hash})
        return best.block_hash, recipients

    def _set_canonical(self, block_hash: str) -> None:
        if self.canonical_hash != block_hash:
            self.canonical_hash = block_hash
            self.canonical_history.append(block_hash)

    def on_verified_notice(self, msg, src, now):
        h = msg.body["block_hash"]
        if h in self.reported:
            self._set_canonical(h)
            self.log(now, "canonical", block_hash=h)
            self.set_timer(now + self.audit_delay, "audit")
        return None

    def on_revoke_notice(self, msg, src, now):
        h = msg.body["block_hash"]
        self.reports = [r for r in self.reports if r.block_hash != h]
        self.canonical_history = [x for x in self.canonical_history if x != h]
        self.canonical_hash = self.canonical_history[-1] if self.canonical_history else None
        return None

    # -- audits --------------------------------------------------------------

    def _sample(self, k: int) -> list[str]:
        population = sorted(self.alive)
        return sorted(self.audit_rng.sample(population, min(k, len(population))))

    def audit_mystics(self, k: int, now: int, ask) -> AuditResult:
        """Synchronous audit: ``ask(mystic_id)`` returns that Mystic's tip."""
        if self.canonical_hash is None:
            raise NoCanonicalHash("no canonical hash to audit against")
        audit = self._open_audit(k)
        for mid in audit.sampled:
            tip = ask(mid)
            if tip is not None:
                audit.replies[mid] = tip
        return self.close_audit(audit.audit_id, now)

    def _open_audit(self, k: int) -> _AuditRound:
        audit = _AuditRound(self._next_audit, self.canonical_hash, self._sample(k))
        self._audits[audit.audit_id] = audit
        self._next_audit += 1
        return audit

    def start_audit(self, k: int, now: int) -> list[str]:
        if self.canonical_hash is None:
            raise NoCanonicalHash("no canonical hash to audit against")
        audit = self._open_audit(k)
        for mid in audit.sampled:
            self.send(mid, "audit_request", {"audit_id": audit.audit_id})
        self.set_timer(now + self.audit_window, f"audit_close:{audit.audit_id}")
        return audit.sampled

    def on_audit_reply(self, msg, src, now):
        audit = self._audits.get(msg.body["audit_id"])
        if audit is not None and src in audit.sampled:
            audit.replies[src] = msg.body["tip"]
        return None

    def close_audit(self, audit_id: int, now: int) -> AuditResult:
        audit = self._audits.pop(audit_id)
        failures = [m for m in audit.sampled if m in audit.replies and audit.replies[m] != audit.canonical]
        missing = [m for m in audit.sampled if m not in audit.replies]
        result = AuditResult(audit_id, audit.sampled, not failures, failures, missing)
        self.log(
            now, "audit", audit_id=audit_id, canonical=audit.canonical, sampled=audit.sampled,
            passed=result.passed, failures=failures, missing=missing,
        )
        for mid in failures:
            if mid not in self.suspects:
                self.suspects.append(mid)
            self.request_resync(mid, audit.replies[mid], now)
        return result

    def request_resync(self, target: str, from_hash: str | None, now: int) -> str | None:
        """Ask the closest up-to-date Mystic to stream blocks to ``target``."""
        origin = self.alive[target].position if target in self.alive else self.position
        others = [m for m in self.alive if m != target]
        healthy = [m for m in others if self.alive[m].last_tip == self.canonical_hash]
        pool = healthy or others
        if not pool:
            return None
        helper = min(pool, key=lambda m: (distance(origin, self.alive[m].position), m))
        self.send(helper, "resync_request", {"target": target, "from_hash": from_hash or "0" * 64})
        self.log(now, "resync", target=target, helper=helper)
        return helper

    # -- inter-circle tokens ---------------------------------------------------

    def _find_token(self, token_id: str) -> InterCircleToken | None:
        for token in self.issued_tokens:
            if token.token_id == token_id:
                return token
        return None

    def _mint(self, bearer: str, now: int, ttl: int) -> InterCircleToken:
        token = InterCircleToken(self.token_rng.randbytes(32).hex(), self.circle_id, bearer, now, ttl)
        self.issued_tokens.append(token)
        return token

    def issue_token(self, requester: str, now: int) -> InterCircleToken:
        if requester not in self.known_watchtowers:
            raise UnknownRequester(f"{requester} is not a known watchtower")
        token = self._mint(requester, now, self.token_ttl)
        self.log(now, "token_issued", token_id=token.token_id, bearer=requester)
        return token

    def validate_token(self, token_id: str, now: int) -> bool:
        token = self._find_token(token_id)
        return token is not None and token.is_valid(now)

    def renew_token(self, current: InterCircleToken | str, window_minutes: int, now: int) -> InterCircleToken:
        """Swap a still-valid token for one lasting ``window_minutes``."""
        token_id = current if isinstance(current, str) else current.token_id
        if window_minutes <= 0:
            raise InvalidWindow(f"window must be positive, got {window_minutes}")
        token = self._find_token(token_id)
        if token is None or token.revoked:
            raise InvalidToken("unknown or revoked token")
        if not token.is_valid(now):
            raise ExpiredToken(f"token expired at {token.expires_at}")
        token.revoked = True
        fresh = self._mint(token.bearer_watchtower, now, window_minutes * 60)
        self.log(now, "token_renewed", old=token_id, token_id=fresh.token_id)
        return fresh

    def revoke_token(self, token_id: str) -> InterCircleToken:
        token = self._find_token(token_id)
        if token is None:
            raise NotFound(f"no token {token_id[:12]}")
        token.revoked = True
        return token

    def admit_external_mystic(self, token: InterCircleToken | str, mystic_id: str, now: int) -> None:
        token_id = token if isinstance(token, str) else token.token_id
        if not self.validate_token(token_id, now):
            raise InvalidToken("token is unknown, revoked or expired")
        limit = quota(len(self.alive))
        if self.external_count >= limit:
            self.log(now, "external_denied", mystic_id=mystic_id)
            raise QuotaExceeded(f"external quota {limit} reached")
        self.external_count += 1
        self.externals.append(mystic_id)
        self.log(now, "external_admitted", mystic_id=mystic_id)

    def on_token_request(self, msg, src, now):
        return "token_grant", self.issue_token(msg.body["watchtower_id"], now).to_grant()

    def on_token_renew(self, msg, src, now):
        return "token_grant", self.renew_token(msg.body["token_id"], msg.body["window_minutes"], now).to_grant()

    def on_token_revoke(self, msg, src, now):
        self.revoke_token(msg.body["token_id"])
        return "token_revoked", {"token_id": msg.body["token_id"]}


class ForeignWatchtower(Node):
    """Scripted watchtower of another circle that borrows our gate.

    ``actions`` are ``{"at": t, "do": ...}`` dicts with ``do`` one of
    ``token_request``, ``admit`` (with ``count``), ``renew`` (with
    ``window_minutes``) or ``revoke``.
    """

    ROUTES = {
        "token_grant": "on_token_grant",
        "token_revoked": "on_token_revoked",
        "register_ack": "on_register_ack",
        "error": "on_error",
    }

    def __init__(self, node_id: str, position, target: str, actions: list[dict]):
        super().__init__(node_id, position)
        self.target = target
        self.actions = list(actions)
        self.token: dict | None = None
        self._admitted = 0

    def start(self, now: int) -> None:
        for i, action in enumerate(self.actions):
            self.set_timer(max(now, action["at"]), f"action:{i}")

    def on_timer(self, name: str, now: int) -> None:
        action = self.actions[int(name.split(":")[1])]
        do = action["do"]
        if do == "token_request":
            self.send(self.target, "token_request", {"watchtower_id": self.id}, f"{self.id}:token:{now}")
        elif self.token is None:
            self.log(now, "no_token", action=do)
        elif do == "admit":
            for _ in range(action.get("count", 1)):
                mid = f"{self.id}-x{self._admitted}"
                self._admitted += 1
                body = {"mystic_id": mid, "position": list(self.position), "token_id": self.token["token_id"]}
                self.send(self.target, "register", body, f"{self.id}:admit:{mid}")
        elif do == "renew":
            body = {"token_id": self.token["token_id"], "window_minutes": action.get("window_minutes", 15)}
            self.send(self.target, "token_renew", body, f"{self.id}:renew:{now}")
        elif do == "revoke":
            self.send(self.target, "token_revoke", {"token_id": self.token["token_id"]}, f"{self.id}:revoke:{now}")

    def on_token_grant(self, msg, src, now):
        self.token = dict(msg.body)
        self.log(now, "token_granted", **msg.body)

    def on_token_revoked(self, msg, src, now):
        self.log(now, "token_revoked", token_id=msg.body["token_id"])

    def on_register_ack(self, msg, src, now):
        self.log(now, "external_admitted", mystic_id=msg.body["mystic_id"])

    def on_error(self, msg, src, now):
        self.log(now, "error", code=msg.body["code"], correlation_id=msg.correlation_id)
