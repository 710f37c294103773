"""JSON message schemas, canonical encoding and request dispatch.

Every message on the simulated network is a :class:`WireMessage`. Encoded
form is canonical JSON (sorted keys, compact separators, UTF-8) so the same
message always produces the same bytes.
"""

from __future__ import annotations

import json
from dataclasses import dataclass, field
from typing import Any

from jsonschema import Draft202012Validator

from circleledger._json import canonical_json
from circleledger.errors import (
    ERROR_CODES,
    CircleError,
    MalformedJson,
    SchemaViolation,
    UnknownKind,
    UnroutableKind,
)

HEX64 = {"type": "string", "pattern": "^[0-9a-f]{64}$"}
HEX = {"type": "string", "pattern": "^(?:[0-9a-f]{2})*$"}
NODE_ID = {"type": "string", "minLength": 1}
UINT = {"type": "integer", "minimum": 0}
POSITION = {"type": "array", "items": {"type": "number"}, "minItems": 2, "maxItems": 2}


def _obj(required: dict, optional: dict | None = None, **extra) -> dict:
    props = dict(required)
    props.update(optional or {})
    schema = {
        "type": "object",
        "properties": props,
        "required": sorted(required),
        "additionalProperties": False,
    }
    schema.update(extra)
    return schema


BLOCK = _obj(
    {
        "h": UINT,
        "hash": HEX64,
        "header": _obj(
            {
                "ancestor_merkle_root": HEX64,
                "difficulty": {"type": "integer", "minimum": 0, "maximum": 255},
                "height": UINT,
                "nonce": UINT,
                "payload_hash": HEX64,
                "prev_hash": HEX64,
                "timestamp": UINT,
            }
        ),
        "origin": NODE_ID,
        "payload": HEX,
    }
)
MEMBERS = {
    "type": "array",
    "items": _obj({"id": NODE_ID, "position": POSITION}),
}
REJECT_REASONS = [
    "PrevHashMismatch", "PowFailure", "PayloadHashMismatch", "MerkleMismatch",
    "TimestampRegression", "HeightMismatch", "HashMismatch", "AuthFailure", "Lagging",
]

SCHEMAS: dict[str, dict] = {
    "register": _obj(
        {"mystic_id": NODE_ID, "position": POSITION},
        {"secret": {"type": "string"}, "token_id": HEX64},
        oneOf=[{"required": ["secret"]}, {"required": ["token_id"]}],
    ),
    "register_ack": _obj(
        {
            "mystic_id": NODE_ID,
            "members": MEMBERS,
            "resurrected": {"type": "boolean"},
            "external": {"type": "boolean"},
        }
    ),
    "data_submit": _obj(
        {
            "payload": _obj(
                {
                    "readings": {"type": "object", "additionalProperties": {"type": "number"}},
                    "sequence": UINT,
                    "sampled_at": UINT,
                }
            ),
            "circle_token": HEX64,
        }
    ),
    "data_accept": _obj({"block_hash": HEX64}),
    "hash_report": _obj(
        {"mystic_id": NODE_ID, "block_hash": HEX64, "height": UINT, "timestamp": UINT}
    ),
    "canonical_hash": _obj({"block_hash": HEX64}),
    "gossip_block": _obj({"block_hash": HEX64, "block": BLOCK}),
    "gossip_ack": _obj({"block_hash": HEX64, "mystic_id": NODE_ID}),
    "gossip_reject": _obj(
        {"block_hash": HEX64, "mystic_id": NODE_ID, "reason": {"enum": REJECT_REASONS}}
    ),
    "charm_ping": _obj({"members": MEMBERS, "sent_at": UINT}),
    "charm_ack": _obj({"mystic_id": NODE_ID, "tip": HEX64, "at": UINT}),
    "audit_request": _obj({"audit_id": UINT}),
    "audit_reply": _obj({"audit_id": UINT, "mystic_id": NODE_ID, "tip": HEX64}),
    "token_request": _obj({"watchtower_id": NODE_ID}),
    "token_grant": _obj(
        {
            "token_id": HEX64,
            "issuer_circle": NODE_ID,
            "issued_at": UINT,
            "expires_at": UINT,
            "ttl": UINT,
        }
    ),
    "token_renew": _obj({"token_id": HEX64, "window_minutes": {"type": "integer"}}),
    "token_revoke": _obj({"token_id": HEX64}),
    "token_revoked": _obj({"token_id": HEX64}),
    "discover_probe": _obj({"satellite_id": NODE_ID, "sent_at": UINT}),
    "discover_reply": _obj(
        {"mystic_id": NODE_ID, "position": POSITION, "circle_id": NODE_ID}
    ),
    "error": _obj({"code": {"enum": ERROR_CODES}, "detail": {"type": "string"}}),
    "verified_notice": _obj({"block_hash": HEX64, "block": BLOCK, "acks": UINT}),
    "revoke_notice": _obj(
        {"block_hash": HEX64, "height": UINT, "reason": {"type": "string"}}
    ),
    "resync_request": _obj({"target": NODE_ID, "from_hash": HEX64}),
    "sync_blocks": _obj({"blocks": {"type": "array", "items": BLOCK}}),
}
KINDS = tuple(sorted(SCHEMAS))

ENVELOPE = _obj(
    {
        "kind": {"type": "string"},
        "body": {"type": "object"},
        "correlation_id": {"type": "string"},
    }
)

_validators = {kind: Draft202012Validator(schema) for kind, schema in SCHEMAS.items()}
_envelope_validator = Draft202012Validator(ENVELOPE)


@dataclass
class WireMessage:
    kind: str
    body: dict[str, Any] = field(default_factory=dict)
    correlation_id: str = ""

    def to_doc(self) -> dict:
        return {"kind": self.kind, "body": self.body, "correlation_id": self.correlation_id}


def encode(message: WireMessage) -> bytes:
    return canonical_json(message.to_doc())


def _violation(errors) -> SchemaViolation:
    err = min(errors, key=lambda e: (list(e.absolute_path), e.message))
    path = "/".join(str(p) for p in err.absolute_path)
    if err.validator == "required":
        # "'circle_token' is a required property"
        missing = err.message.split("'")[1]
        path = f"{path}/{missing}" if path else missing
    elif err.validator == "additionalProperties":
        extra = err.message.split("'")[1]
        path = f"{path}/{extra}" if path else extra
    return SchemaViolation(f"{path or '<root>'}: {err.message}", field=path or None)


def validate(message: WireMessage) -> None:
    validator = _validators.get(message.kind)
    if validator is None:
        raise UnknownKind(f"unknown kind {message.kind!r}")
    errors = list(validator.iter_errors(message.body))
    if errors:
        raise _violation(errors)


def decode(data: bytes) -> WireMessage:
    try:
        doc = json.loads(data)
    except (ValueError, UnicodeDecodeError) as exc:
        raise MalformedJson(str(exc)) from None
    errors = list(_envelope_validator.iter_errors(doc))
    if errors:
        raise _violation(errors)
    message = WireMessage(doc["kind"], doc["body"], doc["correlation_id"])
    validate(message)
    return message


def error_message(exc: CircleError, correlation_id: str = "") -> WireMessage:
    return WireMessage("error", {"code": exc.code, "detail": exc.detail}, correlation_id)


def dispatch(message: WireMessage, node, src: str, now: int) -> WireMessage | None:
    """Route ``message`` to the handler ``node`` declares for its kind.

    Handlers take ``(message, src, now)`` and return ``(kind, body)`` or
    None. Protocol errors become ``error`` responses with the exception's
    stable code.
    """
    handler_name = node.ROUTES.get(message.kind)
    if handler_name is None:
        raise UnroutableKind(f"{type(node).__name__} does not accept {message.kind!r}")
    try:
        reply = getattr(node, handler_name)(message, src, now)
    except CircleError as exc:
        return error_message(exc, message.correlation_id)
    if reply is None:
        return None
    kind, body = reply
    return WireMessage(kind, body, message.correlation_id)


def schema_document() -> dict:
    return {"envelope": ENVELOPE, "kinds": SCHEMAS}
