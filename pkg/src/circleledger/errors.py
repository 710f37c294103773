"""Exception hierarchy shared by every module.

Protocol errors carry a stable ``code`` so the wire gateway can turn them
into ``error`` responses without a lookup table.
"""


class CircleError(Exception):
    code = "INTERNAL"

    def __init__(self, detail: str = ""):
        super().__init__(detail or self.__class__.__name__)
        self.detail = detail or self.__class__.__name__


# ledger-core
class SaltLength(CircleError):
    code = "SALT_LENGTH"


class AuthFailure(CircleError):
    code = "AUTH_FAILURE"


class Malformed(CircleError):
    code = "MALFORMED"


class DifficultyTooHigh(CircleError):
    code = "DIFFICULTY_TOO_HIGH"


class HeightOutOfRange(CircleError):
    code = "HEIGHT_OUT_OF_RANGE"


# persistence
class HeightGap(CircleError):
    code = "HEIGHT_GAP"


class DuplicateHeight(CircleError):
    code = "DUPLICATE_HEIGHT"


# mystic
class TokenMismatch(CircleError):
    code = "TOKEN_MISMATCH"


class Busy(CircleError):
    code = "BUSY"


class UnknownSender(CircleError):
    code = "UNKNOWN_SENDER"


class StaleAck(CircleError):
    code = "STALE_ACK"


# watchtower
class BadCredentials(CircleError):
    code = "BAD_CREDENTIALS"


class AlreadyRegistered(CircleError):
    code = "ALREADY_REGISTERED"


class EmptyRound(CircleError):
    code = "EMPTY_ROUND"


class NoCanonicalHash(CircleError):
    code = "NO_CANONICAL_HASH"


class UnknownRequester(CircleError):
    code = "UNKNOWN_REQUESTER"


class ExpiredToken(CircleError):
    code = "EXPIRED_TOKEN"


class InvalidWindow(CircleError):
    code = "INVALID_WINDOW"


class NotFound(CircleError):
    code = "NOT_FOUND"


class QuotaExceeded(CircleError):
    code = "QUOTA_EXCEEDED"


class InvalidToken(CircleError):
    code = "INVALID_TOKEN"


# satellite
class FlightAlreadyStarted(CircleError):
    code = "FLIGHT_ALREADY_STARTED"


class NoMystics(CircleError):
    code = "NO_MYSTICS"


# net-sim
class PastDelivery(CircleError):
    code = "PAST_DELIVERY"


# wire-gateway
class WireError(CircleError):
    code = "WIRE_ERROR"


class MalformedJson(WireError):
    code = "MALFORMED_JSON"


class UnknownKind(WireError):
    code = "UNKNOWN_KIND"


class SchemaViolation(WireError):
    code = "SCHEMA_VIOLATION"

    def __init__(self, detail: str = "", field: str | None = None):
        super().__init__(detail)
        self.field = field


class UnroutableKind(WireError):
    code = "UNROUTABLE_KIND"


# harness
class ScenarioError(CircleError):
    code = "SCENARIO_ERROR"


class ParseError(ScenarioError):
    code = "PARSE_ERROR"


class ValidationError(ScenarioError):
    code = "VALIDATION_ERROR"

    def __init__(self, detail: str = "", fields: dict[str, str] | None = None):
        super().__init__(detail)
        self.fields = fields or {}


# Closed set of codes that can appear on the wire.
ERROR_CODES = sorted(
    {
        cls.code
        for cls in (
            TokenMismatch, Busy, UnknownSender, StaleAck, BadCredentials,
            AlreadyRegistered, EmptyRound, NoCanonicalHash, UnknownRequester,
            ExpiredToken, InvalidWindow, NotFound, QuotaExceeded, InvalidToken,
            Malformed, AuthFailure, UnroutableKind, SchemaViolation, UnknownKind,
            MalformedJson, CircleError,
        )
    }
)
