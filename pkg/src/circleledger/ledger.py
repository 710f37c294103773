"""Blocks, proof-of-work and payload sealing.

Every block carries one sealed telemetry record. Blocks link by
``prev_hash`` and additionally commit to a Merkle root over the hashes of
their six immediate predecessors, so a replica whose recent history has
been altered fails verification on the next block it sees.
"""

from __future__ import annotations

import enum
import hashlib
import re
import struct
from dataclasses import dataclass, field, replace
from functools import cached_property

from cryptography.exceptions import InvalidTag
from cryptography.hazmat.primitives.ciphers.aead import AESGCM

from circleledger._json import canonical_json
from circleledger.errors import (
    AuthFailure,
    DifficultyTooHigh,
    HeightOutOfRange,
    Malformed,
    SaltLength,
)

ZERO_HASH = bytes(32)
EMPTY_HASH = hashlib.sha256(b"").digest()
MAX_DIFFICULTY = 32
MERKLE_WINDOW = 6
NONCE_LEN = 12
TAG_LEN = 16
MAX_NONCE = 2**64 - 1

# Fixed random salt mixed into every key derivation unless a scenario overrides it.
DEFAULT_SALT = bytes.fromhex(
    "5b1f0c9e8a7d3e2f41c6b0a9d8e7f6a5b4c3d2e1f0a9b8c7d6e5f4a3b2c1d0e9"
)

_HEADER_FMT = ">Q32sQB32s32sQ"
_HEX64 = re.compile(r"^[0-9a-f]{64}$")
_HEX = re.compile(r"^(?:[0-9a-f]{2})*$")


def sha256(data: bytes) -> bytes:
    return hashlib.sha256(data).digest()


def leading_zero_bits(digest: bytes) -> int:
    value = int.from_bytes(digest, "big")
    return len(digest) * 8 - value.bit_length()


class Failure(str, enum.Enum):
    """Why a block was refused. Order matches the order checks are made."""

    PREV_HASH_MISMATCH = "PrevHashMismatch"
    POW_FAILURE = "PowFailure"
    PAYLOAD_HASH_MISMATCH = "PayloadHashMismatch"
    MERKLE_MISMATCH = "MerkleMismatch"
    TIMESTAMP_REGRESSION = "TimestampRegression"
    HEIGHT_MISMATCH = "HeightMismatch"
    # only produced when replaying a stored chain
    HASH_MISMATCH = "HashMismatch"
    MALFORMED = "Malformed"


@dataclass(frozen=True)
class BlockHeader:
    height: int
    prev_hash: bytes
    timestamp: int
    difficulty: int
    ancestor_merkle_root: bytes
    payload_hash: bytes
    nonce: int

    def __post_init__(self):
        for name in ("prev_hash", "ancestor_merkle_root", "payload_hash"):
            if len(getattr(self, name)) != 32:
                raise Malformed(f"{name} must be 32 bytes")
        if not 0 <= self.difficulty <= 255:
            raise Malformed("difficulty out of byte range")
        for name in ("height", "timestamp", "nonce"):
            if not 0 <= getattr(self, name) <= MAX_NONCE:
                raise Malformed(f"{name} out of u64 range")

    def serialize(self) -> bytes:
        return struct.pack(
            _HEADER_FMT,
            self.height,
            self.prev_hash,
            self.timestamp,
            self.difficulty,
            self.ancestor_merkle_root,
            self.payload_hash,
            self.nonce,
        )


def compute_block_hash(header: BlockHeader) -> bytes:
    """SHA-256 of the 121-byte big-endian header serialization."""
    return sha256(header.serialize())


@dataclass(frozen=True)
class Block:
    header: BlockHeader
    payload_ciphertext: bytes
    origin_mystic: str

    @cached_property
    def hash(self) -> bytes:
        return compute_block_hash(self.header)

    @property
    def hash_hex(self) -> str:
        return self.hash.hex()

    @property
    def height(self) -> int:
        return self.header.height


@dataclass(frozen=True)
class Chain:
    """Immutable sequence of blocks; mutators return a new chain."""

    blocks: tuple[Block, ...] = ()

    def __len__(self) -> int:
        return len(self.blocks)

    def __getitem__(self, height: int) -> Block:
        return self.blocks[height]

    @property
    def tip(self) -> bytes:
        return self.blocks[-1].hash if self.blocks else ZERO_HASH

    @property
    def tip_timestamp(self) -> int:
        return self.blocks[-1].header.timestamp if self.blocks else 0

    def append(self, block: Block) -> Chain:
        return Chain(self.blocks + (block,))

    def truncate(self, height: int) -> Chain:
        """Keep blocks ``0..height`` inclusive."""
        return Chain(self.blocks[: height + 1])

    def index_of(self, block_hash: bytes) -> int | None:
        for i in range(len(self.blocks) - 1, -1, -1):
            if self.blocks[i].hash == block_hash:
                return i
        return None

    def serialize(self) -> bytes:
        return b"".join(block_line(b) for b in self.blocks)


@dataclass(frozen=True)
class DerivedKey:
    key: bytes = field(repr=False)
    source_fingerprint: bytes


def derive_key(source_bytes: bytes, salt: bytes) -> DerivedKey:
    """Bind a symmetric key to the contents of a key-source file.

    key = SHA-256(source || salt || MD5(source)). Any change to the file
    produces a different key, so payloads sealed earlier stop opening.
    """
    if len(salt) != 32:
        raise SaltLength(f"salt must be 32 bytes, got {len(salt)}")
    md5 = hashlib.md5(source_bytes).digest()
    return DerivedKey(
        key=sha256(source_bytes + salt + md5),
        source_fingerprint=sha256(source_bytes),
    )


def seal_payload(key: DerivedKey, plaintext: bytes, block_nonce: bytes) -> bytes:
    """AES-256-GCM; returns ciphertext || tag || nonce."""
    if len(block_nonce) != NONCE_LEN:
        raise Malformed("block nonce must be 12 bytes")
    return AESGCM(key.key).encrypt(block_nonce, plaintext, None) + block_nonce


def open_payload(key: DerivedKey, sealed: bytes) -> bytes:
    if len(sealed) < TAG_LEN + NONCE_LEN:
        raise Malformed(f"sealed payload too short ({len(sealed)} bytes)")
    body, nonce = sealed[:-NONCE_LEN], sealed[-NONCE_LEN:]
    try:
        return AESGCM(key.key).decrypt(nonce, body, None)
    except InvalidTag:
        raise AuthFailure("payload did not authenticate under this key") from None


def merkle_root(leaves: list[bytes]) -> bytes:
    if not leaves:
        return EMPTY_HASH
    level = list(leaves)
    while True:
        if len(level) % 2:
            level.append(level[-1])
        level = [sha256(level[i] + level[i + 1]) for i in range(0, len(level), 2)]
        if len(level) == 1:
            return level[0]


def ancestor_merkle_root(chain: Chain, height: int) -> bytes:
    """Merkle root over the (up to) six block hashes below ``height``."""
    if not 0 <= height <= len(chain):
        raise HeightOutOfRange(f"height {height} outside 0..{len(chain)}")
    start = max(0, height - MERKLE_WINDOW)
    return merkle_root([chain[h].hash for h in range(start, height)])


def mine_block(
    chain: Chain,
    payload_ciphertext: bytes,
    difficulty: int,
    now: int,
    origin: str,
) -> Block:
    """Seal a block on top of ``chain`` with the smallest qualifying nonce."""
    if difficulty > MAX_DIFFICULTY:
        raise DifficultyTooHigh(f"difficulty {difficulty} > {MAX_DIFFICULTY}")
    if difficulty < 0:
        raise Malformed("difficulty must be non-negative")
    header = BlockHeader(
        height=len(chain),
        prev_hash=chain.tip,
        timestamp=now,
        difficulty=difficulty,
        ancestor_merkle_root=ancestor_merkle_root(chain, len(chain)),
        payload_hash=sha256(payload_ciphertext),
        nonce=0,
    )
    prefix = hashlib.sha256(header.serialize()[:-8])
    shift = 256 - difficulty
    nonce = 0
    while True:
        h = prefix.copy()
        h.update(nonce.to_bytes(8, "big"))
        if int.from_bytes(h.digest(), "big") >> shift == 0:
            break
        nonce += 1
    return Block(replace(header, nonce=nonce), payload_ciphertext, origin)


def verify_block(chain: Chain, block: Block) -> Failure | None:
    """Return None if ``block`` extends ``chain`` validly, else the first failure."""
    hdr = block.header
    if hdr.prev_hash != chain.tip:
        return Failure.PREV_HASH_MISMATCH
    if leading_zero_bits(block.hash) < hdr.difficulty:
        return Failure.POW_FAILURE
    if sha256(block.payload_ciphertext) != hdr.payload_hash:
        return Failure.PAYLOAD_HASH_MISMATCH
    if hdr.height > len(chain) or ancestor_merkle_root(chain, hdr.height) != hdr.ancestor_merkle_root:
        # a recomputation mismatch means an ancestor changed: integrity is lost
        return Failure.MERKLE_MISMATCH
    if hdr.timestamp < chain.tip_timestamp:
        return Failure.TIMESTAMP_REGRESSION
    if hdr.height != len(chain):
        return Failure.HEIGHT_MISMATCH
    return None


def make_genesis(key: DerivedKey, difficulty: int) -> Block:
    """Deterministic genesis block shared by every replica of a circle."""
    sealed = seal_payload(key, b"", bytes(NONCE_LEN))
    return mine_block(Chain(), sealed, difficulty, 0, "genesis")


def block_nonce(origin: str, height: int, now: int) -> bytes:
    return sha256(f"{origin}:{height}:{now}".encode())[:NONCE_LEN]


# Document form, shared by the block store and the wire messages.

def block_to_doc(block: Block) -> dict:
    hdr = block.header
    return {
        "h": hdr.height,
        "hash": block.hash_hex,
        "header": {
            "ancestor_merkle_root": hdr.ancestor_merkle_root.hex(),
            "difficulty": hdr.difficulty,
            "height": hdr.height,
            "nonce": hdr.nonce,
            "payload_hash": hdr.payload_hash.hex(),
            "prev_hash": hdr.prev_hash.hex(),
            "timestamp": hdr.timestamp,
        },
        "origin": block.origin_mystic,
        "payload": block.payload_ciphertext.hex(),
    }


def _int(doc: dict, key: str) -> int:
    value = doc.get(key)
    if type(value) is not int:
        raise Malformed(f"{key} must be an integer")
    return value


def _hex32(doc: dict, key: str) -> bytes:
    value = doc.get(key)
    if not isinstance(value, str) or not _HEX64.match(value):
        raise Malformed(f"{key} must be 64 lowercase hex characters")
    return bytes.fromhex(value)


def block_from_doc(doc: dict) -> Block:
    """Strict inverse of :func:`block_to_doc`. Raises Malformed."""
    if not isinstance(doc, dict) or set(doc) != {"h", "hash", "header", "origin", "payload"}:
        raise Malformed("block document has wrong keys")
    hdr = doc["header"]
    expected = {
        "ancestor_merkle_root", "difficulty", "height", "nonce",
        "payload_hash", "prev_hash", "timestamp",
    }
    if not isinstance(hdr, dict) or set(hdr) != expected:
        raise Malformed("header document has wrong keys")
    payload = doc["payload"]
    if not isinstance(payload, str) or not _HEX.match(payload):
        raise Malformed("payload must be lowercase hex")
    if not isinstance(doc["origin"], str):
        raise Malformed("origin must be a string")
    header = BlockHeader(
        height=_int(hdr, "height"),
        prev_hash=_hex32(hdr, "prev_hash"),
        timestamp=_int(hdr, "timestamp"),
        difficulty=_int(hdr, "difficulty"),
        ancestor_merkle_root=_hex32(hdr, "ancestor_merkle_root"),
        payload_hash=_hex32(hdr, "payload_hash"),
        nonce=_int(hdr, "nonce"),
    )
    _int(doc, "h")
    _hex32(doc, "hash")
    return Block(header, bytes.fromhex(payload), doc["origin"])


def block_line(block: Block) -> bytes:
    return canonical_json(block_to_doc(block)) + b"\n"
