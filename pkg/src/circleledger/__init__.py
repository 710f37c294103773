"""Ground-station ledger for suborbital telemetry.

A circle of Mystic nodes stores satellite payloads in a proof-of-work
chain; a Watchtower admits members, audits replicas and issues
inter-circle tokens. Everything runs on a deterministic simulated network.
"""

from circleledger.ledger import (
    Block,
    BlockHeader,
    Chain,
    DerivedKey,
    Failure,
    ancestor_merkle_root,
    compute_block_hash,
    derive_key,
    mine_block,
    open_payload,
    seal_payload,
    verify_block,
)
from circleledger.scenario import load_scenario, run_scenario, verify_chain

__version__ = "0.1.0"

__all__ = [
    "Block",
    "BlockHeader",
    "Chain",
    "DerivedKey",
    "Failure",
    "ancestor_merkle_root",
    "compute_block_hash",
    "derive_key",
    "load_scenario",
    "mine_block",
    "open_payload",
    "run_scenario",
    "seal_payload",
    "verify_block",
    "verify_chain",
]
