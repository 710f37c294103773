import pytest

from circleledger.ledger import DEFAULT_SALT, Chain, block_nonce, derive_key, make_genesis, mine_block, seal_payload


@pytest.fixture
def key():
    return derive_key(b"root:x:0:0:root:/root:/bin/sh\n", DEFAULT_SALT)


def grow(chain, n, key, difficulty=0, origin="m1", start=1):
    """Append ``n`` mined blocks with distinct payloads."""
    for i in range(n):
        h = len(chain)
        sealed = seal_payload(key, f"reading {start + i}".encode(), block_nonce(origin, h, 10 * h))
        chain = chain.append(mine_block(chain, sealed, difficulty, 10 * h, origin))
    return chain


@pytest.fixture
def chain(key):
    return grow(Chain((make_genesis(key, 0),)), 8, key)
