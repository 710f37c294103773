import math
from fractions import Fraction

import pytest

from circleledger.errors import Busy, StaleAck, TokenMismatch, UnknownSender
from circleledger.ledger import block_to_doc, make_genesis, mine_block
from circleledger.mystic import GossipAck, GossipReject, MysticConfig, MysticNode, QuorumState, quorum_threshold

TOKEN = "cd" * 32
PAYLOAD = {"readings": {"altitude_m": 1.0}, "sequence": 1, "sampled_at": 600}
POSITIONS = {"m1": (0, 0), "m2": (1, 0), "m3": (2, 0), "m4": (3, 0), "m5": (4, 0)}


@pytest.fixture
def circle(key):
    genesis = make_genesis(key, 0)
    nodes = {}
    for mid, pos in POSITIONS.items():
        node = MysticNode(
            mid, pos,
            circle_id="c", circle_token=TOKEN, key=key, genesis=genesis,
            watchtowers={"w1": (5, 5)}, registration_secret="s",
            config=MysticConfig(difficulty=4),
        )
        node.registered = True
        node._set_members([{"id": m, "position": list(p)} for m, p in POSITIONS.items()])
        nodes[mid] = node
    return nodes


def sent(node, kind):
    return [(dst, msg) for dst, msg in (i for i in node.outbox if isinstance(i, tuple)) if msg.kind == kind]


def test_threshold_against_brute_force():
    for n in range(1, 21):
        smallest = next(k for k in range(0, n + 1) if Fraction(k) >= Fraction(4, 5) * n)
        assert quorum_threshold(n) == max(1, smallest)
    assert quorum_threshold(3) == 3
    assert quorum_threshold(5) == 4


def test_discovery_only_when_registered(circle):
    m = circle["m1"]
    assert m.handle_discovery({"satellite_id": "s", "sent_at": 0}) == {
        "mystic_id": "m1", "position": [0.0, 0.0], "circle_id": "c",
    }
    m.registered = False
    assert m.handle_discovery({"satellite_id": "s", "sent_at": 0}) is None


def test_ingest_reports_hash(circle):
    m = circle["m1"]
    block, report = m.ingest_payload(PAYLOAD, TOKEN, 600)
    assert report.block_hash == block.hash_hex
    assert report.height == 1
    assert m.pending.block == block
    assert len(m.chain) == 1
    [(dst, msg)] = sent(m, "hash_report")
    assert dst == "w1"
    assert msg.body == report.to_body()


def test_ingest_rejects_wrong_token(circle):
    with pytest.raises(TokenMismatch):
        circle["m1"].ingest_payload(PAYLOAD, "ef" * 32, 600)


def test_ingest_busy_while_pending(circle):
    circle["m1"].ingest_payload(PAYLOAD, TOKEN, 600)
    with pytest.raises(Busy):
        circle["m1"].ingest_payload(PAYLOAD, TOKEN, 601)


def test_gossip_goes_to_two_nearest(circle):
    m = circle["m1"]
    m.ingest_payload(PAYLOAD, TOKEN, 600)
    assert [p for p, _ in m.gossip_round(600)] == ["m2", "m3"]


def test_gossip_skips_acked_peers(circle):
    m = circle["m1"]
    block, _ = m.ingest_payload(PAYLOAD, TOKEN, 600)
    m.tally_quorum(GossipAck(block.hash_hex, "m2"), now=600)
    assert [p for p, _ in m.gossip_round(600)] == ["m3", "m4"]


def test_gossip_throttle(circle):
    m = circle["m1"]
    m.ingest_payload(PAYLOAD, TOKEN, 600)
    m.gossip_round(600)
    assert m.gossip_round(601) == []
    assert m.gossip_round(1499) == []
    assert [p for p, _ in m.gossip_round(1500)] == ["m2", "m3"]


def test_handle_gossip_appends_and_pays(circle):
    block, _ = circle["m1"].ingest_payload(PAYLOAD, TOKEN, 600)
    peer = circle["m2"]
    ack = peer.handle_gossip(block, block.hash_hex, "m1", 601)
    assert ack == GossipAck(block.hash_hex, "m2")
    assert peer.chain.tip == block.hash
    assert peer.sparkling == 1
    # duplicate delivery is acked again but paid once
    assert peer.handle_gossip(block, block.hash_hex, "m1", 602) == ack
    assert peer.sparkling == 1


def test_handle_gossip_unknown_sender(circle):
    block, _ = circle["m1"].ingest_payload(PAYLOAD, TOKEN, 600)
    with pytest.raises(UnknownSender):
        circle["m2"].handle_gossip(block, block.hash_hex, "stranger", 601)


def test_handle_gossip_hash_mismatch(circle):
    block, _ = circle["m1"].ingest_payload(PAYLOAD, TOKEN, 600)
    result = circle["m2"].handle_gossip(block, "00" * 32, "m1", 601)
    assert isinstance(result, GossipReject)
    assert result.reason == "HashMismatch"
    assert circle["m2"].sparkling == 0


def test_handle_gossip_foreign_key(circle, key):
    from circleledger.ledger import DEFAULT_SALT, derive_key, seal_payload

    m1 = circle["m1"]
    other = derive_key(b"another circle", DEFAULT_SALT)
    block = mine_block(m1.chain, seal_payload(other, b"{}", bytes(12)), 4, 600, "m1")
    result = circle["m2"].handle_gossip(block, block.hash_hex, "m1", 601)
    assert result.reason == "AuthFailure"


def test_handle_gossip_lagging(circle):
    m1 = circle["m1"]
    b1 = mine_block(m1.chain, b"x" * 30, 0, 10, "m1")
    m1._append(b1)
    b2 = mine_block(m1.chain, b"y" * 30, 0, 20, "m1")
    assert circle["m2"].handle_gossip(b2, b2.hash_hex, "m1", 21).reason == "Lagging"


def test_quorum_reaches_verified(circle):
    m = circle["m1"]
    block, _ = m.ingest_payload(PAYLOAD, TOKEN, 600)
    # 5 alive, threshold 4: origin plus three peers
    assert m.tally_quorum(GossipAck(block.hash_hex, "m2"), now=601) is QuorumState.PENDING
    assert m.tally_quorum(GossipAck(block.hash_hex, "m3"), now=601) is QuorumState.PENDING
    assert m.tally_quorum(GossipAck(block.hash_hex, "m4"), now=602) is QuorumState.VERIFIED
    assert m.chain.tip == block.hash
    assert m.pending is None
    assert len(sent(m, "verified_notice")) == 5


def test_acks_from_strangers_do_not_count(circle):
    m = circle["m1"]
    block, _ = m.ingest_payload(PAYLOAD, TOKEN, 600)
    for who in ("x1", "x2", "x3"):
        assert m.tally_quorum(GossipAck(block.hash_hex, who), now=601) is QuorumState.PENDING


def test_reject_revokes_and_leaves_chain_untouched(circle):
    m = circle["m1"]
    before = m.chain.serialize()
    block, _ = m.ingest_payload(PAYLOAD, TOKEN, 600)
    m.tally_quorum(GossipAck(block.hash_hex, "m2"), now=601)
    state = m.tally_quorum(GossipReject(block.hash_hex, "m3", "PowFailure"), now=602)
    assert state is QuorumState.REVOKED
    assert m.chain.serialize() == before
    assert m.pending is None
    assert sent(m, "revoke_notice")


def test_stale_ack(circle):
    with pytest.raises(StaleAck):
        circle["m1"].tally_quorum(GossipAck("00" * 32, "m2"), now=1)


def test_peer_rolls_back_on_revoke_notice(circle):
    from circleledger.wire import WireMessage

    block, _ = circle["m1"].ingest_payload(PAYLOAD, TOKEN, 600)
    peer = circle["m2"]
    before = peer.chain.serialize()
    peer.handle_gossip(block, block.hash_hex, "m1", 601)
    notice = WireMessage("revoke_notice", {"block_hash": block.hash_hex, "height": 1, "reason": "PowFailure"})
    peer.on_revoke_notice(notice, "m1", 603)
    assert peer.chain.serialize() == before


def test_audit_during_pending_sees_previous_tip(circle):
    m = circle["m1"]
    tip = m.tip_hex
    m.ingest_payload(PAYLOAD, TOKEN, 600)
    kind, body = m.respond_control("audit_request", {"audit_id": 4}, 601)
    assert kind == "audit_reply"
    assert body == {"audit_id": 4, "mystic_id": "m1", "tip": tip}


def test_pending_timeout_revokes(circle):
    m = circle["m1"]
    block, _ = m.ingest_payload(PAYLOAD, TOKEN, 600)
    m.on_timer(f"gossip:{block.hash_hex}", 600 + m.config.pending_timeout)
    assert m.pending is None
    assert m.events[-1]["event"] == "revoked"
    assert m.events[-1]["reason"] == "Timeout"


def test_sync_blocks_recovers_a_lagging_peer(circle, key):
    from circleledger.ledger import seal_payload
    from circleledger.wire import WireMessage

    m1, m2 = circle["m1"], circle["m2"]
    for t in (10, 20, 30):
        m1._append(mine_block(m1.chain, seal_payload(key, bytes([t]), bytes(12)), 0, t, "m1"))
    m2.on_sync_blocks(WireMessage("sync_blocks", {"blocks": [block_to_doc(b) for b in m1.chain.blocks[1:]]}), "m1", 40)
    assert m2.chain.serialize() == m1.chain.serialize()
    assert m2.events[-1]["event"] == "synced"


def test_busy_while_holding_an_unsettled_block(circle):
    from circleledger.wire import WireMessage

    block, _ = circle["m1"].ingest_payload(PAYLOAD, TOKEN, 600)
    peer = circle["m2"]
    peer.handle_gossip(block, block.hash_hex, "m1", 601)
    with pytest.raises(Busy):
        peer.ingest_payload(PAYLOAD, TOKEN, 602)
    peer.on_verified_notice(
        WireMessage("verified_notice", {"block_hash": block.hash_hex, "block": block_to_doc(block), "acks": 4}),
        "m1", 603,
    )
    peer.ingest_payload(PAYLOAD, TOKEN, 604)


def test_unsettled_block_expires(circle):
    block, _ = circle["m1"].ingest_payload(PAYLOAD, TOKEN, 600)
    peer = circle["m2"]
    peer.handle_gossip(block, block.hash_hex, "m1", 601)
    peer.ingest_payload(PAYLOAD, TOKEN, 601 + peer.config.pending_timeout + 1)


def test_sync_never_carries_unsettled_blocks(circle):
    block, _ = circle["m1"].ingest_payload(PAYLOAD, TOKEN, 600)
    peer = circle["m2"]
    peer.handle_gossip(block, block.hash_hex, "m1", 601)
    assert peer.settled_blocks() == []
