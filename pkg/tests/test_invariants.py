"""Whole-run properties checked over randomized scenarios."""

import math
import random

import pytest

from circleledger.mystic import quorum_threshold
from circleledger.satellite import make_path
from circleledger.scenario import build_simulation, collect_metrics, scenario_from_dict, verify_chain


def random_config(i, faults=True):
    rng = random.Random(i)
    n = rng.randint(3, 7)
    drops = []
    partitions = []
    if faults:
        drops = [
            {"src": rng.choice([f"m{rng.randint(1, n)}", "*"]), "dst": f"m{rng.randint(1, n)}",
             "from": rng.randint(0, 2500), "to": rng.randint(2500, 4000)}
            for _ in range(rng.randint(0, 2))
        ]
        if rng.random() < 0.5:
            start = rng.randint(300, 1500)
            partitions = [{"nodes": [f"m{rng.randint(1, n)}"], "from": start, "to": start + rng.randint(300, 1500)}]
    per_km = rng.choice([0.0, 0.05, 0.3])
    return scenario_from_dict({
        "seed": i,
        "mystic_count": n,
        "difficulty": 2,
        "gossip_fanout": rng.randint(1, 3),
        "per_km_latency_s": per_km,
        "duration_s": 4000,
        "satellite": {
            "path": {"kind": "circle", "center": [0, 0], "radius": 30, "period": 5000},
            "passes": sorted(rng.sample(range(100, 3600, 50), rng.randint(1, 5))),
            # distance latency makes the discovery round trip longer than the default window
            "response_window_s": 60 if per_km else 5,
        },
        "faults": {"drops": drops, "partitions": partitions},
    })


def run_stepwise(config):
    """Run like Simulation.run but checking the membership split after every event."""
    sim = build_simulation(config)
    wt = sim.watchtower
    limit = config.duration_s + config.pending_timeout_s + 2 * config.gossip_min_interval_s
    while sim.network.pending() and sim.network._queue[0][0] < config.duration_s:
        sim.network.step()
        assert not set(wt.alive) & set(wt.abyss)
    sim.network.run_until(config.duration_s)
    while sim.any_pending() and sim.network.now < limit:
        sim.network.run_until(sim.network.now + config.charm_interval_s)
    sim.network.run_until(sim.network.now + 60)
    return sim, collect_metrics(sim)


@pytest.fixture(scope="module", params=range(12))
def faulty_run(request):
    return run_stepwise(random_config(request.param))


@pytest.fixture(scope="module", params=range(100, 106))
def clean_run(request):
    return run_stepwise(random_config(request.param, faults=False))


def deliveries(trace, kind=None):
    return [e for e in trace if e["event"] in ("deliver", "drop") and (kind is None or e["msg"]["kind"] == kind)]


def test_revoked_blocks_never_remain(faulty_run):
    sim, metrics = faulty_run
    revoked = {b["block_hash"] for b in metrics.blocks if b["status"] == "revoked"}
    for m in sim.mystics:
        assert not revoked & {b.hash_hex for b in m.chain.blocks}


def test_each_block_resolves_once(faulty_run):
    _, metrics = faulty_run
    assert metrics.pending_at_end == 0
    assert metrics.verified_blocks + metrics.revoked_blocks == metrics.ingests


def test_sparkling_equals_distinct_foreign_acks(faulty_run):
    sim, _ = faulty_run
    for m in sim.mystics:
        acked = {e["msg"]["body"]["block_hash"] for e in deliveries(sim.network.trace, "gossip_ack") if e["src"] == m.id}
        assert m.sparkling == len(acked)
        assert m.sparkling >= 0


def test_one_data_envelope_per_pass_with_a_fixed_token(faulty_run):
    sim, _ = faulty_run
    submits = deliveries(sim.network.trace, "data_submit")
    assert len(submits) <= len(sim.config.satellite.passes)
    assert len({e["sent"] for e in submits}) == len(submits)
    assert len({e["msg"]["body"]["circle_token"] for e in submits}) <= 1


def test_metrics_conservation(faulty_run):
    sim, metrics = faulty_run
    dropped = sum(1 for e in sim.network.trace if e["event"] == "drop" and e["msg"]["kind"] == "data_submit")
    rejected = sum(metrics.submit_rejections.values())
    assert metrics.data_submits == metrics.verified_blocks + metrics.revoked_blocks + rejected + dropped


def test_causality_and_latency(faulty_run):
    sim, _ = faulty_run
    net = sim.network
    handled = {0} | {e["t"] for e in net.trace if e["event"] in ("deliver", "timer")}
    for e in deliveries(net.trace):
        assert e["sent"] in handled
        a = net.nodes[e["src"]]
        b = net.nodes[e["dst"]]
        pa = make_path(sim.config.satellite.path)(e["sent"]) if a is sim.satellite else a.position
        pb = make_path(sim.config.satellite.path)(e["sent"]) if b is sim.satellite else b.position
        expected = net.base_latency
        if net.per_km_latency:
            expected += math.ceil(math.dist(pa, pb) * net.per_km_latency)
        assert e["deliver"] - e["sent"] == expected


def test_clean_runs_converge(clean_run):
    sim, metrics = clean_run
    if metrics.verified_blocks:
        assert metrics.converged
        assert all(a["passed"] for a in metrics.audits)


def test_verified_blocks_are_widely_held(clean_run):
    sim, metrics = clean_run
    need = quorum_threshold(len(metrics.alive_mystics))
    for b in metrics.blocks:
        if b["status"] == "verified":
            holders = sum(1 for m in sim.mystics if m.chain.index_of(bytes.fromhex(b["block_hash"])) is not None)
            assert holders >= need


def test_verify_chain_on_empty_store(tmp_path):
    p = tmp_path / "empty.jsonl"
    p.write_bytes(b"")
    verdict = verify_chain(p)
    assert verdict.valid and verdict.length == 0
