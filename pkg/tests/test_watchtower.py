import pytest

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
from circleledger.watchtower import WatchtowerNode, quota

H1, H2, H3 = "11" * 32, "22" * 32, "33" * 32


@pytest.fixture
def wt():
    return WatchtowerNode("w1", (0, 0), circle_id="c", registration_secret="s", seed=3, known_watchtowers={"fw"})


def register(wt, mid, now=0, pos=(1, 1), secret="s"):
    return wt.register_mystic({"mystic_id": mid, "position": list(pos), "secret": secret}, now)


def test_register_returns_roster(wt):
    ack = register(wt, "m1")
    assert ack["members"] == [{"id": "m1", "position": [1, 1]}]
    assert ack["resurrected"] is False
    register(wt, "m2", pos=(2, 2))
    assert sorted(wt.alive) == ["m1", "m2"]


def test_register_bad_secret(wt):
    with pytest.raises(BadCredentials):
        register(wt, "m1", secret="nope")


def test_register_twice(wt):
    register(wt, "m1")
    with pytest.raises(AlreadyRegistered):
        register(wt, "m1")


def test_charm_cycle_moves_silent_mystics_to_abyss(wt):
    register(wt, "m1", now=0)
    register(wt, "m2", now=0)
    wt.alive["m2"].last_charm_ack = 400
    pinged, died = wt.charm_cycle(601)
    assert died == ["m1"]
    assert pinged == ["m2"]
    assert wt.abyss["m1"].died_at == 601


def test_charm_cycle_boundary(wt):
    register(wt, "m1", now=0)
    assert wt.charm_cycle(600)[1] == []
    assert wt.charm_cycle(601)[1] == ["m1"]


def test_abyss_mystic_can_reregister(wt):
    register(wt, "m1", now=0)
    wt.charm_cycle(1000)
    ack = register(wt, "m1", now=1100)
    assert ack["resurrected"] is True
    assert "m1" in wt.alive and "m1" not in wt.abyss


def test_canonical_is_most_recent(wt):
    reports = [HashReport("m1", H1, 600, 1), HashReport("m2", H2, 610, 1), HashReport("m3", H3, 605, 1)]
    assert wt.select_canonical_hash(reports) == (H2, ["m1", "m2", "m3"])
    assert wt.canonical_hash == H2


def test_canonical_tie_breaks_on_smallest_hex(wt):
    reports = [HashReport("m1", H3, 600, 1), HashReport("m2", H1, 600, 1)]
    assert wt.select_canonical_hash(reports)[0] == H1


def test_empty_round(wt):
    with pytest.raises(EmptyRound):
        wt.select_canonical_hash([])


def test_audit_needs_canonical(wt):
    register(wt, "m1")
    with pytest.raises(NoCanonicalHash):
        wt.audit_mystics(1, 0, lambda m: H1)


def test_audit_pass_and_fail(wt):
    for i in range(1, 6):
        register(wt, f"m{i}")
    wt.select_canonical_hash([HashReport("m1", H1, 1, 1)])
    ok = wt.audit_mystics(3, 10, lambda m: H1)
    assert ok.passed and len(ok.sampled) == 3
    bad = wt.audit_mystics(3, 20, lambda m: H2 if m == "m3" else H1)
    assert bad.passed == ("m3" not in bad.sampled)
    assert bad.failures == (["m3"] if "m3" in bad.sampled else [])
    worse = wt.audit_mystics(3, 30, lambda m: H2)
    assert not worse.passed
    assert worse.failures == worse.sampled


def test_audit_samples_min_of_k_and_alive(wt):
    register(wt, "m1")
    register(wt, "m2")
    wt.select_canonical_hash([HashReport("m1", H1, 1, 1)])
    assert sorted(wt.audit_mystics(3, 10, lambda m: H1).sampled) == ["m1", "m2"]


def test_audit_sampling_is_seeded():
    def run():
        wt = WatchtowerNode("w1", (0, 0), circle_id="c", registration_secret="s", seed=11)
        for i in range(10):
            register(wt, f"m{i}")
        wt.select_canonical_hash([HashReport("m1", H1, 1, 1)])
        return [wt.audit_mystics(3, t, lambda m: H1).sampled for t in range(5)]

    assert run() == run()


@pytest.mark.parametrize("n,expected", list(zip(range(1, 11), [0, 0, 0, 0, 0, 1, 1, 2, 2, 3])))
def test_quota_table(n, expected):
    assert quota(n) == expected


def test_token_expiry_edges(wt):
    token = wt.issue_token("fw", 1000)
    assert token.ttl == 900
    assert wt.validate_token(token.token_id, 1899)
    assert not wt.validate_token(token.token_id, 1900)


def test_unknown_requester(wt):
    with pytest.raises(UnknownRequester):
        wt.issue_token("stranger", 0)


def test_renew_revokes_old_and_extends(wt):
    old = wt.issue_token("fw", 0)
    new = wt.renew_token(old, 15, 800)
    assert new.token_id != old.token_id
    assert new.expires_at == 800 + 900
    assert not wt.validate_token(old.token_id, 801)
    assert wt.validate_token(new.token_id, 1699)


def test_renew_errors(wt):
    token = wt.issue_token("fw", 0)
    with pytest.raises(InvalidWindow):
        wt.renew_token(token, 0, 10)
    with pytest.raises(ExpiredToken):
        wt.renew_token(token, 15, 900)
    with pytest.raises(InvalidToken):
        wt.renew_token("00" * 32, 15, 10)


def test_revoke_is_idempotent(wt):
    token = wt.issue_token("fw", 0)
    wt.revoke_token(token.token_id)
    wt.revoke_token(token.token_id)
    assert not wt.validate_token(token.token_id, 1)
    with pytest.raises(NotFound):
        wt.revoke_token("00" * 32)


def test_external_admission_honours_quota(wt):
    for i in range(8):
        register(wt, f"m{i}")
    token = wt.issue_token("fw", 0)
    wt.admit_external_mystic(token, "x1", 1)
    wt.admit_external_mystic(token, "x2", 2)
    with pytest.raises(QuotaExceeded):
        wt.admit_external_mystic(token, "x3", 3)
    assert wt.externals == ["x1", "x2"]


def test_external_admission_needs_valid_token(wt):
    for i in range(8):
        register(wt, f"m{i}")
    token = wt.issue_token("fw", 0)
    with pytest.raises(InvalidToken):
        wt.admit_external_mystic(token, "x1", 900)
