from gosig.monitor import (CommitLedgerView, TcEventLog, check_liveness, check_lemma_no_tc,
                           check_no_fork, metrics_report, run_monitors, stabilization_round)

HEADER = {"n_players": 4, "f": 1, "T1_ms": 1000.0, "T2_ms": 1000.0, "gst_ms": 0.0,
          "liveness_window": 3, "byzantine": {"3": "silent"}}


def _commit(player, height, block, round_, t=0.0, proposer=0, honest=True, cert_round=None):
    return {"kind": "commit", "player": player, "height": height, "block": block, "round": round_,
            "cert_round": round_ if cert_round is None else cert_round, "t": t,
            "proposer": proposer, "honest": honest, "via": "protocol"}


def _tc(player, height, block, round_, honest=True):
    return {"kind": "tentative_commit", "player": player, "height": height, "block": block,
            "round": round_, "honest": honest}


def _summary(r, winner=0, honest=True, live=True):
    return {"kind": "round_summary", "round": r, "winner": winner, "winner_honest": honest,
            "winner_live": live, "potential_leaders": 1, "stage1_ms": 100.0, "stage2_ms": 200.0}


def test_no_fork_passes_on_agreement():
    recs = [_commit(p, 1, "aa", 1) for p in range(3)]
    assert check_no_fork(CommitLedgerView.from_records(recs)).ok


def test_no_fork_flags_forged_fork():
    recs = [_commit(0, 1, "aa", 1), _commit(1, 1, "aa", 1), _commit(2, 1, "bb", 2)]
    v = check_no_fork(CommitLedgerView.from_records(recs))
    assert v.safety_violation
    assert v.details == [{"height": 1, "players": [0, 2], "blocks": ["aa", "bb"],
                          "offsets": [0, 2]}]


def test_no_fork_ignores_byzantine_claims():
    recs = [_commit(0, 1, "aa", 1), _commit(3, 1, "zz", 1, honest=False)]
    assert check_no_fork(CommitLedgerView.from_records(recs)).ok


def test_lemma_flags_late_sibling_tc():
    recs = [_commit(0, 1, "aa", 2), _tc(1, 1, "bb", 3)]
    v = check_lemma_no_tc(CommitLedgerView.from_records(recs), TcEventLog.from_records(recs))
    assert v.safety_violation
    assert v.details[0]["block"] == "bb" and v.details[0]["committed"]["round"] == 2


def test_lemma_allows_same_block_and_earlier_rounds():
    recs = [_tc(1, 1, "bb", 1), _commit(0, 1, "aa", 2), _tc(2, 1, "aa", 3), _tc(2, 2, "cc", 3)]
    v = check_lemma_no_tc(CommitLedgerView.from_records(recs), TcEventLog.from_records(recs))
    assert v.ok


def test_lemma_covers_lower_heights():
    # a commit at height 2 in round 2 rules out any other TC at height 1 afterwards
    recs = [_commit(0, 1, "aa", 1), _commit(0, 2, "cc", 2), _tc(1, 1, "bb", 3)]
    v = check_lemma_no_tc(CommitLedgerView.from_records(recs), TcEventLog.from_records(recs))
    assert v.safety_violation


def test_stabilization_round():
    assert stabilization_round(HEADER) == 1
    assert stabilization_round({**HEADER, "gst_ms": 8000.0}) == 5
    assert stabilization_round({**HEADER, "gst_ms": 8001.0}) == 6


def test_liveness_ok():
    recs = [_commit(p, 1, "aa", 2, t=2500.0) for p in range(3)]
    v = check_liveness(CommitLedgerView.from_records(recs), HEADER, [_summary(1), _summary(2)])
    assert v.ok


def test_liveness_rejects_byzantine_proposed_blocks():
    recs = [_commit(p, 1, "aa", 1, proposer=3) for p in range(3)]
    rounds = [_summary(r) for r in (1, 2, 3)]
    v = check_liveness(CommitLedgerView.from_records(recs), HEADER, rounds)
    assert v.status == "stall" and v.details[0]["waiting"] == [0, 1, 2]


def test_liveness_partition_is_a_stall():
    recs = [_commit(0, 1, "aa", 1), _commit(1, 1, "aa", 1)]
    rounds = [_summary(r) for r in (1, 2, 3)]
    v = check_liveness(CommitLedgerView.from_records(recs), HEADER, rounds)
    assert v.status == "stall" and v.details[0]["waiting"] == [2]


def test_liveness_without_fair_round_is_inconclusive():
    rounds = [_summary(r, winner=3, honest=False) for r in (1, 2, 3)]
    v = check_liveness(CommitLedgerView(), HEADER, rounds)
    assert v.status == "inconclusive"


def test_liveness_with_unfinished_window_is_inconclusive():
    v = check_liveness(CommitLedgerView(), HEADER, [_summary(1)])
    assert v.status == "inconclusive"


def test_metrics_when_all_crashed():
    m = metrics_report(HEADER, [_summary(1) | {"stage1_ms": None, "stage2_ms": None}])
    assert m["stage1_mean_ms"] is None and m["stage2_mean_ms"] is None
    assert m["committed_height"] == 0


def test_run_monitors_and_verdict_records():
    recs = [_commit(p, 1, "aa", 1, t=1500.0) for p in range(3)] + [_summary(1)]
    verdicts = run_monitors(HEADER, recs)
    assert [v.monitor for v in verdicts] == ["no_fork", "lemma_no_tc", "liveness"]
    assert all(v.ok for v in verdicts)
    rec = verdicts[0].to_record()
    assert rec["schema"] == "gosig.verdict/1" and rec["status"] == "ok"
