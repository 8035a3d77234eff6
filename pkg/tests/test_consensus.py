import random
from fractions import Fraction

from builders import GENESIS_Q, group, make_tc
from gosig.consensus import Params, Phase, Player, Proposal, decide_msg
from gosig.ledger import GENESIS, Block, CertKind
from gosig.messages import PMessage, PRMessage, TCMessage, p_payload
from gosig.sigagg import aggregate, leader_score, sign
from gosig.trace import Tracer

KEYS, PUBS = group(4)


def _prop(height, r_p, score, proposer=0, origin=None):
    b = Block(height, bytes(32), proposer, r_p if origin is None else origin, ())
    pr = PRMessage(b, height, None, None, proposer, None)
    return Proposal(pr, r_p, Fraction(score))


def _players(n=4, tracer=None, keys=KEYS, pubs=PUBS):
    params = Params.for_group(n)
    return [Player(k, pubs, GENESIS_Q, params, tracer) for k in keys[:n]]


def _flood(players, msgs, drop=()):
    """Deliver messages to everyone until nothing new is produced."""
    queue = list(msgs)
    while queue:
        msg = queue.pop(0)
        for p in players:
            if p.index in drop:
                continue
            out = p.on_message(msg)
            if out is not None:
                queue.append(out)


def _round(players, r, drop=()):
    prs = []
    for p in players:
        out = p.on_round_start(r)
        if p.index not in drop:
            prs.extend(out)
    for pr in prs:
        for p in players:
            if p.index not in drop:
                p.on_stage1_message(pr)
    ps = [p.begin_stage2() for p in players if p.index not in drop]
    _flood(players, [m for m in ps if m is not None], drop)
    for p in players:
        p.on_round_end()
    return prs


def test_decide_prefers_larger_proposal_round():
    low, high = _prop(1, 1, "0.01"), _prop(1, 2, "0.5")
    d = decide_msg([low, high], 0, None, 0)
    assert d.vote is high


def test_decide_breaks_score_ties_by_block_hash():
    a, b = _prop(1, 1, "0.1", proposer=0), _prop(1, 1, "0.1", proposer=1)
    d = decide_msg([a, b], 0, None, 0)
    assert d.vote is min((a, b), key=lambda p: p.block.block_hash)


def test_decide_keeps_pending_block_when_fresher_is_absent():
    pending = _prop(1, 3, "0.3")
    other = _prop(1, 3, "0.1", proposer=2)
    d = decide_msg([other, pending], 0, pending.block, 3)
    assert d.vote is pending and d.B_tc is pending.block and d.F == 3


def test_decide_abandons_pending_for_fresher_block():
    pending = _prop(1, 3, "0.3")
    fresh = _prop(1, 4, "0.9", proposer=2)
    d = decide_msg([fresh], 0, pending.block, 3)
    assert d.vote is fresh and d.B_tc is None and d.F == 0


def test_one_round_commits_everywhere():
    tracer = Tracer()
    players = _players(tracer=tracer)
    _round(players, 1)
    heads = {p.chain.head.block_hash for p in players}
    assert len(heads) == 1 and all(p.chain.height == 1 for p in players)
    kinds = [r["kind"] for r in tracer.records]
    assert kinds.count("commit") == 4 and kinds.count("tentative_commit") == 4


def test_ten_rounds_grow_the_chain():
    players = _players()
    for r in range(1, 11):
        _round(players, r)
    assert all(p.chain.height == 10 for p in players)
    assert all(p.chain.validate() for p in players)


def test_player_prepares_only_one_block():
    players = _players()
    prs = [pr for p in players for pr in p.on_round_start(1)]
    p = players[0]
    for pr in prs:
        p.on_stage1_message(pr)
    msg = p.begin_stage2()
    other = next(pr.block_hash for pr in prs if pr.block_hash != msg.block_hash)
    foreign = PMessage(other, 1, 1, sign(KEYS[1], p_payload(other, 1, 1)))
    assert not p.wants(foreign)
    assert p.on_message(foreign) is None
    assert p.state.X_P.signers() == {0}


def test_tc_while_prepared_jumps_to_tced():
    players = _players()
    prs = [pr for p in players for pr in p.on_round_start(1)]
    for p in players:
        for pr in prs:
            p.on_stage1_message(pr)
    votes = [p.begin_stage2() for p in players]
    target = players[3]
    # players 0..2 reach TCed among themselves; player 3 only sees their TC
    _flood(players[:3], votes[:3])
    tc = players[0].outgoing()
    assert isinstance(tc, TCMessage)
    assert target.state.phase is Phase.PED
    out = target.on_message(tc)
    assert target.state.phase in (Phase.TCED, Phase.CED)
    assert out.sig.counters[3] == 1


def test_overflowing_aggregate_is_ignored():
    players = _players()
    prs = [pr for p in players for pr in p.on_round_start(1)]
    for p in players:
        for pr in prs:
            p.on_stage1_message(pr)
    votes = [p.begin_stage2() for p in players]
    victim = players[0]
    v = votes[1]
    pumped = aggregate(v.sig, sign(KEYS[1], v.payload(), (1 << 32) - 2))
    assert victim.on_message(PMessage(v.block_hash, v.height, v.round, pumped)) is None
    assert victim.state.X_P.counters[1] == 0


def test_pending_block_carried_as_case1_certificate():
    players = _players()
    prs = [pr for p in players for pr in p.on_round_start(1)]
    for p in players:
        for pr in prs:
            p.on_stage1_message(pr)
    votes = [p.begin_stage2() for p in players]
    # P messages reach player 0 only, so it alone TCs
    for v in votes[1:]:
        players[0].on_message(v)
    p0 = players[0]
    assert p0.state.phase is Phase.TCED
    p0.on_round_end()
    assert p0.state.B_tc is not None and p0.state.F == 1
    cands = p0.candidates(2, [])
    assert cands[0][1].kind is CertKind.CASE1
    assert cands[0][0] is p0.state.B_tc


def test_block_recovery_from_case2_evidence():
    players = _players()
    _round(players, 1, drop={3})
    late = players[3]
    assert late.chain.height == 0
    leader = players[0]
    proof = leader_score(leader.key, 2, leader.chain.sortition)
    pr = leader.make_pr(leader.fresh_block(2, []), leader.root_certificate(), proof)
    need = late.catchup_need(pr)
    assert need.kind == "block" and need.target_height == 1
    assert late.evidence_valid(need.evidence)
    req = late.request_missing_block(need.evidence, random.Random(0))
    assert req.signer != 3
    block = players[req.signer].serve_block(req.block_hash)
    assert late.on_block_response(block, need.evidence)
    assert late.chain.head.block_hash == leader.chain.head.block_hash


def test_chain_recovery_replays_history():
    players = _players()
    for r in (1, 2, 3):
        _round(players, r, drop={3})
    late = players[3]
    added = late.full_recovery(players[1].serve_chain(1))
    assert added == 3 and late.chain.height == 3
    assert late.chain.validate()


def test_block_response_with_wrong_block_is_refused():
    players = _players()
    _round(players, 1, drop={3})
    ev = players[0].chain.head_cert.tc
    assert not players[3].on_block_response(GENESIS, ev)


def test_forged_tc_without_quorum_proof_is_ignored():
    players = _players()
    prs = [pr for p in players for pr in p.on_round_start(1)]
    for p in players:
        for pr in prs:
            p.on_stage1_message(pr)
    votes = [p.begin_stage2() for p in players]
    bar = players[0].state.B_bar
    weak = make_tc(KEYS, bar, 1, [1], p_signers=[1, 2])
    assert players[0].on_message(weak) is None
    assert players[0].state.phase is Phase.PED
    assert votes[0] is not None
