"""Acceptance suite: one test per criterion, each printing a PASS/FAIL line."""
import json
import math
import random
import time
from fractions import Fraction

import numpy as np
import pytest
from hypothesis import HealthCheck, given, settings, strategies as st

from campaign import fuzz_config, liveness_config, liveness_reached
from gosig.cli import main as cli_main, sortition_stats
from gosig.consensus import Proposal, decide_msg
from gosig.ledger import Block
from gosig.messages import PRMessage
from gosig.monitor import run_monitors
from gosig.sigagg import (aggregate, encoded_size_for, guard_overflow, identity, keygen_group,
                          message_digest, naive_size_for, sign, signer_count, verify)
from gosig.simnet import NetModel, ScenarioConfig, run_broadcast_rounds, run_scenario
from gosig.trace import encode_trace


@pytest.fixture
def report(capsys):
    def _report(number, name, ok, detail):
        with capsys.disabled():
            print(f"\n[criterion {number:>2}] {'PASS' if ok else 'FAIL'} {name}: {detail}")
        assert ok, detail
    return _report


# 1 -------------------------------------------------------------------------

def test_c01_safety_fuzz(report):
    t0 = time.time()
    violations = []
    sizes = {}
    for seed in range(1000):
        cfg = fuzz_config(seed)
        sizes[cfg.n_players] = sizes.get(cfg.n_players, 0) + 1
        res = run_scenario(cfg)
        for v in run_monitors(res.header, res.records, ("no_fork", "lemma_no_tc")):
            if not v.ok:
                violations.append((seed, v.monitor, v.details[:1]))
    elapsed = time.time() - t0
    ok = not violations and elapsed < 30 * 60 and set(sizes) == {4, 7, 13, 31, 100}
    report(1, "safety fuzz", ok,
           f"1000 scenarios {dict(sorted(sizes.items()))}, {len(violations)} violations, "
           f"{elapsed:.0f} s")


# 2 -------------------------------------------------------------------------

def test_c02_liveness_partial_synchrony(report):
    rates = {}
    failed = {}
    for n in (4, 31, 100):
        bad = []
        for seed in range(200):
            res = run_scenario(liveness_config(n, seed), stop=liveness_reached)
            live = run_monitors(res.header, res.records, ("liveness",))[0]
            if not live.ok:
                bad.append((seed, live.status))
        rates[n] = 1 - len(bad) / 200
        failed[n] = bad[:5]
    ok = all(r >= 0.99 for r in rates.values())
    report(2, "liveness after stabilization", ok,
           "success " + ", ".join(f"N={n}: {r:.1%}" for n, r in rates.items())
           + (f"; failures {failed}" if not ok else ""))


# 3 -------------------------------------------------------------------------

def test_c03_sortition_no_leader_rate(report):
    row = sortition_stats(100, 100_000)
    expected = (1 - 7 / 100) ** 100
    assert row["expected_fraction"] == pytest.approx(expected)
    sigma = math.sqrt(expected * (1 - expected) / 100_000)
    frac = row["no_leader_fraction"]
    ok = abs(frac - expected) <= 3 * sigma and frac < 0.001
    report(3, "sortition no-leader rate", ok,
           f"{frac:.5f} vs {expected:.5f} (3 sigma = {3 * sigma:.5f}), bound 0.001")


# 4 -------------------------------------------------------------------------

def test_c04_multisignature_size(report):
    agg = encoded_size_for(1000, 2048, 32)
    naive = naive_size_for(1000, 2048)
    report(4, "multi-signature size", agg == 4256 and naive == 256_000,
           f"aggregated {agg} B, naive {naive} B")


# 5 -------------------------------------------------------------------------

N5 = 8
KEYS5 = keygen_group(5, N5)
PUBS5 = [k.public for k in KEYS5]
MSG5 = b"algebra"
PROPERTY_CASES = 2000
_settings5 = settings(max_examples=PROPERTY_CASES, deadline=None, database=None,
                      suppress_health_check=list(HealthCheck))
_sig = st.lists(st.integers(0, N5 - 1), min_size=1, max_size=6).map(
    lambda ids: _agg(ids))
_counts = {"n": 0}


def _agg(ids):
    out = identity(N5, message_digest(MSG5))
    for i in ids:
        out = aggregate(out, sign(KEYS5[i], MSG5))
    return out


@_settings5
@given(_sig, _sig)
def _prop_commutative(a, b):
    _counts["n"] += 1
    assert aggregate(a, b) == aggregate(b, a)


@_settings5
@given(_sig, _sig, _sig)
def _prop_associative(a, b, c):
    _counts["n"] += 1
    assert aggregate(aggregate(a, b), c) == aggregate(a, aggregate(b, c))


@_settings5
@given(_sig)
def _prop_identity(a):
    _counts["n"] += 1
    e = identity(N5, a.message_digest)
    assert aggregate(a, e) == a == aggregate(e, a)
    assert verify(a, MSG5, PUBS5)


@_settings5
@given(_sig, st.integers(0, N5 - 1), st.integers(1, 5), st.booleans())
def _prop_tamper(a, who, delta, on_tag):
    _counts["n"] += 1
    if on_tag:
        forged = type(a)((a.tag + delta) % (2 ** 255 - 19), a.counters, a.message_digest)
    else:
        counters = list(a.counters)
        counters[who] += delta
        forged = type(a)(a.tag, tuple(counters), a.message_digest)
    assert not verify(forged, MSG5, PUBS5)
    assert not verify(a, MSG5 + b"!", PUBS5)


@_settings5
@given(_sig, _sig)
def _prop_monotone(a, b):
    _counts["n"] += 1
    c = aggregate(a, b)
    assert signer_count(c) >= max(signer_count(a), signer_count(b))
    assert signer_count(c) == len(a.signers() | b.signers())


def test_c05_aggregation_algebra(report):
    _counts["n"] = 0
    failures = []
    for prop in (_prop_commutative, _prop_associative, _prop_identity, _prop_tamper,
                 _prop_monotone):
        try:
            prop()
        except Exception as exc:  # report, then fail below
            failures.append(f"{prop.__name__}: {exc!r}"[:200])
    ok = not failures and _counts["n"] >= 10_000
    report(5, "aggregation algebra", ok,
           f"{_counts['n']} cases over 5 properties, {len(failures)} failing" +
           (f": {failures}" if failures else ""))


# 6 -------------------------------------------------------------------------

def test_c06_overflow_guard(report):
    rng = random.Random(6)
    attacks = rejected = 0
    honest_runs = honest_rejections = 0
    for _ in range(1000):
        n = rng.randint(4, 60)
        bits = rng.choice([8, 16, 32])
        keys = keygen_group(rng.randrange(1 << 30), n)
        msg = rng.randbytes(8)
        # honest: disjoint partial aggregates merged in random order
        order = list(range(n))
        rng.shuffle(order)
        parts = []
        while order:
            k = rng.randint(1, min(5, len(order)))
            chunk, order = order[:k], order[k:]
            part = sign(keys[chunk[0]], msg)
            for i in chunk[1:]:
                part = guard_overflow(part, sign(keys[i], msg), bits, n)
                assert part is not None
            parts.append(part)
        honest_runs += 1
        local = parts[0]
        for p in parts[1:]:
            merged = guard_overflow(local, p, bits, n)
            if merged is None:
                honest_rejections += 1
                break
            local = merged
        # attack: a pumped counter against an honest aggregate of 1..N-1 signers
        attacker = rng.randrange(n)
        others = [i for i in range(n) if i != attacker]
        signed = rng.sample(others, rng.randint(0, n - 2))
        base = sign(keys[attacker], msg, 0)
        for i in signed:
            base = aggregate(base, sign(keys[i], msg), bits)
        pumped = sign(keys[attacker], msg, (1 << bits) - 1)
        attacks += 1
        if guard_overflow(base, pumped, bits, n) is None:
            rejected += 1
    # the documented example: s = 1, N = 100, B = 32
    k100 = keygen_group(1, 100)
    example = guard_overflow(identity(100, message_digest(b"m")),
                             sign(k100[0], b"m", (1 << 32) - 1), 32, 100)
    ok = rejected == attacks and honest_rejections == 0 and example is None
    report(6, "overflow guard", ok,
           f"attacks rejected {rejected}/{attacks}, honest merges rejected "
           f"{honest_rejections}/{honest_runs}")


# 7 -------------------------------------------------------------------------

def test_c07_gossip_completeness(report):
    cfg = ScenarioConfig(n_players=1000, seed=7, net={"latency_mean_ms": 300.0, "loss_rate": 0.01})
    stats = run_broadcast_rounds(NetModel(cfg), np.random.default_rng(7), 1000, 200, fanout=8)
    rate = float(stats.complete.mean())
    mean_ms = float(np.nanmean(stats.completion_ms))
    ok = rate >= 0.99 and mean_ms <= 5000
    report(7, "Stage I gossip completeness", ok,
           f"complete in {rate:.1%} of 200 rounds, mean completion {mean_ms / 1000:.2f} s")


# 8 -------------------------------------------------------------------------

def _stage2_ms(n, seed, crashed=0):
    cfg = ScenarioConfig(n_players=n, seed=seed, rounds=1,
                         round={"T1_ms": 5000.0, "T2_ms": 30000.0},
                         byzantine={"count": crashed, "behavior": "silent"},
                         crypto={"verify": False})
    return run_scenario(cfg).rounds[0]["stage2_ms"]


def test_c08_stage2_scaling(report):
    sizes = (10, 50, 100, 250, 500, 1000, 2000)
    times = {}
    for n in sizes:
        seeds = (1, 2) if n <= 1000 else (1,)
        vals = [_stage2_ms(n, s) for s in seeds]
        assert all(v is not None for v in vals), f"Stage II did not complete at N={n}"
        times[n] = sum(vals) / len(vals)
    slope = float(np.polyfit(np.log(sizes), np.log([times[n] for n in sizes]), 1)[0])
    growth = times[2000] / times[10]
    crash = [_stage2_ms(1000, s, 333) for s in (1, 2, 3)]
    free = [_stage2_ms(1000, s) for s in (1, 2, 3)]
    assert all(v is not None for v in crash)
    slowdown = sum(crash) / sum(free)
    ok = 0 < slope < 1 and 1 < growth < 2000 / 10 and 1 < slowdown < 1.5
    report(8, "Stage II scaling", ok,
           "times " + ", ".join(f"{n}:{times[n] / 1000:.2f}s" for n in sizes)
           + f"; log-log slope {slope:.2f}; 1/3 crashed at N=1000 slows by {slowdown - 1:.0%}")


# 9 -------------------------------------------------------------------------

def test_c09_determinism_and_replay(report, tmp_path, capsys):
    identical = 0
    for seed in range(10):
        cfg = fuzz_config(10_000 + seed)
        if run_scenario(cfg).trace_bytes == run_scenario(cfg).trace_bytes:
            identical += 1
    agree = 0
    for seed in range(100):
        res = run_scenario(fuzz_config(20_000 + seed))
        online = [v.to_record() for v in run_monitors(res.header, res.records)]
        path = tmp_path / f"trace-{seed}.jsonl"
        path.write_bytes(encode_trace(res.records, res.header))
        capsys.readouterr()
        cli_main(["check", str(path)])
        replay = [json.loads(line) for line in capsys.readouterr().out.splitlines()]
        if replay == json.loads(json.dumps(online)):
            agree += 1
    ok = identical == 10 and agree == 100
    report(9, "determinism and replay", ok,
           f"{identical}/10 reruns byte-identical, {agree}/100 replays match online verdicts")


# 10 ------------------------------------------------------------------------

H_ROOT = 2
F_PENDING = 5


def _p(label, height, r_p, score):
    # the proposal round lives in the certificate, so X is the same block at any r_p
    b = Block(height, bytes(32), {"X": 0, "Y": 1, "Z": 2}[label], 1, (label.encode(),))
    return label, Proposal(PRMessage(b, height, None, None, b.proposer, None), r_p,
                           Fraction(score))


# Hand-derived from the decision procedure's branches.  Columns: pending block
# X set?, fresh block Y's proposal round relative to F = 5, X re-proposed (at
# r_p = 5, scoring worse than Y)?, Y at height h_root + 1?  -> expected vote,
# pending block and F after the call.  With no pending block F is 0 and the
# round axis compares Y against the same reference round 5.
GOLDEN = [
    # X set
    ((True, "<", False, True), (None, "X", 5)),
    ((True, "<", False, False), (None, "X", 5)),
    ((True, "<", True, True), ("X", "X", 5)),
    ((True, "<", True, False), ("X", "X", 5)),
    ((True, "=", False, True), (None, "X", 5)),
    ((True, "=", False, False), (None, "X", 5)),
    ((True, "=", True, True), ("X", "X", 5)),
    ((True, "=", True, False), (None, "X", 5)),
    ((True, ">", False, True), ("Y", None, 0)),
    ((True, ">", False, False), (None, "X", 5)),
    ((True, ">", True, True), ("Y", None, 0)),
    ((True, ">", True, False), (None, "X", 5)),
    # X not set
    ((False, "<", False, True), ("Y", None, 0)),
    ((False, "<", False, False), (None, None, 0)),
    ((False, "<", True, True), ("X", None, 0)),
    ((False, "<", True, False), ("X", None, 0)),
    ((False, "=", False, True), ("Y", None, 0)),
    ((False, "=", False, False), (None, None, 0)),
    ((False, "=", True, True), ("Y", None, 0)),
    ((False, "=", True, False), (None, None, 0)),
    ((False, ">", False, True), ("Y", None, 0)),
    ((False, ">", False, False), (None, None, 0)),
    ((False, ">", True, True), ("Y", None, 0)),
    ((False, ">", True, False), (None, None, 0)),
]

# Edge rows outside the grid: (S, pending set?, expected).
EDGES = [
    ([], True, (None, "X", 5)),
    ([], False, (None, None, 0)),
    ([("X", 3, 4, "0.5")], True, (None, "X", 5)),   # stale re-proposal, r_p < F
    ([("X", 3, 6, "0.5")], True, ("X", None, 0)),   # fresher re-proposal wins outright
    ([("Y", 3, 5, "0.2"), ("X", 3, 5, "0.5"), ("X", 3, 7, "0.6"), ("Z", 3, 7, "0.1")],
     True, ("Z", None, 0)),
]


def _run_case(props, pending):
    labels = {id(p): lab for lab, p in props}
    x_block = _p("X", H_ROOT + 1, F_PENDING, "0.5")[1].block
    d = decide_msg([p for _, p in props], H_ROOT, x_block if pending else None,
                   F_PENDING if pending else 0)
    vote = labels[id(d.vote)] if d.vote is not None else None
    b_tc = None if d.B_tc is None else ("X" if d.B_tc.block_hash == x_block.block_hash else "?")
    return vote, b_tc, d.F


def test_c10_decision_golden_table(report):
    assert len(GOLDEN) == 24 and len({row for row, _ in GOLDEN}) == 24
    agree = 0
    misses = []
    for (pending, cmp, reproposed, height_ok), expected in GOLDEN:
        r_y = {"<": 4, "=": 5, ">": 6}[cmp]
        props = [_p("Y", H_ROOT + 1 if height_ok else H_ROOT + 2, r_y, "0.1")]
        if reproposed:
            props.append(_p("X", H_ROOT + 1, F_PENDING, "0.5"))
        got = _run_case(props, pending)
        if got == expected:
            agree += 1
        else:
            misses.append(((pending, cmp, reproposed, height_ok), got, expected))
    for row, pending, expected in EDGES:
        props = [_p(lab, h, r, s) for lab, h, r, s in row]
        got = _run_case(props, pending)
        if got == expected:
            agree += 1
        else:
            misses.append((row, got, expected))
    total = len(GOLDEN) + len(EDGES)
    report(10, "decision golden table", agree == total,
           f"{agree}/{total} cases agree" + (f"; mismatches {misses}" if misses else ""))
