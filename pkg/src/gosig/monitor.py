"""Trace monitors for safety and liveness, and run metrics.

Monitors read trace records only; they never touch simulator state, so a
stored trace gives the same verdicts as the live run that produced it.
Only honest players' records count toward safety verdicts; Byzantine
claims are kept for reference.
"""
from __future__ import annotations

import math
from dataclasses import dataclass, field
from typing import Any, Iterable, Optional, Sequence

VERDICT_SCHEMA = "gosig.verdict/1"


@dataclass(frozen=True)
class CommitEntry:
    block: str
    height: int
    round: int       # round whose TC certified the block
    seen_round: int  # round in which the player committed it
    t: float
    proposer: int
    via: str
    offset: int      # index of the record in the trace


@dataclass
class CommitLedgerView:
    """Per-player height -> commit entry, built incrementally from trace records."""

    honest: dict[int, dict[int, CommitEntry]] = field(default_factory=dict)
    byzantine: dict[int, dict[int, CommitEntry]] = field(default_factory=dict)

    def feed(self, rec: dict[str, Any], offset: int):
        if rec.get("kind") != "commit":
            return
        entry = CommitEntry(rec["block"], rec["height"], rec.get("cert_round", rec.get("round", 0)),
                            rec.get("round", 0), rec.get("t", 0.0), rec.get("proposer", -1),
                            rec.get("via", "protocol"), offset)
        book = self.honest if rec.get("honest", True) else self.byzantine
        # append-only: the first entry per (player, height) stands
        book.setdefault(rec["player"], {}).setdefault(entry.height, entry)

    @classmethod
    def from_records(cls, records: Iterable[dict[str, Any]]) -> "CommitLedgerView":
        v = cls()
        for k, rec in enumerate(records):
            v.feed(rec, k)
        return v

    def canonical(self) -> dict[int, CommitEntry]:
        """Earliest-certified honest commit per height."""
        out: dict[int, CommitEntry] = {}
        for chain in self.honest.values():
            for h, e in chain.items():
                cur = out.get(h)
                if cur is None or (e.round, e.offset) < (cur.round, cur.offset):
                    out[h] = e
        return out


@dataclass(frozen=True)
class TcEvent:
    player: int
    round: int
    height: int
    block: str
    offset: int


@dataclass
class TcEventLog:
    events: list[TcEvent] = field(default_factory=list)

    def feed(self, rec: dict[str, Any], offset: int):
        if rec.get("kind") == "tentative_commit" and rec.get("honest", True):
            self.events.append(TcEvent(rec["player"], rec["round"], rec["height"], rec["block"], offset))

    @classmethod
    def from_records(cls, records: Iterable[dict[str, Any]]) -> "TcEventLog":
        log = cls()
        for k, rec in enumerate(records):
            log.feed(rec, k)
        return log


@dataclass
class Verdict:
    monitor: str
    status: str  # ok | violation | stall | inconclusive
    details: list[dict[str, Any]] = field(default_factory=list)

    @property
    def ok(self) -> bool:
        return self.status == "ok"

    @property
    def safety_violation(self) -> bool:
        return self.status == "violation"

    def to_record(self) -> dict[str, Any]:
        return {"kind": "verdict", "schema": VERDICT_SCHEMA, "monitor": self.monitor,
                "status": self.status, "details": self.details}


def check_no_fork(view: CommitLedgerView) -> Verdict:
    by_height: dict[int, list[tuple[int, CommitEntry]]] = {}
    for player in sorted(view.honest):
        for h, e in view.honest[player].items():
            by_height.setdefault(h, []).append((player, e))
    details = []
    for h in sorted(by_height):
        entries = by_height[h]
        first_player, first = min(entries, key=lambda pe: pe[1].offset)
        for player, e in entries:
            if e.block != first.block:
                details.append({"height": h, "players": [first_player, player],
                                "blocks": [first.block, e.block],
                                "offsets": [first.offset, e.offset]})
    return Verdict("no_fork", "violation" if details else "ok", details)


def check_lemma_no_tc(view: CommitLedgerView, log: TcEventLog) -> Verdict:
    """After an honest commit of B at height h in round r, no honest player TCs
    a block other than the committed one at any height h' <= h in a later round."""
    canon = view.canonical()
    if not canon:
        return Verdict("lemma_no_tc", "ok")
    # earliest commit round covering each height, from the top down
    cover: dict[int, CommitEntry] = {}
    best: Optional[CommitEntry] = None
    for h in sorted(canon, reverse=True):
        e = canon[h]
        if best is None or e.round < best.round:
            best = e
        cover[h] = best
    top = max(canon)
    details = []
    for ev in log.events:
        if ev.height > top:
            continue
        anchor = cover.get(ev.height)
        if anchor is None:
            anchor = next(cover[h] for h in sorted(cover) if h >= ev.height)
        if ev.round <= anchor.round:
            continue
        committed = canon.get(ev.height)
        if committed is not None and ev.block == committed.block:
            continue
        details.append({"player": ev.player, "round": ev.round, "height": ev.height,
                        "block": ev.block, "offset": ev.offset,
                        "committed": {"height": anchor.height, "block": anchor.block,
                                      "round": anchor.round, "offset": anchor.offset}})
    return Verdict("lemma_no_tc", "violation" if details else "ok", details)


def _honest_ids(header: dict[str, Any]) -> list[int]:
    byz = {int(k) for k in header.get("byzantine", {})}
    return [i for i in range(header["n_players"]) if i not in byz]


def stabilization_round(header: dict[str, Any]) -> int:
    """First round that starts at or after the stabilization time."""
    T = header["T1_ms"] + header["T2_ms"]
    gst = header.get("gst_ms") or 0.0
    return int(math.ceil(gst / T - 1e-9)) + 1


def check_liveness(view: CommitLedgerView, header: dict[str, Any],
                   rounds: Sequence[dict[str, Any]], window: Optional[int] = None) -> Verdict:
    """Every honest player commits a new honest-proposed block within W rounds of stabilization."""
    W = window if window is not None else header.get("liveness_window", 10)
    byz = {int(k) for k in header.get("byzantine", {})}
    first = stabilization_round(header)
    last = first + W - 1
    gst = header.get("gst_ms") or 0.0
    waiting = []
    for i in _honest_ids(header):
        got = [e for e in view.honest.get(i, {}).values()
               if e.proposer not in byz and e.t >= gst and first <= e.seen_round <= last]
        if not got:
            waiting.append(i)
    if not waiting:
        return Verdict("liveness", "ok", [{"window": [first, last]}])
    in_window = [r for r in rounds if first <= r["round"] <= last]
    outcomes = [{"round": r["round"], "winner": r.get("winner"),
                 "winner_honest": r.get("winner_honest"), "winner_live": r.get("winner_live"),
                 "potential_leaders": r.get("potential_leaders")} for r in in_window]
    fair = any(r.get("winner_honest") and r.get("winner_live") for r in in_window)
    complete = bool(in_window) and max(r["round"] for r in in_window) >= last
    status = "stall" if fair and complete else "inconclusive"
    return Verdict("liveness", status, [{"window": [first, last], "waiting": waiting,
                                         "leaders": outcomes}])


def _round_records(records: Iterable[dict[str, Any]]) -> list[dict[str, Any]]:
    return [r for r in records if r.get("kind") == "round_summary"]


def metrics_report(header: dict[str, Any], records: Sequence[dict[str, Any]]) -> dict[str, Any]:
    rounds = _round_records(records)
    view = CommitLedgerView.from_records(records)
    s1 = [r.get("stage1_ms") for r in rounds]
    s2 = [r.get("stage2_ms") for r in rounds]
    done1 = [x for x in s1 if x is not None]
    done2 = [x for x in s2 if x is not None]
    latencies = []
    origins = {rec["block"]: rec.get("origin") for rec in records
               if rec.get("kind") == "commit" and rec.get("honest", True)}
    for h, e in sorted(view.canonical().items()):
        o = origins.get(e.block)
        if o is not None and o <= e.round:
            latencies.append(e.round - o + 1)
    end = next((r for r in records if r.get("kind") == "run_end"), {})
    sent = end.get("bytes_sent", [])
    honest = _honest_ids(header)
    heights = [max(view.honest.get(i, {0: None})) for i in honest] if honest else []
    return {
        "kind": "metrics",
        "rounds": len(rounds),
        "no_leader_fraction": (sum(1 for r in rounds if r.get("potential_leaders") == 0) / len(rounds)
                               if rounds else None),
        "stage1_ms": s1,
        "stage2_ms": s2,
        "stage1_mean_ms": sum(done1) / len(done1) if done1 else None,
        "stage2_mean_ms": sum(done2) / len(done2) if done2 else None,
        "commit_latency_rounds": latencies,
        "committed_height": min(heights) if heights else 0,
        "bytes_sent_mean": sum(sent) / len(sent) if sent else None,
        "bytes_sent_max": max(sent) if sent else None,
        "max_sig_bytes": header.get("max_sig_bytes"),
    }


MONITORS = ("no_fork", "lemma_no_tc", "liveness")


def run_monitors(header: dict[str, Any], records: Sequence[dict[str, Any]],
                 enabled: Sequence[str] = MONITORS) -> list[Verdict]:
    view = CommitLedgerView()
    log = TcEventLog()
    for k, rec in enumerate(records):
        view.feed(rec, k)
        log.feed(rec, k)
    out = []
    for name in enabled:
        if name == "no_fork":
            out.append(check_no_fork(view))
        elif name == "lemma_no_tc":
            out.append(check_lemma_no_tc(view, log))
        elif name == "liveness":
            out.append(check_liveness(view, header, _round_records(records)))
        else:
            raise ValueError(f"unknown monitor {name!r}")
    return out


def any_safety_violation(verdicts: Iterable[Verdict]) -> bool:
    return any(v.safety_violation for v in verdicts)
