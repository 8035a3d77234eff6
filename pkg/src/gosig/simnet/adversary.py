"""Static Byzantine behaviours and the adaptive-attack script.

Byzantine players hold real keys, so everything they send verifies; they
just do not follow the protocol.  None of them can produce an honest
player's signature.
"""
from __future__ import annotations

import random
from typing import Optional, Sequence

from ..consensus import Phase, Player
from ..ledger import (Block, BlockError, CertKind, ChainError, CommitmentCertificate,
                      ProposalCertificate, make_block)
from ..messages import PMessage, PRMessage, TCMessage, p_payload, tc_payload
from ..sigagg import aggregate, leader_score, sign, signer_count
from .net import DownSchedule


class Adversary(Player):
    honest = False
    behavior = "byzantine"

    def __init__(self, *args, rng: Optional[random.Random] = None, **kw):
        super().__init__(*args, **kw)
        self.rng = rng if rng is not None else random.Random(self.index)

    def stage1_relay(self, pr: PRMessage, in_stage1: bool) -> bool:
        return self.on_stage1_message(pr, in_stage1)

    def adopt(self, msg) -> None:
        """Track commits seen on the wire so that later proposals extend the real chain."""
        if not isinstance(msg, TCMessage) or signer_count(msg.sig) < self.params.threshold:
            return
        if msg.height != self.chain.height + 1:
            return
        block = self.lookup_block(msg.block_hash)
        if block is None:
            return
        try:
            if self.chain.commit(block, CommitmentCertificate(msg)):
                self._sync_root()
        except ChainError:
            pass


class Silent(Adversary):
    """Crashed from the start: never proposes, relays, votes or serves."""

    behavior = "silent"

    def on_round_start(self, r, txns=()):
        self.state.round = r
        self.state.phase = Phase.INIT
        return []

    def stage1_relay(self, pr, in_stage1):
        return False

    def begin_stage2(self):
        return None

    def wants(self, msg):
        return False

    def outgoing(self):
        return None

    def serve_block(self, block_hash):
        return None

    def serve_chain(self, from_height):
        return []


class Equivocator(Adversary):
    """Proposes several blocks as leader, Ps every block it sees, TCs anything it can."""

    behavior = "equivocate"

    def on_round_start(self, r, txns=()):
        self.enter_round(r)
        self._p: dict[bytes, PMessage] = {}
        self._tc: dict[bytes, TCMessage] = {}
        self._order: list[bytes] = []
        proof = leader_score(self.key, r, self.chain.sortition)
        if proof.score >= self.params.q:
            return []
        out = []
        for block, cert in self._variants(r, txns):
            out.append(self.make_pr(block, cert, proof))
        return out

    def _variants(self, r, txns) -> list[tuple[Block, ProposalCertificate]]:
        st = self.state
        root = self.root_certificate()
        seen = set()
        out = []
        if st.B_tc is not None and st.c_tc is not None:
            out.append((st.B_tc, ProposalCertificate(CertKind.CASE1, st.c_tc)))
            seen.add(st.B_tc.block_hash)
        base = self.fresh_block(r, txns)
        packed = set(base.txn_hashes)
        # distinct siblings: drop transactions, or lie about the origin round
        for k in range(3):
            picked = [t for t in txns if t.id in packed][: max(0, len(packed) - k)]
            try:
                b = make_block(self.chain.head, picked, self.key, r + 1000 * k, self.chain.sortition,
                               self.chain.committed_txns)
            except BlockError:
                continue
            if b.block_hash not in seen:
                seen.add(b.block_hash)
                out.append((b, root))
        return out

    def begin_stage2(self):
        st = self.state
        for prop in st.S:
            h = prop.block.block_hash
            if h in self._p:
                continue
            sig = sign(self.key, p_payload(h, prop.height, st.round))
            self._p[h] = PMessage(h, prop.height, st.round, sig)
            self._order.append(h)
        if self._order:
            st.phase = Phase.PED
        return self.outgoing()

    def wants(self, msg):
        if msg.round != self.state.round or msg.block_hash not in self._p:
            return False
        mine = self._tc.get(msg.block_hash) if isinstance(msg, TCMessage) else self._p[msg.block_hash]
        return mine is None or not mine.sig.covers(msg.sig)

    def on_message(self, msg):
        if not self.wants(msg) or not self._verify(msg.sig, msg.payload()):
            return None
        h = msg.block_hash
        bits = self.params.counter_bits
        if isinstance(msg, PMessage):
            cur = self._p[h]
            own = sign(self.key, msg.payload())
            try:
                merged = _combine(cur.sig, msg.sig, own, bits)
            except ValueError:
                return None
            if merged is None:
                return None
            self._p[h] = PMessage(h, msg.height, msg.round, merged)
            if h not in self._tc and signer_count(merged) >= self.params.threshold:
                own = sign(self.key, tc_payload(h, msg.height, msg.round))
                self._tc[h] = TCMessage(h, msg.height, msg.round, own, merged)
            return self._p[h]
        own = sign(self.key, tc_payload(h, msg.height, msg.round))
        cur = self._tc.get(h)
        if cur is None:
            cur = TCMessage(h, msg.height, msg.round, own, msg.p_proof)
        try:
            merged = _combine(cur.sig, msg.sig, own, bits)
        except ValueError:
            return None
        if merged is None:
            return None
        self._tc[h] = TCMessage(h, msg.height, msg.round, merged, cur.p_proof)
        self.adopt(self._tc[h])
        return self._tc[h]

    def outgoing(self):
        if not getattr(self, "_order", None):
            return None
        h = self.rng.choice(self._order)
        if h in self._tc and self.rng.random() < 0.5:
            return self._tc[h]
        return self._p[h]


def _combine(local, incoming, own, bits):
    """Union of two signer sets when it can be formed without double counting."""
    if local.covers(incoming):
        return None
    if incoming.covers(local):
        return incoming if incoming.covers(own) else aggregate(incoming, own, bits)
    if not local.mask & incoming.mask:
        return aggregate(local, incoming, bits)
    return None


class OverflowAttacker(Adversary):
    """Votes like an honest player but pumps its own counter to the maximum."""

    behavior = "overflow-attacker"

    def _pump(self, msg):
        if msg is None:
            return None
        limit = (1 << self.params.counter_bits) - 1
        have = msg.sig.counters[self.index]
        if have >= limit:
            return msg
        extra = sign(self.key, msg.payload(), multiplicity=limit - have)
        sig = aggregate(msg.sig, extra, self.params.counter_bits)
        if isinstance(msg, PMessage):
            return PMessage(msg.block_hash, msg.height, msg.round, sig)
        return TCMessage(msg.block_hash, msg.height, msg.round, sig, msg.p_proof)

    def outgoing(self):
        return self._pump(super().outgoing())

    def on_message(self, msg):
        out = super().on_message(msg)
        return self._pump(out)


class ArbitraryRelay(Adversary):
    """Drops honest proposals, votes for a random block, forwards only its own signatures."""

    behavior = "arbitrary-relay"

    def stage1_relay(self, pr, in_stage1):
        ok = self.on_stage1_message(pr, in_stage1)
        return ok and pr.proposer == self.index

    def begin_stage2(self):
        st = self.state
        self._own = None
        if not st.S:
            return None
        prop = self.rng.choice(st.S)
        st.B_bar, st.h_bar = prop.block, prop.height
        st.X_P = sign(self.key, p_payload(st.B_bar.block_hash, st.h_bar, st.round))
        st.phase = Phase.PED
        self._own = PMessage(st.B_bar.block_hash, st.h_bar, st.round, st.X_P)
        return self._own

    def wants(self, msg):
        return isinstance(msg, TCMessage) and super().wants(msg)

    def on_message(self, msg):
        if isinstance(msg, TCMessage):
            super().on_message(msg)
            self.adopt(msg)
        return None

    def outgoing(self):
        st = self.state
        if st.phase in (Phase.TCED, Phase.CED):
            return TCMessage(st.B_bar.block_hash, st.h_bar, st.round,
                             sign(self.key, tc_payload(st.B_bar.block_hash, st.h_bar, st.round)),
                             st.p_proof)
        return getattr(self, "_own", None)

    def serve_chain(self, from_height):
        # a stale but valid prefix
        recs = super().serve_chain(from_height)
        return recs[: len(recs) // 2]


BEHAVIORS = {
    "silent": Silent,
    "equivocate": Equivocator,
    "overflow-attacker": OverflowAttacker,
    "arbitrary-relay": ArbitraryRelay,
}


class AdversaryScript:
    """Static Byzantine roles plus adaptive attack windows."""

    def __init__(self, byzantine: dict[int, str], adaptive_count: int, delta_t_ms: float,
                 schedule="none"):
        self.byzantine = dict(byzantine)
        self.c = adaptive_count
        self.delta_t = delta_t_ms
        self.schedule = schedule
        self.down = DownSchedule()
        self.issued: list[tuple[float, tuple[int, ...], float, float]] = []
        if isinstance(schedule, list):
            for w in schedule:
                self.attack(w.targets, w.start_ms, w.stop_ms)

    def attack(self, targets: Sequence[int], issued_ms: float, stop_ms: float):
        """Silence ``targets`` from ``issued_ms + Δ_t`` until ``stop_ms``."""
        start = issued_ms + self.delta_t
        tg = tuple(dict.fromkeys(targets))[: self.c]
        for t in tg:
            self.down.add(t, start, stop_ms)
        self.issued.append((issued_ms, tg, start, stop_ms))
        return tg, start

    def chase(self, prev_proposers: Sequence[tuple[float, int]], now_ms: float, stop_ms: float):
        """Target the best-scored honest proposers of the previous round."""
        if self.schedule != "chase_leaders" or not prev_proposers:
            return (), None
        ranked = [i for _, i in sorted(prev_proposers) if i not in self.byzantine]
        seen: list[int] = []
        for i in ranked:
            if i not in seen:
                seen.append(i)
        return self.attack(seen[: self.c], now_ms, stop_ms)
