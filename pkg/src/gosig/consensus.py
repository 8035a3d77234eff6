"""The per-player Gosig state machine.

A :class:`Player` proposes when sortition makes it a potential leader,
validates and relays proposals during Stage I, and runs the two-phase
P/TC vote of Stage II.  It is driven entirely by method calls from the
simulator (or a test); it never reads a clock and owns no randomness except
what the caller passes in, so identical call sequences give identical
results.
"""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from enum import Enum
from fractions import Fraction
from typing import NamedTuple, Optional, Sequence, Union

from .ledger import (GENESIS, GENESIS_CERT, Block, BlockError, CertKind, ChainError, ChainReplica,
                     CommitmentCertificate, ProposalCertificate, Transaction, fault_bound,
                     make_block, p_proof_valid, validate_block, validate_commitment,
                     validate_proposal_certificate)
from .messages import PMessage, PRMessage, TCMessage, p_payload, pr_payload, tc_payload
from .sigagg import (DEFAULT_COUNTER_BITS, KeyPair, MultiSignature, PublicKey, guard_overflow,
                     leader_score, leadership_probability, message_digest, next_Q, overflow_ok,
                     sign, signer_count, verify, verify_leader_proof)
from .trace import NullTracer, Tracer


class Phase(Enum):
    INIT = "Init"
    PED = "Ped"
    TCED = "TCed"
    CED = "Ced"


@dataclass(frozen=True)
class Params:
    n_players: int
    q: Fraction
    counter_bits: int = DEFAULT_COUNTER_BITS
    check_sigs: bool = True
    max_block_txns: int = 1000

    @property
    def f(self) -> int:
        return fault_bound(self.n_players)

    @property
    def threshold(self) -> int:
        return 2 * self.f + 1

    @classmethod
    def for_group(cls, n_players: int, q_numerator: int = 7, **kw) -> "Params":
        return cls(n_players, leadership_probability(n_players, q_numerator), **kw)


@dataclass(frozen=True)
class Proposal:
    """A validated PR message together with its proposal round and leader score."""

    pr: PRMessage
    proposal_round: int
    score: Fraction

    @property
    def block(self) -> Block:
        return self.pr.block

    @property
    def height(self) -> int:
        return self.pr.height

    @property
    def proposer(self) -> int:
        return self.pr.proposer


@dataclass
class PlayerState:
    B_root: Block = GENESIS
    h_root: int = 0
    B_tc: Optional[Block] = None
    F: int = 0
    c_root: Optional[CommitmentCertificate] = None
    # own TC for B_tc; serves as the Case-1 certificate when re-proposing
    c_tc: Optional[TCMessage] = None
    round: int = 0
    phase: Phase = Phase.INIT
    B_bar: Optional[Block] = None
    h_bar: int = 0
    X_P: Optional[MultiSignature] = None
    X_TC: Optional[MultiSignature] = None
    p_proof: Optional[MultiSignature] = None
    S: list[Proposal] = field(default_factory=list)

    def tuple(self) -> tuple:
        return (self.B_root, self.h_root, self.B_tc, self.F)


class Decision(NamedTuple):
    vote: Optional[Proposal]
    B_tc: Optional[Block]
    F: int


def _best(props: Sequence[Proposal]) -> Proposal:
    # smaller leader score wins; equal scores fall back to the smaller block hash
    return min(props, key=lambda p: (p.score, p.block.block_hash))


def decide_msg(S: Sequence[Proposal], h_root: int, B_tc: Optional[Block], F: int) -> Decision:
    """Choose the block to prepare at the start of Stage II.

    Returns the proposal to vote for (or None) and the resulting pending
    block and freshness.  ``F`` must be 0 exactly when ``B_tc`` is None.
    """
    if not S:
        return Decision(None, B_tc, F)
    top = max(p.proposal_round for p in S)
    bar = _best([p for p in S if p.proposal_round == top])
    if bar.height != h_root + 1:
        return Decision(None, B_tc, F)
    if B_tc is None:
        return Decision(bar, None, 0)
    if bar.proposal_round > F:
        return Decision(bar, None, 0)
    again = [p for p in S if p.block.block_hash == B_tc.block_hash and p.proposal_round >= F]
    if again:
        top_again = max(p.proposal_round for p in again)
        chosen = _best([p for p in again if p.proposal_round == top_again])
        return Decision(chosen, chosen.block, chosen.proposal_round)
    return Decision(None, B_tc, F)


class CatchUp(NamedTuple):
    kind: str  # "block": one missing parent with its evidence; "chain": fetch history
    evidence: Optional[TCMessage]
    target_height: int


class BlockRequest(NamedTuple):
    block_hash: bytes
    height: int
    signer: int


Outgoing = Union[PMessage, TCMessage, None]


class Player:
    honest = True
    behavior = "honest"

    def __init__(self, key: KeyPair, pubkeys: Sequence[PublicKey], genesis_q: bytes,
                 params: Params, tracer: Optional[Tracer] = None):
        self.key = key
        self.index = key.index
        self.pubkeys = pubkeys if isinstance(pubkeys, list) else list(pubkeys)
        self.params = params
        self.tracer = tracer if tracer is not None else NullTracer()
        self.chain = ChainReplica(self.pubkeys, genesis_q, params.counter_bits, params.check_sigs)
        self.state = PlayerState()
        self.known_blocks: dict[bytes, Block] = {}
        self._seen_prs: set = set()

    # --- helpers ---------------------------------------------------------

    def _emit(self, kind: str, phase_from: Optional[Phase] = None, **fields):
        st = self.state
        rec = {"player": self.index, "round": st.round}
        if phase_from is not None:
            rec["phase_from"] = phase_from.value
            rec["phase_to"] = st.phase.value
        rec.update(fields)
        rec["honest"] = self.honest
        self.tracer.emit(kind, **rec)

    def _verify(self, sig: MultiSignature, payload: bytes) -> bool:
        if not self.params.check_sigs:
            return sig.message_digest == message_digest(payload)
        return verify(sig, payload, self.pubkeys, self.params.counter_bits)

    def _merge(self, local: MultiSignature, incoming: MultiSignature) -> Optional[MultiSignature]:
        """Absorb ``incoming``; None when it adds no signer or the guard rejects it."""
        if local.covers(incoming):
            return None
        bits, n = self.params.counter_bits, self.params.n_players
        if incoming.covers(local):
            return incoming if overflow_ok(incoming.counters, bits, n) else None
        return guard_overflow(local, incoming, bits, n)

    def _sync_root(self):
        """Realign the state tuple with the chain after a commit."""
        st = self.state
        st.B_root = self.chain.head
        st.h_root = self.chain.height
        st.c_root = self.chain.head_cert
        if st.B_tc is not None and st.B_tc.height <= st.h_root:
            st.B_tc, st.F, st.c_tc = None, 0, None
        st.S = [p for p in st.S if p.height == st.h_root + 1]

    # --- leader selection and proposal ---------------------------------

    def enter_round(self, r: int):
        """Per-round reset without proposing (also used while silenced)."""
        st = self.state
        st.round = r
        st.phase = Phase.INIT
        st.B_bar, st.X_P, st.X_TC, st.p_proof = None, None, None, None
        st.S = []
        self._seen_prs = set()

    def on_round_start(self, r: int, txns: Sequence[Transaction] = ()) -> list[PRMessage]:
        self.enter_round(r)
        st = self.state
        proof = leader_score(self.key, r, self.chain.sortition)
        if proof.score >= self.params.q:
            return []
        cands = self.candidates(r, txns)
        # largest proposal round wins; on a tie keep the pending block
        best = max(cands, key=lambda c: (c[1].proposal_round, c[0] is st.B_tc))
        pr = self.make_pr(best[0], best[1], proof)
        self._emit("propose", block=pr.block_hash.hex(), height=pr.height,
                   proposal_round=best[1].proposal_round, score=float(proof.score))
        return [pr]

    def candidates(self, r: int, txns: Sequence[Transaction]) -> list[tuple[Block, ProposalCertificate]]:
        st = self.state
        out = []
        if st.B_tc is not None and st.c_tc is not None:
            out.append((st.B_tc, ProposalCertificate(CertKind.CASE1, st.c_tc)))
        out.append((self.fresh_block(r, txns), self.root_certificate()))
        return out

    def root_certificate(self) -> ProposalCertificate:
        cert = self.chain.head_cert
        if cert is None:
            return GENESIS_CERT
        return ProposalCertificate(CertKind.CASE2, cert.tc)

    def fresh_block(self, r: int, txns: Sequence[Transaction], salt: int = 0) -> Block:
        done = self.chain.committed_txns
        picked, seen = [], set()
        for t in txns:
            if t.id in done or t.id in seen:
                continue
            seen.add(t.id)
            picked.append(t)
            if len(picked) >= self.params.max_block_txns:
                break
        if salt:
            picked = picked[: max(0, len(picked) - salt)]
        try:
            return make_block(self.chain.head, picked, self.key, r, self.chain.sortition,
                              done, self.params.max_block_txns)
        except BlockError:  # pragma: no cover - filtered above
            return make_block(self.chain.head, [], self.key, r, self.chain.sortition)

    def make_pr(self, block: Block, cert: ProposalCertificate, proof) -> PRMessage:
        payload = pr_payload(block.block_hash, block.height, proof.round, cert)
        return PRMessage(block, block.height, cert, proof, self.index, sign(self.key, payload))

    # --- Stage I -----------------------------------------------------------

    def check_proposal(self, pr: PRMessage) -> Optional[Proposal]:
        st = self.state
        p = self.params
        if pr.round != st.round or pr.height != st.h_root + 1 or pr.block.height != pr.height:
            return None
        if not 0 <= pr.proposer < p.n_players:
            return None
        proof = pr.leader_proof
        if proof.signature.counters[pr.proposer] != 1:
            return None
        if p.check_sigs:
            if not verify_leader_proof(proof, self.pubkeys[pr.proposer], st.round,
                                       self.chain.sortition, p.q):
                return None
            sig = pr.proposer_sig
            if signer_count(sig) != 1 or not sig.counters[pr.proposer]:
                return None
            if not verify(sig, pr.payload(), self.pubkeys, p.counter_bits):
                return None
        elif proof.score >= p.q:
            return None
        r_p = validate_proposal_certificate(pr.cert, pr.block, pr.height, st.round, p.f,
                                            self.pubkeys, pr.proposer, p.counter_bits,
                                            p.check_sigs)
        if r_p is None:
            return None
        if not validate_block(pr.block, st.B_root, self.chain.committed_txns):
            return None
        b = pr.block
        if b.seed_sig is None or not 0 <= b.proposer < p.n_players:
            return None
        if p.check_sigs:
            try:
                next_Q(self.chain.sortition, b.seed_sig, self.pubkeys[b.proposer])
            except ValueError:
                return None
        return Proposal(pr, r_p, proof.score)

    def on_stage1_message(self, pr: PRMessage, in_stage1: bool = True) -> bool:
        """Validate a proposal; returns True when it should be relayed."""
        key = (pr.proposer, pr.block_hash, pr.cert.kind, pr.cert.certified_round, pr.round)
        if key in self._seen_prs:
            return False
        self._seen_prs.add(key)
        prop = self.check_proposal(pr)
        if prop is None:
            return False
        self.known_blocks[pr.block_hash] = pr.block
        if in_stage1:
            self.state.S.append(prop)
            self._emit("pr_accept", block=pr.block_hash.hex(), height=pr.height,
                       proposer=pr.proposer, proposal_round=prop.proposal_round,
                       score=float(prop.score))
        return True

    # --- Stage II ------------------------------------------------------------

    def begin_stage2(self) -> Optional[PMessage]:
        st = self.state
        before = st.phase
        d = decide_msg(st.S, st.h_root, st.B_tc, st.F)
        if d.B_tc is None:
            st.c_tc = None
        st.B_tc, st.F = d.B_tc, d.F
        if d.vote is None:
            return None
        st.B_bar, st.h_bar = d.vote.block, d.vote.height
        st.X_P = sign(self.key, p_payload(st.B_bar.block_hash, st.h_bar, st.round))
        st.phase = Phase.PED
        self._emit("prepare", before, block=st.B_bar.block_hash.hex(), height=st.h_bar,
                   signers=1, proposal_round=d.vote.proposal_round)
        return PMessage(st.B_bar.block_hash, st.h_bar, st.round, st.X_P)

    def _matches(self, msg) -> bool:
        st = self.state
        return (msg.round == st.round and st.B_bar is not None
                and msg.block_hash == st.B_bar.block_hash and msg.height == st.h_bar)

    def wants(self, msg) -> bool:
        """Cheap pre-verification filter: could this message change my state?"""
        st = self.state
        if isinstance(msg, PMessage):
            return st.phase is Phase.PED and self._matches(msg) and not st.X_P.covers(msg.sig)
        if isinstance(msg, TCMessage):
            if st.phase is Phase.INIT or not self._matches(msg):
                return False
            return st.phase is Phase.PED or not st.X_TC.covers(msg.sig)
        return False

    def on_p_message(self, msg: PMessage) -> Outgoing:
        st = self.state
        if st.phase is not Phase.PED or not self._matches(msg):
            return None
        if not self._verify(msg.sig, msg.payload()):
            return None
        merged = self._merge(st.X_P, msg.sig)
        if merged is None:
            return None
        st.X_P = merged
        if signer_count(merged) >= self.params.threshold:
            return self._tentatively_commit(merged)
        return PMessage(msg.block_hash, msg.height, st.round, merged)

    def _tentatively_commit(self, p_proof: MultiSignature) -> TCMessage:
        st = self.state
        before = st.phase
        st.phase = Phase.TCED
        st.p_proof = p_proof
        st.B_tc, st.F = st.B_bar, st.round
        own = sign(self.key, tc_payload(st.B_bar.block_hash, st.h_bar, st.round))
        st.X_TC = own
        st.c_tc = TCMessage(st.B_bar.block_hash, st.h_bar, st.round, own, p_proof)
        self._emit("tentative_commit", before, block=st.B_bar.block_hash.hex(), height=st.h_bar,
                   signers=signer_count(p_proof))
        return TCMessage(st.B_bar.block_hash, st.h_bar, st.round, own, p_proof)

    def on_tc_message(self, msg: TCMessage) -> Outgoing:
        st = self.state
        if st.phase is Phase.INIT or not self._matches(msg):
            return None
        if not self._verify(msg.sig, msg.payload()):
            return None
        threshold = self.params.threshold
        if not p_proof_valid(msg, self.pubkeys, threshold, self.params.counter_bits,
                             self.params.check_sigs):
            return None
        changed = False
        if st.phase is Phase.PED:
            self._tentatively_commit(msg.p_proof)
            changed = True
        merged = self._merge(st.X_TC, msg.sig)
        if merged is not None:
            st.X_TC = merged
            changed = True
        if not changed:
            return None
        if st.phase is not Phase.CED and signer_count(st.X_TC) >= threshold:
            self._commit_bar()
        return TCMessage(st.B_bar.block_hash, st.h_bar, st.round, st.X_TC, st.p_proof)

    def _commit_bar(self):
        st = self.state
        before = st.phase
        cert = CommitmentCertificate(
            TCMessage(st.B_bar.block_hash, st.h_bar, st.round, st.X_TC, st.p_proof))
        self.chain.commit(st.B_bar, cert)
        st.phase = Phase.CED
        st.B_tc, st.F, st.c_tc = None, 0, None
        self._sync_root()
        self._emit("commit", before, block=st.B_bar.block_hash.hex(), height=st.h_bar,
                   signers=signer_count(st.X_TC), proposer=st.B_bar.proposer,
                   origin=st.B_bar.proposal_round_origin, cert_round=st.round, via="protocol")

    def outgoing(self) -> Outgoing:
        """Freshest aggregate to keep gossiping in Stage II."""
        st = self.state
        if st.phase is Phase.PED:
            return PMessage(st.B_bar.block_hash, st.h_bar, st.round, st.X_P)
        if st.phase in (Phase.TCED, Phase.CED):
            return TCMessage(st.B_bar.block_hash, st.h_bar, st.round, st.X_TC, st.p_proof)
        return None

    def on_message(self, msg) -> Outgoing:
        if isinstance(msg, PMessage):
            return self.on_p_message(msg)
        if isinstance(msg, TCMessage):
            return self.on_tc_message(msg)
        return None

    def on_round_end(self, r: Optional[int] = None) -> PlayerState:
        st = self.state
        if st.phase is not Phase.INIT and st.phase is not Phase.CED:
            self._emit("round_end", block=st.B_bar.block_hash.hex() if st.B_bar else None,
                       height=st.h_bar, phase=st.phase.value)
        st.phase = Phase.INIT
        st.B_bar, st.X_P, st.X_TC, st.p_proof = None, None, None, None
        st.S = []
        keep = {st.B_tc.block_hash} if st.B_tc is not None else set()
        if len(self.known_blocks) > 256:
            self.known_blocks = {h: b for h, b in self.known_blocks.items()
                                 if h in keep or b.height > st.h_root}
        return st

    # --- recovery ------------------------------------------------------------

    def catchup_need(self, pr: PRMessage) -> Optional[CatchUp]:
        h_root = self.chain.height
        if pr.height <= h_root + 1:
            return None
        cert = pr.cert
        if (cert.kind is CertKind.CASE2 and cert.tc is not None
                and cert.tc.height == h_root + 1 and pr.height == h_root + 2):
            return CatchUp("block", cert.tc, h_root + 1)
        return CatchUp("chain", None, pr.height - 1)

    def evidence_valid(self, evidence: TCMessage) -> bool:
        p = self.params
        if signer_count(evidence.sig) < p.threshold:
            return False
        return self._verify(evidence.sig, evidence.payload())

    def lookup_block(self, block_hash: bytes) -> Optional[Block]:
        st = self.state
        for b in (st.B_tc, st.B_bar):
            if b is not None and b.block_hash == block_hash:
                return b
        b = self.known_blocks.get(block_hash)
        if b is not None:
            return b
        if self.chain.contains(block_hash):
            return next(x for x in self.chain.blocks if x.block_hash == block_hash)
        return None

    def request_missing_block(self, evidence: TCMessage, rng: random.Random,
                              exclude: Sequence[int] = ()) -> Optional[BlockRequest]:
        """Pick a signer of ``evidence`` to fetch its block from; None if known."""
        if self.lookup_block(evidence.block_hash) is not None:
            return None
        signers = [i for i, c in enumerate(evidence.sig.counters)
                   if c and i != self.index and i not in exclude]
        if not signers:
            return None
        return BlockRequest(evidence.block_hash, evidence.height, rng.choice(signers))

    def on_block_response(self, block: Optional[Block], evidence: TCMessage) -> bool:
        """Commit a retrieved (or already known) block on commitment evidence."""
        if block is None or block.block_hash != evidence.block_hash:
            return False
        if self.chain.contains(block.block_hash):
            return True
        try:
            added = self.chain.commit(block, CommitmentCertificate(evidence))
        except ChainError:
            return False
        if added:
            self._after_recovery_commit(block, evidence)
        return True

    def _after_recovery_commit(self, block: Block, evidence: TCMessage):
        st = self.state
        self._sync_root()
        self._emit("commit", block=block.block_hash.hex(), height=block.height,
                   signers=signer_count(evidence.sig), proposer=block.proposer,
                   origin=block.proposal_round_origin, cert_round=evidence.round, via="recovery")

    def full_recovery(self, records: Sequence[tuple[Block, CommitmentCertificate]]) -> int:
        """Replay a peer's chain suffix, keeping the valid prefix; returns blocks added."""
        added = 0
        for block, cert in records:
            if block.height <= self.chain.height:
                if self.chain.block_at(block.height).block_hash == block.block_hash:
                    continue
                break
            if not validate_commitment(cert, block, self.params.f, self.pubkeys,
                                       self.params.counter_bits, self.params.check_sigs):
                break
            try:
                self.chain.commit(block, cert)
            except ChainError:
                break
            added += 1
            self._after_recovery_commit(block, cert.tc)
        return added

    def serve_block(self, block_hash: bytes) -> Optional[Block]:
        return self.lookup_block(block_hash)

    def serve_chain(self, from_height: int) -> list[tuple[Block, CommitmentCertificate]]:
        return self.chain.records_from(from_height)
