"""Blocks, transactions, certificates and the per-player chain replica."""
from __future__ import annotations

import struct
from dataclasses import dataclass, field
from enum import Enum
from typing import Iterable, Optional, Sequence

from .messages import TCMessage, p_payload, tc_payload
from .sigagg import (DEFAULT_COUNTER_BITS, TAG_BYTES, H, KeyPair, MultiSignature, PublicKey,
                     SortitionState, deserialize, message_digest, next_Q, seed_message,
                     serialize, sign_seed, signer_count, verify)

ZERO_HASH = bytes(32)


class BlockError(ValueError):
    pass


class ChainError(ValueError):
    pass


def fault_bound(n_players: int) -> int:
    return (n_players - 1) // 3


def quorum(n_players: int) -> int:
    return 2 * fault_bound(n_players) + 1


@dataclass(frozen=True)
class Transaction:
    id: bytes
    payload: bytes = field(repr=False)
    submit_time: float = 0.0


def make_transaction(payload: bytes, submit_time: float = 0.0) -> Transaction:
    return Transaction(H(b"gosig/txn/", payload), payload, submit_time)


@dataclass(frozen=True)
class Block:
    height: int
    prev_hash: bytes
    proposer: int
    proposal_round_origin: int
    txn_hashes: tuple[bytes, ...]
    seed_sig: Optional[MultiSignature] = field(default=None, repr=False)
    block_hash: bytes = field(init=False, default=b"")

    def __post_init__(self):
        object.__setattr__(self, "block_hash", self.compute_hash())

    def header_bytes(self) -> bytes:
        seed_tag = self.seed_sig.tag_bytes if self.seed_sig is not None else bytes(TAG_BYTES)
        return (struct.pack("<Q", self.height) + self.prev_hash
                + struct.pack("<IQ", self.proposer & 0xFFFFFFFF, self.proposal_round_origin)
                + seed_tag)

    def compute_hash(self) -> bytes:
        if self.height == 0:
            return H(b"gosig/genesis/")
        return H(b"gosig/block/", self.header_bytes(), struct.pack("<I", len(self.txn_hashes)),
                 *self.txn_hashes)

    def short(self) -> str:
        return self.block_hash.hex()[:12]


GENESIS = Block(0, ZERO_HASH, -1, 0, ())


def make_block(parent: Block, txns: Iterable[Transaction], proposer: KeyPair, round_: int,
               parent_sortition: SortitionState, committed: Iterable[bytes] = (),
               max_txns: Optional[int] = None) -> Block:
    ids = [t.id for t in txns]
    done = set(committed)
    if max_txns is not None and len(ids) > max_txns:
        raise BlockError(f"{len(ids)} transactions exceed the block budget of {max_txns}")
    if len(set(ids)) != len(ids):
        raise BlockError("duplicate transaction in block")
    stale = [i for i in ids if i in done]
    if stale:
        raise BlockError(f"transaction {stale[0].hex()[:12]} already committed")
    return Block(parent.height + 1, parent.block_hash, proposer.index, round_, tuple(ids),
                 sign_seed(proposer, parent_sortition))


def validate_block(b: Block, parent: Block, committed_txn_set=frozenset()) -> bool:
    if b.height != parent.height + 1 or b.prev_hash != parent.block_hash:
        return False
    if b.compute_hash() != b.block_hash:
        return False
    if len(set(b.txn_hashes)) != len(b.txn_hashes):
        return False
    return not any(t in committed_txn_set for t in b.txn_hashes)


# --- certificates -----------------------------------------------------------

class CertKind(Enum):
    CASE1 = "case1"
    CASE2 = "case2"
    GENESIS = "genesis"


@dataclass(frozen=True)
class ProposalCertificate:
    kind: CertKind
    tc: Optional[TCMessage] = None

    @property
    def certified_round(self) -> int:
        return self.tc.round if self.tc is not None else 0

    @property
    def proposal_round(self) -> int:
        if self.kind is CertKind.GENESIS:
            return 1
        if self.kind is CertKind.CASE1:
            return self.tc.round
        return self.tc.round + 1


GENESIS_CERT = ProposalCertificate(CertKind.GENESIS)


def tc_signature_valid(tc: TCMessage, pubkeys: Sequence[PublicKey],
                       counter_bits: int = DEFAULT_COUNTER_BITS) -> bool:
    return verify(tc.sig, tc.payload(), pubkeys, counter_bits)


def p_proof_valid(tc: TCMessage, pubkeys: Sequence[PublicKey], threshold: int,
                  counter_bits: int = DEFAULT_COUNTER_BITS, check_sigs: bool = True) -> bool:
    proof = tc.p_proof
    if proof is None or signer_count(proof) < threshold:
        return False
    if not check_sigs:
        return proof.message_digest == message_digest(tc.p_payload())
    return verify(proof, tc.p_payload(), pubkeys, counter_bits)


def validate_proposal_certificate(c: ProposalCertificate, b: Block, h: int, r: int, f: int,
                                  pubkeys: Sequence[PublicKey], proposer: Optional[int] = None,
                                  counter_bits: int = DEFAULT_COUNTER_BITS,
                                  check_sigs: bool = True) -> Optional[int]:
    """Return the proposal round the certificate grants ``b``, or None if invalid."""
    threshold = 2 * f + 1
    if c.kind is CertKind.GENESIS:
        return 1 if (h == 1 and c.tc is None and b.height == 1) else None
    tc = c.tc
    if tc is None or tc.round >= r or b.height != h:
        return None
    if c.kind is CertKind.CASE1:
        if tc.block_hash != b.block_hash or tc.height != h:
            return None
        if proposer is not None and not tc.sig.counters[proposer]:
            return None
        if not p_proof_valid(tc, pubkeys, threshold, counter_bits, check_sigs):
            return None
    elif c.kind is CertKind.CASE2:
        if tc.height != h - 1 or tc.block_hash != b.prev_hash:
            return None
        if signer_count(tc.sig) < threshold:
            return None
    else:
        return None
    if check_sigs and not tc_signature_valid(tc, pubkeys, counter_bits):
        return None
    if not check_sigs and tc.sig.message_digest != message_digest(tc.payload()):
        return None
    return c.proposal_round


@dataclass(frozen=True)
class CommitmentCertificate:
    tc: TCMessage

    @property
    def round(self) -> int:
        return self.tc.round


def validate_commitment(cert: CommitmentCertificate, b: Block, f: int,
                        pubkeys: Sequence[PublicKey], counter_bits: int = DEFAULT_COUNTER_BITS,
                        check_sigs: bool = True) -> bool:
    tc = cert.tc
    if tc.block_hash != b.block_hash or tc.height != b.height:
        return False
    if signer_count(tc.sig) < 2 * f + 1:
        return False
    if check_sigs:
        return tc_signature_valid(tc, pubkeys, counter_bits)
    return tc.sig.message_digest == message_digest(tc.payload())


# --- chain replica ----------------------------------------------------------

class ChainReplica:
    """A player's committed chain.

    Heights are contiguous from the genesis block at height 0; every block
    above genesis carries a (2f+1)-signed commitment certificate, and the
    sortition seed advances by one hash-chain step per committed block.
    """

    def __init__(self, pubkeys: Sequence[PublicKey], genesis_q: bytes,
                 counter_bits: int = DEFAULT_COUNTER_BITS, check_sigs: bool = True):
        self.pubkeys = pubkeys if isinstance(pubkeys, list) else list(pubkeys)
        self.n_players = len(self.pubkeys)
        self.f = fault_bound(self.n_players)
        self.counter_bits = counter_bits
        self.check_sigs = check_sigs
        self.blocks: list[Block] = [GENESIS]
        self.certs: list[Optional[CommitmentCertificate]] = [None]
        self.sortitions: list[SortitionState] = [SortitionState(genesis_q, 0)]
        self.committed_txns: set[bytes] = set()
        self._index = {GENESIS.block_hash: 0}

    @property
    def head(self) -> Block:
        return self.blocks[-1]

    @property
    def height(self) -> int:
        return len(self.blocks) - 1

    @property
    def sortition(self) -> SortitionState:
        return self.sortitions[-1]

    @property
    def head_cert(self) -> Optional[CommitmentCertificate]:
        return self.certs[-1]

    def contains(self, block_hash: bytes) -> bool:
        return block_hash in self._index

    def block_at(self, height: int) -> Block:
        return self.blocks[height]

    def commit(self, b: Block, cert: CommitmentCertificate) -> bool:
        """Append ``b``; returns False for an idempotent re-commit."""
        if b.height <= self.height:
            if self.blocks[b.height].block_hash == b.block_hash:
                return False
            raise ChainError(f"conflicting block at committed height {b.height}")
        if b.height > self.height + 1:
            raise ChainError(f"gap: head is {self.height}, block is at {b.height}")
        if not validate_block(b, self.head, self.committed_txns):
            raise ChainError("block does not extend the head")
        if not validate_commitment(cert, b, self.f, self.pubkeys, self.counter_bits,
                                   self.check_sigs):
            raise ChainError("commitment certificate rejected")
        if b.seed_sig is None:
            raise ChainError("block lacks a seed signature")
        try:
            nxt = next_Q(self.sortition, b.seed_sig, self.pubkeys[b.proposer])
        except (ValueError, IndexError) as exc:
            raise ChainError(str(exc)) from exc
        self.blocks.append(b)
        self.certs.append(cert)
        self.sortitions.append(nxt)
        self.committed_txns.update(b.txn_hashes)
        self._index[b.block_hash] = b.height
        return True

    def records_from(self, height: int) -> list[tuple[Block, CommitmentCertificate]]:
        return [(self.blocks[h], self.certs[h]) for h in range(max(height, 1), self.height + 1)]

    def validate(self) -> bool:
        """Replay the chain from genesis, checking links and certificates."""
        other = ChainReplica(self.pubkeys, self.sortitions[0].Q, self.counter_bits, True)
        try:
            for b, c in self.records_from(1):
                other.commit(b, c)
        except ChainError:
            return False
        return True


def commit_block(chain: ChainReplica, b: Block, cert: CommitmentCertificate) -> ChainReplica:
    chain.commit(b, cert)
    return chain


# --- chain dump / load ------------------------------------------------------

CHAIN_MAGIC = b"GOSIGCH1"


def _encode_record(b: Block, cert: CommitmentCertificate, counter_bits: int) -> bytes:
    tc = cert.tc
    return b"".join([
        b.header_bytes(),
        struct.pack("<I", len(b.txn_hashes)), *b.txn_hashes,
        tc.block_hash, struct.pack("<QQ", tc.height, tc.round),
        serialize(tc.sig, counter_bits), serialize(tc.p_proof, counter_bits),
    ])


def dump_chain(chain: ChainReplica) -> bytes:
    """Length-prefixed binary records, one per committed height."""
    recs = chain.records_from(1)
    out = [CHAIN_MAGIC, struct.pack("<III", chain.n_players, chain.counter_bits, len(recs)),
           chain.sortitions[0].Q]
    for b, c in recs:
        body = _encode_record(b, c, chain.counter_bits)
        out.append(struct.pack("<I", len(body)))
        out.append(body)
    return b"".join(out)


def load_chain(data: bytes, pubkeys: Sequence[PublicKey], check_sigs: bool = True) -> ChainReplica:
    if data[:8] != CHAIN_MAGIC:
        raise ChainError("not a chain dump")
    n, counter_bits, count = struct.unpack_from("<III", data, 8)
    if n != len(pubkeys):
        raise ChainError(f"dump is for {n} players, {len(pubkeys)} keys given")
    pos = 20
    chain = ChainReplica(pubkeys, data[pos:pos + 32], counter_bits, check_sigs)
    pos += 32
    msig = TAG_BYTES + n * counter_bits // 8
    for _ in range(count):
        (length,) = struct.unpack_from("<I", data, pos)
        pos += 4
        rec = data[pos:pos + length]
        if len(rec) != length:
            raise ChainError("truncated chain dump")
        pos += length
        height, = struct.unpack_from("<Q", rec, 0)
        prev = rec[8:40]
        proposer, origin = struct.unpack_from("<IQ", rec, 40)
        seed_tag = rec[52:84]
        (ntx,) = struct.unpack_from("<I", rec, 84)
        off = 88
        txns = tuple(rec[off + 32 * i:off + 32 * (i + 1)] for i in range(ntx))
        off += 32 * ntx
        bh = rec[off:off + 32]
        tc_h, tc_r = struct.unpack_from("<QQ", rec, off + 32)
        off += 48
        tc_sig = deserialize(rec[off:off + msig], n, message_digest(tc_payload(bh, tc_h, tc_r)),
                             counter_bits)
        off += msig
        p_sig = deserialize(rec[off:off + msig], n, message_digest(p_payload(bh, tc_h, tc_r)),
                            counter_bits)
        counters = [0] * n
        if proposer < n:
            counters[proposer] = 1
        seed = MultiSignature(int.from_bytes(seed_tag, "big"), tuple(counters),
                              message_digest(seed_message(chain.sortition.Q)))
        block = Block(height, prev, proposer, origin, txns, seed)
        if block.block_hash != bh:
            raise ChainError(f"block hash mismatch at height {height}")
        chain.commit(block, CommitmentCertificate(TCMessage(bh, tc_h, tc_r, tc_sig, p_sig)))
    return chain
