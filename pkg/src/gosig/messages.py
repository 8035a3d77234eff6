"""Wire messages: proposals (PR), prepares (P) and tentative commits (TC)."""
from __future__ import annotations

import struct
from dataclasses import dataclass
from typing import TYPE_CHECKING, Optional, Union

from .sigagg import (LeaderProof, MultiSignature, encoded_size_for, message_digest,
                     signer_count)

if TYPE_CHECKING:
    from .ledger import Block, ProposalCertificate


def p_payload(block_hash: bytes, height: int, round_: int) -> bytes:
    return b"gosig/P/" + block_hash + struct.pack("<QQ", height, round_)


def tc_payload(block_hash: bytes, height: int, round_: int) -> bytes:
    return b"gosig/TC/" + block_hash + struct.pack("<QQ", height, round_)


def p_digest(block_hash: bytes, height: int, round_: int) -> bytes:
    return message_digest(p_payload(block_hash, height, round_))


def tc_digest(block_hash: bytes, height: int, round_: int) -> bytes:
    return message_digest(tc_payload(block_hash, height, round_))


@dataclass(frozen=True)
class PMessage:
    block_hash: bytes
    height: int
    round: int
    sig: MultiSignature

    kind = "P"

    def payload(self) -> bytes:
        return p_payload(self.block_hash, self.height, self.round)


@dataclass(frozen=True)
class TCMessage:
    block_hash: bytes
    height: int
    round: int
    sig: MultiSignature
    # (2f+1)-signed P aggregate for the same block, height and round
    p_proof: MultiSignature

    kind = "TC"

    def payload(self) -> bytes:
        return tc_payload(self.block_hash, self.height, self.round)

    def p_payload(self) -> bytes:
        return p_payload(self.block_hash, self.height, self.round)

    @property
    def signers(self) -> int:
        return signer_count(self.sig)


@dataclass(frozen=True)
class PRMessage:
    block: "Block"
    height: int
    cert: "ProposalCertificate"
    leader_proof: LeaderProof
    proposer: int
    proposer_sig: MultiSignature

    kind = "PR"

    @property
    def round(self) -> int:
        return self.leader_proof.round

    @property
    def block_hash(self) -> bytes:
        return self.block.block_hash

    def payload(self) -> bytes:
        return pr_payload(self.block.block_hash, self.height, self.round, self.cert)


def pr_payload(block_hash: bytes, height: int, round_: int, cert: "ProposalCertificate") -> bytes:
    tc = cert.tc
    cert_part = cert.kind.value.encode()
    if tc is not None:
        cert_part += tc.block_hash + struct.pack("<QQ", tc.height, tc.round) + tc.sig.tag_bytes
    return b"gosig/PR/" + block_hash + struct.pack("<QQ", height, round_) + cert_part


ProtocolMessage = Union[PRMessage, PMessage, TCMessage]


def sig_wire_bytes(n_players: int, sig_bits: int, counter_bits: int) -> int:
    return encoded_size_for(n_players, sig_bits, counter_bits)


def wire_size(msg: ProtocolMessage, sig_bits: int, counter_bits: int) -> int:
    """Bytes on the wire, using the real-crypto signature width for accounting."""
    n = msg.sig.n_players if not isinstance(msg, PRMessage) else msg.proposer_sig.n_players
    ms = sig_wire_bytes(n, sig_bits, counter_bits)
    atomic = sig_bits // 8 + 4
    header = 56
    if isinstance(msg, PMessage):
        return header + ms
    if isinstance(msg, TCMessage):
        return header + 2 * ms
    block = msg.block
    size = header + 96 + 32 * len(block.txn_hashes) + atomic  # block header + seed sig
    size += 2 * atomic  # leader proof and proposer signature
    if msg.cert.tc is not None:
        size += wire_size(msg.cert.tc, sig_bits, counter_bits)
    return size


def embedded_tc(msg: ProtocolMessage) -> Optional[TCMessage]:
    if isinstance(msg, PRMessage):
        return msg.cert.tc
    return msg if isinstance(msg, TCMessage) else None
