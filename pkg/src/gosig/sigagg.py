"""Aggregatable multi-signatures with per-player counter arrays, and
cryptographic sortition built on top of them.

The scheme is a transparent stand-in for BLS multi-signatures.  Each player
``i`` owns a verification secret ``v_i``; the atomic signature of a message
digest ``D`` is the field element ``d_i(D) = H(v_i || D) mod P``.  A
multi-signature carries ``tag = sum_i n[i] * d_i(D) mod P`` together with the
counter array ``n``.  Aggregation adds tags and counters, exactly mirroring
``S_1 * S_2`` on the BLS side (the exponent of ``H(M)`` is additive), so the
algebra the protocol relies on is preserved: order-independent aggregation,
identity element, counter bookkeeping, and tamper rejection.

Verification needs ``v_i``.  In the simulation the trusted PKI hands every
verifier an oracle for it through :class:`PublicKey`; protocol code never
reads it directly.
"""
from __future__ import annotations

import hashlib
import math
import operator
import struct
from dataclasses import dataclass, field
from fractions import Fraction
from functools import cached_property, lru_cache
from typing import Optional, Sequence

HASH_NAME = "sha256"
HASH_BITS = 256
# 2^255 - 19
FIELD_PRIME = (1 << 255) - 19
TAG_BYTES = 32
DEFAULT_COUNTER_BITS = 32


class SignatureError(ValueError):
    """Raised for malformed signature inputs (length or digest mismatch)."""


class CounterOverflow(SignatureError):
    pass


def H(*parts: bytes) -> bytes:
    h = hashlib.new(HASH_NAME)
    for p in parts:
        h.update(p)
    return h.digest()


@lru_cache(maxsize=1 << 16)
def message_digest(message: bytes) -> bytes:
    return H(b"gosig/msg/", message)


@dataclass(frozen=True)
class PublicKey:
    key_id: bytes
    # verification oracle provided by the PKI
    oracle: bytes = field(repr=False, compare=False)

    def hex(self) -> str:
        return self.key_id.hex()


@dataclass(frozen=True)
class KeyPair:
    secret: bytes = field(repr=False)
    public: PublicKey
    index: int
    n_players: int


def keygen(seed: int, index: int, n_players: int) -> KeyPair:
    if not 0 <= index < n_players:
        raise ValueError(f"player index {index} out of range for N={n_players}")
    secret = H(b"gosig/sk/", struct.pack("<qI", seed, index))
    oracle = H(b"gosig/vk/", secret)
    key_id = H(b"gosig/pk/", oracle)
    return KeyPair(secret=secret, public=PublicKey(key_id, oracle), index=index, n_players=n_players)


def keygen_group(seed: int, n_players: int) -> list[KeyPair]:
    return [keygen(seed, i, n_players) for i in range(n_players)]


@lru_cache(maxsize=1 << 17)
def _term(oracle: bytes, digest: bytes) -> int:
    return int.from_bytes(H(b"gosig/sig/", oracle, digest), "big") % FIELD_PRIME


@dataclass(frozen=True)
class MultiSignature:
    tag: int
    counters: tuple[int, ...]
    message_digest: bytes

    @property
    def n_players(self) -> int:
        return len(self.counters)

    @property
    def tag_bytes(self) -> bytes:
        return self.tag.to_bytes(TAG_BYTES, "big")

    @cached_property
    def mask(self) -> int:
        """Signer set as a bit mask (bit i set iff counters[i] > 0)."""
        m = 0
        for i, c in enumerate(self.counters):
            if c:
                m |= 1 << i
        return m

    def signers(self) -> frozenset[int]:
        return frozenset(i for i, c in enumerate(self.counters) if c)

    def covers(self, other: "MultiSignature") -> bool:
        """True when every signer of ``other`` also signed ``self``."""
        return other.mask & ~self.mask == 0


def identity(n_players: int, digest: bytes) -> MultiSignature:
    return MultiSignature(0, (0,) * n_players, digest)


def sign(key: KeyPair, message: bytes, multiplicity: int = 1) -> MultiSignature:
    """Atomic signature of ``message``; ``multiplicity`` folds it in repeatedly."""
    digest = message_digest(message)
    counters = [0] * key.n_players
    counters[key.index] = multiplicity
    tag = multiplicity * _term(key.public.oracle, digest) % FIELD_PRIME
    out = MultiSignature(tag, tuple(counters), digest)
    if multiplicity:
        out.__dict__["mask"] = 1 << key.index
    return out


def aggregate(a: MultiSignature, b: MultiSignature,
              counter_bits: int = DEFAULT_COUNTER_BITS) -> MultiSignature:
    if a.message_digest != b.message_digest:
        raise SignatureError("cannot aggregate signatures over different messages")
    if len(a.counters) != len(b.counters):
        raise SignatureError("counter arrays differ in length")
    limit = (1 << counter_bits) - 1
    counters = tuple(map(operator.add, a.counters, b.counters))
    if max(counters, default=0) > limit:
        raise CounterOverflow(f"counter exceeds {counter_bits}-bit width")
    out = MultiSignature((a.tag + b.tag) % FIELD_PRIME, counters, a.message_digest)
    out.__dict__["mask"] = a.mask | b.mask  # seed the cached signer mask
    return out


def aggregate_all(sigs: Sequence[MultiSignature],
                  counter_bits: int = DEFAULT_COUNTER_BITS) -> MultiSignature:
    if not sigs:
        raise SignatureError("nothing to aggregate")
    out = sigs[0]
    for s in sigs[1:]:
        out = aggregate(out, s, counter_bits)
    return out


def verify(sig: MultiSignature, message: bytes, pubkeys: Sequence[PublicKey],
           counter_bits: int = DEFAULT_COUNTER_BITS) -> bool:
    if len(pubkeys) != len(sig.counters):
        raise SignatureError(
            f"{len(pubkeys)} public keys for a {len(sig.counters)}-player counter array")
    if sig.message_digest != message_digest(message):
        return False
    return _tag_matches(sig, pubkeys, counter_bits)


def verify_digest(sig: MultiSignature, digest: bytes, pubkeys: Sequence[PublicKey],
                  counter_bits: int = DEFAULT_COUNTER_BITS) -> bool:
    if len(pubkeys) != len(sig.counters):
        raise SignatureError("public key list does not match counter array")
    return sig.message_digest == digest and _tag_matches(sig, pubkeys, counter_bits)


def _tag_matches(sig: MultiSignature, pubkeys: Sequence[PublicKey], counter_bits: int) -> bool:
    # verification is pure, so repeated gossip copies are answered from a cache;
    # the cached entry pins the key list so its id cannot be reused
    key = (sig, id(pubkeys), counter_bits)
    hit = _verified.get(key)
    if hit is not None and hit[0] is pubkeys:
        return hit[1]
    ok = _recompute(sig, pubkeys, counter_bits)
    if len(_verified) > 1 << 16:
        _verified.clear()
    _verified[key] = (pubkeys, ok)
    return ok


_verified: dict = {}


def _recompute(sig: MultiSignature, pubkeys: Sequence[PublicKey], counter_bits: int) -> bool:
    limit = (1 << counter_bits) - 1
    if not 0 <= sig.tag < FIELD_PRIME:
        return False
    acc = 0
    digest = sig.message_digest
    for pk, n in zip(pubkeys, sig.counters):
        if n:
            if n < 0 or n > limit:
                return False
            acc += n * _term(pk.oracle, digest)
    return acc % FIELD_PRIME == sig.tag


def signer_count(sig: MultiSignature) -> int:
    return bin(sig.mask).count("1")


def overflow_ok(counters: Sequence[int], counter_bits: int, n_players: int) -> bool:
    """Growth rule for the largest counter relative to the signer count."""
    biggest = max(counters, default=0)
    signers = len(counters) - counters.count(0) if isinstance(counters, tuple) else \
        sum(1 for c in counters if c)
    if biggest <= signers:
        return True
    return math.log2(biggest) < counter_bits * signers / n_players


def guard_overflow(local: MultiSignature, incoming: MultiSignature,
                   counter_bits: int = DEFAULT_COUNTER_BITS,
                   n_players: Optional[int] = None) -> Optional[MultiSignature]:
    """Merge ``incoming`` into ``local`` if the result passes the growth rule.

    Returns the merged signature on accept and ``None`` on reject; on reject
    the caller keeps ``local`` unchanged.
    """
    n = n_players if n_players is not None else len(local.counters)
    try:
        merged = aggregate(local, incoming, counter_bits)
    except CounterOverflow:
        return None
    return merged if overflow_ok(merged.counters, counter_bits, n) else None


def encoded_size(sig: MultiSignature, sig_bits: int, counter_bits: int = DEFAULT_COUNTER_BITS) -> int:
    return encoded_size_for(len(sig.counters), sig_bits, counter_bits)


def encoded_size_for(n_players: int, sig_bits: int, counter_bits: int = DEFAULT_COUNTER_BITS) -> int:
    return sig_bits // 8 + n_players * counter_bits // 8


def naive_size_for(n_players: int, sig_bits: int) -> int:
    """Footprint of shipping every atomic signature separately."""
    return n_players * sig_bits // 8


def serialize(sig: MultiSignature, counter_bits: int = DEFAULT_COUNTER_BITS) -> bytes:
    """Tag bytes followed by N fixed-width little-endian counters."""
    width = counter_bits // 8
    body = b"".join(c.to_bytes(width, "little") for c in sig.counters)
    return sig.tag_bytes + body


def deserialize(data: bytes, n_players: int, digest: bytes,
                counter_bits: int = DEFAULT_COUNTER_BITS) -> MultiSignature:
    width = counter_bits // 8
    expected = TAG_BYTES + n_players * width
    if len(data) != expected:
        raise SignatureError(f"expected {expected} bytes, got {len(data)}")
    tag = int.from_bytes(data[:TAG_BYTES], "big")
    counters = tuple(
        int.from_bytes(data[TAG_BYTES + i * width:TAG_BYTES + (i + 1) * width], "little")
        for i in range(n_players))
    return MultiSignature(tag, counters, digest)


# --- sortition -------------------------------------------------------------

@dataclass(frozen=True)
class SortitionState:
    Q: bytes
    height: int = 0


@dataclass(frozen=True)
class LeaderProof:
    signature: MultiSignature
    score: Fraction
    round: int

    @property
    def signer(self) -> int:
        return next(i for i, c in enumerate(self.signature.counters) if c)


def leader_message(round_: int, Q: bytes) -> bytes:
    return b"gosig/leader/" + struct.pack("<Q", round_) + Q


def seed_message(Q: bytes) -> bytes:
    return b"gosig/seed/" + Q


def score_of(sig: MultiSignature) -> Fraction:
    return Fraction(int.from_bytes(H(sig.tag_bytes), "big"), 1 << HASH_BITS)


def leadership_probability(n_players: int, q_numerator: int = 7) -> Fraction:
    return min(Fraction(1), Fraction(q_numerator, n_players))


def leader_score(key: KeyPair, round_: int, sortition: SortitionState) -> LeaderProof:
    sig = sign(key, leader_message(round_, sortition.Q))
    return LeaderProof(sig, score_of(sig), round_)


def verify_leader_proof(proof: LeaderProof, pubkey: PublicKey, round_: int,
                        sortition: SortitionState, q: Fraction) -> bool:
    sig = proof.signature
    if proof.round != round_ or signer_count(sig) != 1:
        return False
    i = proof.signer
    if sig.counters[i] != 1:
        return False
    if sig.message_digest != message_digest(leader_message(round_, sortition.Q)):
        return False
    if sig.tag != _term(pubkey.oracle, sig.message_digest):
        return False
    return score_of(sig) < q


def sign_seed(key: KeyPair, prev: SortitionState) -> MultiSignature:
    return sign(key, seed_message(prev.Q))


def next_Q(prev: SortitionState, proposer_signature: MultiSignature,
           pubkey: PublicKey) -> SortitionState:
    sig = proposer_signature
    if (signer_count(sig) != 1 or sum(sig.counters) != 1
            or sig.message_digest != message_digest(seed_message(prev.Q))
            or sig.tag != _term(pubkey.oracle, sig.message_digest)):
        raise SignatureError("seed signature does not verify over the previous Q")
    return SortitionState(H(sig.tag_bytes), prev.height + 1)


def has_potential_leader(keys: Sequence[KeyPair], round_: int, sortition: SortitionState,
                         q: Fraction) -> bool:
    """True when some key scores below ``q``; stops at the first one found.

    Same arithmetic as :func:`leader_score`, without the caches, for large
    sortition sweeps.
    """
    digest = H(b"gosig/msg/", leader_message(round_, sortition.Q))
    bound = q * (1 << HASH_BITS)
    for k in keys:
        tag = int.from_bytes(H(b"gosig/sig/", k.public.oracle, digest), "big") % FIELD_PRIME
        if int.from_bytes(H(tag.to_bytes(TAG_BYTES, "big")), "big") < bound:
            return True
    return False
