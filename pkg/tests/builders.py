"""Small constructors for certificates and chains used across tests."""
from gosig.ledger import (GENESIS, ChainReplica, CommitmentCertificate, make_block)
from gosig.messages import TCMessage, p_payload, tc_payload
from gosig.sigagg import SortitionState, aggregate_all, keygen_group, sign

GENESIS_Q = bytes(32)


def group(n=4, seed=1):
    keys = keygen_group(seed, n)
    return keys, [k.public for k in keys]


def make_tc(keys, block, round_, signers, p_signers=None):
    """TC for ``block`` signed by ``signers`` with a P proof from ``p_signers``."""
    p_signers = signers if p_signers is None else p_signers
    h = block.block_hash
    tc_sig = aggregate_all([sign(keys[i], tc_payload(h, block.height, round_)) for i in signers])
    p_sig = aggregate_all([sign(keys[i], p_payload(h, block.height, round_)) for i in p_signers])
    return TCMessage(h, block.height, round_, tc_sig, p_sig)


def build_chain(keys, pubkeys, length, genesis_q=GENESIS_Q):
    """A chain of ``length`` blocks, each proposed by player h mod N and committed by everyone."""
    chain = ChainReplica(pubkeys, genesis_q)
    everyone = range(len(keys))
    for h in range(1, length + 1):
        b = make_block(chain.head, [], keys[h % len(keys)], h, chain.sortition)
        chain.commit(b, CommitmentCertificate(make_tc(keys, b, h, everyone)))
    return chain


def sortition0(genesis_q=GENESIS_Q):
    return SortitionState(genesis_q)


__all__ = ["GENESIS", "GENESIS_Q", "build_chain", "group", "make_tc", "sortition0"]
