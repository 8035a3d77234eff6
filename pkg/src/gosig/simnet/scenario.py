"""Scenario runner: rounds of Stage I (vector engine) and Stage II (event loop)."""
from __future__ import annotations

import heapq
import random
from dataclasses import dataclass, field
from typing import Any, Callable, Optional

import numpy as np

from ..consensus import Params, Phase, Player
from ..ledger import Transaction, make_transaction
from ..messages import PRMessage, TCMessage, wire_size
from ..sigagg import (H, encoded_size_for, keygen_group, leader_score, leadership_probability,
                      signer_count)
from ..trace import Tracer, encode_trace, trace_hash
from .adversary import BEHAVIORS, AdversaryScript
from .config import ScenarioConfig
from .net import Blacklist, LifoInbox, NetModel, RoundClock, pick_peers
from .stage1 import INF, Stage1Item, run_stage1

# event kinds, ordered so that simultaneous events resolve deterministically
_ARRIVE, _DONE, _SLOT = 0, 1, 2
RECOVERY_ATTEMPTS = 3


@dataclass
class NodeIO:
    """Transport state of one player in Stage II."""

    blacklist: Blacklist
    inbox: LifoInbox = field(default_factory=LifoInbox)
    free_slots: int = 0
    link_free: float = 0.0
    busy: bool = False
    waking: bool = False
    per_sender: dict = field(default_factory=dict)


@dataclass
class ScenarioResult:
    config: ScenarioConfig
    header: dict[str, Any]
    records: list[dict[str, Any]]
    players: list[Player]
    rounds: list[dict[str, Any]]
    bytes_sent: np.ndarray

    _encoded: Optional[bytes] = None

    @property
    def trace_bytes(self) -> bytes:
        if self._encoded is None:
            self._encoded = encode_trace(self.records, self.header)
        return self._encoded

    @property
    def trace_hash(self) -> str:
        return trace_hash(self.trace_bytes)

    def honest(self) -> list[Player]:
        return [p for p in self.players if p.honest]


def default_genesis_q(seed: int) -> bytes:
    return H(b"gosig/genesis-q/", seed.to_bytes(8, "little", signed=True))


def genesis_q_for(cfg: ScenarioConfig) -> bytes:
    if cfg.genesis_q is not None:
        return bytes.fromhex(cfg.genesis_q)
    return default_genesis_q(cfg.seed)


def byzantine_roles(cfg: ScenarioConfig) -> dict[int, str]:
    gen = np.random.default_rng([cfg.seed & 0xFFFFFFFF, 7])
    picks = sorted(int(i) for i in gen.permutation(cfg.n_players)[: cfg.byzantine.count])
    return dict(zip(picks, cfg.byzantine.behaviors()))


class Simulation:
    def __init__(self, cfg: ScenarioConfig, manifest: Optional[dict] = None):
        self.cfg = cfg
        n = cfg.n_players
        seed = cfg.seed & 0xFFFFFFFF
        self.gen = np.random.default_rng([seed, 1])
        self.rng = random.Random(seed * 1_000_003 + 17)
        self.net = NetModel(cfg, self.rng)
        self.clock = RoundClock.draw(cfg, np.random.default_rng([seed, 2]))
        self.tracer = Tracer()
        keys = keygen_group(cfg.seed, n)
        self.pubkeys = [k.public for k in keys]
        self.params = Params(n, leadership_probability(n, cfg.q_numerator), cfg.crypto.counter_bits,
                             cfg.crypto.verify, cfg.workload.max_block_txns)
        self.genesis_q = genesis_q_for(cfg)
        self.roles = byzantine_roles(cfg)
        self.script = AdversaryScript(self.roles, cfg.adaptive.count, cfg.sync.delta_t_ms,
                                      cfg.adaptive.schedule)
        self.players: list[Player] = []
        for k in keys:
            if k.index in self.roles:
                cls = BEHAVIORS[self.roles[k.index]]
                p = cls(k, self.pubkeys, self.genesis_q, self.params, self.tracer,
                        rng=random.Random(seed * 7919 + k.index))
            else:
                p = Player(k, self.pubkeys, self.genesis_q, self.params, self.tracer)
            self.players.append(p)
        self.honest_ids = [p.index for p in self.players if p.honest]
        self.crashed = {i for i, b in self.roles.items() if b == "silent"}
        self.io = [NodeIO(Blacklist(cfg.blacklist_base_ms)) for _ in range(n)]
        self.bytes_sent = np.zeros(n)
        self.txns: list[Transaction] = []
        self.txn_visible: list[float] = []
        self.txn_seen: dict[bytes, float] = {}
        self._txn_clock = 0.0
        self._txn_gen = np.random.default_rng([seed, 3])
        self.prev_proposers: list[tuple[float, int]] = []
        self.rounds: list[dict[str, Any]] = []
        self.sig_size = encoded_size_for(n, cfg.crypto.sig_bits, cfg.crypto.counter_bits)
        self.header = {
            "n_players": n,
            "f": cfg.f,
            "seed": cfg.seed,
            "rounds": cfg.rounds,
            "T1_ms": cfg.round.T1_ms,
            "T2_ms": cfg.round.T2_ms,
            "gst_ms": cfg.sync.gst_ms,
            "liveness_window": cfg.liveness_window,
            "byzantine": {str(i): b for i, b in sorted(self.roles.items())},
            "sig_bits": cfg.crypto.sig_bits,
            "counter_bits": cfg.crypto.counter_bits,
            "max_sig_bytes": self.sig_size,
            "config": cfg.to_dict(),
        }
        if manifest is not None:
            self.header["manifest"] = manifest

    # --- helpers ---------------------------------------------------------

    def _trace(self, t: float, kind: str, **fields):
        self.tracer.now = t
        self.tracer.emit(kind, player=-1, **fields)

    def _down(self, i: int, t: float) -> bool:
        return self.script.down.is_down(i, t)

    def _unreachable(self, i: int, t: float) -> bool:
        """Connection attempts fail: the peer is crashed or under attack."""
        return i in self.crashed or self.script.down.is_down(i, t)

    def _connect_fail_ms(self, i: int, t: float) -> float:
        """Time until a failed send is noticed.

        A host under attack never answers, so the sender waits out the
        connect timeout.  A crashed process has already closed its
        connections, so the sender's transport fails the send locally.
        """
        if self.script.down.is_down(i, t):
            return self.net.connect_timeout
        return self.net.dead_peer

    def _size(self, msg) -> int:
        return wire_size(msg, self.cfg.crypto.sig_bits, self.cfg.crypto.counter_bits)

    def _gen_txns(self, until: float):
        w = self.cfg.workload
        if w.tps <= 0:
            return
        t = self._txn_clock
        while True:
            t += self._txn_gen.exponential(1000.0 / w.tps)
            if t >= until:
                break
            payload = len(self.txns).to_bytes(8, "little") + bytes(max(0, w.txn_bytes - 8))
            txn = make_transaction(payload, t)
            # single background-gossip delay shared by all players
            vis = t + float(self._txn_gen.exponential(self.net.mean)) * 3
            self.txns.append(txn)
            self.txn_visible.append(vis)
            self.txn_seen[txn.id] = vis
        self._txn_clock = until

    def _visible(self, t: float) -> list[Transaction]:
        if not self.txns:
            return []
        order = sorted(range(len(self.txns)), key=lambda k: self.txn_visible[k])
        return [self.txns[k] for k in order if self.txn_visible[k] <= t]

    def _prune_txns(self):
        if not self.txns:
            return
        lowest = min((self.players[i].chain for i in self.honest_ids), key=lambda c: c.height)
        keep = [k for k, t in enumerate(self.txns) if t.id not in lowest.committed_txns]
        self.txns = [self.txns[k] for k in keep]
        self.txn_visible = [self.txn_visible[k] for k in keep]

    # --- recovery ----------------------------------------------------------

    def _rtt(self, t: float, size: int) -> float:
        return self.net.latency(t) + self.net.latency(t) + self.net.tx_ms(size)

    def _recover(self, node: int, pr: PRMessage, t: float) -> float:
        """Bring ``node`` up to the proposal's parent height; returns the time spent."""
        p = self.players[node]
        spent = 0.0
        for _ in range(RECOVERY_ATTEMPTS):
            need = p.catchup_need(pr)
            if need is None:
                break
            if need.kind == "block" and p.evidence_valid(need.evidence):
                spent += self._fetch_block(node, need.evidence, t + spent)
            else:
                spent += self._fetch_chain(node, need.target_height, t + spent)
        return spent

    def _fetch_block(self, node: int, evidence: TCMessage, t: float) -> float:
        p = self.players[node]
        spent = 0.0
        tried: list[int] = []
        for _ in range(RECOVERY_ATTEMPTS):
            req = p.request_missing_block(evidence, self.rng, exclude=tried)
            if req is None:
                known = p.lookup_block(evidence.block_hash)
                if known is not None and p.on_block_response(known, evidence):
                    self._trace(t + spent, "recovery", target=node, mode="block", peer=node,
                                height=evidence.height, ok=True)
                return spent
            tried.append(req.signer)
            peer = self.players[req.signer]
            if self._unreachable(req.signer, t + spent):
                spent += self._connect_fail_ms(req.signer, t + spent)
                continue
            block = peer.serve_block(req.block_hash)
            spent += self._rtt(t + spent, 256 + 32 * (len(block.txn_hashes) if block else 0))
            ok = p.on_block_response(block, evidence)
            self._trace(t + spent, "recovery", target=node, mode="block", peer=req.signer,
                        height=evidence.height, ok=ok)
            if ok:
                return spent
        return spent

    def _fetch_chain(self, node: int, target: int, t: float) -> float:
        p = self.players[node]
        spent = 0.0
        tried = set()
        for _ in range(RECOVERY_ATTEMPTS):
            if p.chain.height >= target:
                break
            peers = [i for i in range(self.cfg.n_players) if i != node and i not in tried]
            if not peers:
                break
            peer = self.rng.choice(peers)
            tried.add(peer)
            if self._unreachable(peer, t + spent):
                spent += self._connect_fail_ms(peer, t + spent)
                continue
            recs = self.players[peer].serve_chain(p.chain.height + 1)
            spent += self._rtt(t + spent, sum(200 + 2 * self.sig_size for _ in recs))
            added = p.full_recovery(recs)
            self._trace(t + spent, "recovery", target=node, mode="chain", peer=peer,
                        height=p.chain.height, added=added)
        return spent

    # --- Stage I -------------------------------------------------------------

    def _pr_verify_ms(self, pr: PRMessage) -> float:
        ms = self.net.verify_ms(1) * 2  # leader proof and proposer signature
        tc = pr.cert.tc
        if tc is not None:
            ms += self.net.verify_ms(signer_count(tc.sig))
            ms += self.net.verify_ms(signer_count(tc.p_proof))
        return ms

    def _stage1(self, r: int, prs: list[PRMessage], injects: list[float]):
        n = self.cfg.n_players
        starts = np.array([self.clock.round_start(r, i) for i in range(n)])
        ends = starts + self.clock.T1
        items = [Stage1Item(pr.proposer, t, self._size(pr)) for pr, t in zip(prs, injects)]
        pr_cost = [self._pr_verify_ms(pr) for pr in prs]

        def callback(node: int, j: int, t: float) -> float:
            p = self.players[node]
            pr = prs[j]
            if self._down(node, t):
                return INF
            ready = t + pr_cost[j]
            if p.catchup_need(pr) is not None:
                ready += self._recover(node, pr, ready)
            missing = [h for h in pr.block.txn_hashes if self.txn_seen.get(h, 0.0) > ready]
            if missing:
                ready += self._rtt(ready, 32 * len(missing) + self.cfg.workload.txn_bytes * len(missing))
            self.tracer.now = ready
            in_stage1 = ready < ends[node]
            relay = p.stage1_relay(pr, in_stage1) if not p.honest else p.on_stage1_message(pr, in_stage1)
            return ready if relay and in_stage1 else INF

        live_honest = np.array([i in set(self.honest_ids) for i in range(n)])
        down = self.script.down

        def done_when(processed):
            return bool(processed[:, live_honest].all()) and not down.intervals

        res = run_stage1(items, starts, ends, self.net, self.gen, self.cfg.fanout,
                         self.cfg.round.step_ms, callback, down, done_when=done_when)
        self.bytes_sent += res.bytes_sent
        return res, starts, ends

    # --- Stage II ------------------------------------------------------------

    def _stage2(self, r: int) -> Optional[float]:
        cfg = self.cfg
        n = cfg.n_players
        limit = cfg.connection_limit
        clock = self.clock
        ends = [clock.round_end(r, i) for i in range(n)]
        starts = [clock.stage2_start(r, i) for i in range(n)]
        heap: list = []
        seq = 0
        honest_live = [i for i in self.honest_ids if not self._down(i, starts[i])]
        pending_ced = set(honest_live)
        ced_at: dict[int, float] = {}

        def push(t, kind, node, data=None):
            nonlocal seq
            seq += 1
            heapq.heappush(heap, (t, kind, seq, node, data))

        for i in sorted(range(n), key=lambda i: starts[i]):
            io = self.io[i]
            io.inbox.clear()
            io.busy = False
            io.per_sender = {}
            io.free_slots = 0
            io.waking = False
            t = starts[i]
            self.tracer.now = t
            if self._down(i, t):
                up = self.script.down.next_up(i, t)
                if up < ends[i]:
                    io.waking = True
                    push(up, _SLOT, i, "wake")
                continue
            self.players[i].begin_stage2()
            push(t, _SLOT, i, "fill")

        def send(i: int, t: float) -> bool:
            """Use one connection slot of ``i``; False when there is nothing to send."""
            p = self.players[i]
            msg = p.outgoing()
            if msg is None:
                return False
            io = self.io[i]
            excluded = io.blacklist.excluded(t)
            peers = pick_peers(self.rng, n, i, 1, excluded)
            if not peers:
                return False
            target = peers[0]
            if self._unreachable(target, t):
                # no payload leaves the link when the connection cannot be opened
                push(t + self._connect_fail_ms(target, t), _SLOT, i, ("fail", target))
                return True
            size = self._size(msg)
            depart = max(t, io.link_free) + self.net.tx_ms(size)
            io.link_free = depart
            self.bytes_sent[i] += size
            arrival = depart + self.net.latency(depart)
            if not self.net.lost(depart):
                push(arrival, _ARRIVE, target, (i, msg))
                if self.net.duplicated():
                    push(arrival + self.net.latency(depart), _ARRIVE, target, (i, msg))
            push(arrival, _SLOT, i, "free")
            return True

        def fill(i: int, t: float):
            io = self.io[i]
            while io.free_slots > 0:
                if not send(i, t):
                    break
                io.free_slots -= 1

        def dispatch(i: int, t: float):
            io = self.io[i]
            p = self.players[i]
            while not io.busy:
                msg = io.inbox.pop()
                if msg is None:
                    return
                if not p.wants(msg):
                    continue  # dominated by what we already hold
                k = signer_count(msg.sig)
                cost = self.net.verify_ms(k)
                if isinstance(msg, TCMessage) and p.state.phase is Phase.PED:
                    cost += self.net.verify_ms(signer_count(msg.p_proof))
                io.busy = True
                push(t + cost, _DONE, i, msg)

        while heap and pending_ced:
            t, kind, _, i, data = heapq.heappop(heap)
            if t >= ends[i]:
                continue
            io = self.io[i]
            if kind == _SLOT:
                if data == "wake":
                    io.waking = False
                    io.free_slots = limit
                elif data == "fill":
                    io.free_slots = limit
                else:
                    if isinstance(data, tuple):  # connection timed out
                        io.blacklist.fail(data[1], t)
                    io.free_slots = min(limit, io.free_slots + 1)
                if self._down(i, t):
                    up = self.script.down.next_up(i, t)
                    if up < ends[i] and not io.waking:
                        io.waking = True
                        push(up, _SLOT, i, "wake")
                    continue
                self.tracer.now = t
                fill(i, t)
            elif kind == _ARRIVE:
                sender, msg = data
                if self._down(i, t) or t < starts[i]:
                    continue
                io.blacklist.clear(sender)
                if cfg.net.peer_rate_limit:
                    c = io.per_sender.get(sender, 0)
                    if c >= cfg.net.peer_rate_limit:
                        continue
                    io.per_sender[sender] = c + 1
                io.inbox.push(msg)
                dispatch(i, t)
            else:  # verification finished
                io.busy = False
                if self._down(i, t):
                    io.inbox.clear()
                    continue
                p = self.players[i]
                self.tracer.now = t
                before = p.state.phase
                p.on_message(data)
                if p.state.phase is not before and p.state.phase is Phase.CED and i in pending_ced:
                    ced_at[i] = t
                    pending_ced.discard(i)
                    # players silenced meanwhile no longer hold up completion
                    for j in [j for j in pending_ced if self._down(j, t)]:
                        pending_ced.discard(j)
                if io.free_slots > 0:
                    fill(i, t)
                dispatch(i, t)
        if pending_ced or not ced_at:
            return None
        return max(ced_at.values())

    # --- rounds ----------------------------------------------------------------

    def run_round(self, r: int):
        cfg = self.cfg
        clock = self.clock
        t0 = clock.nominal_start(r)
        if r > 1 and cfg.adaptive.schedule == "chase_leaders":
            tg, start = self.script.chase(self.prev_proposers, t0, t0 + clock.T)
            if tg:
                self._trace(t0, "attack", round=r, targets=list(tg), start_ms=start,
                            stop_ms=t0 + clock.T)
        self._gen_txns(t0 + clock.T)
        prs: list[PRMessage] = []
        injects: list[float] = []
        scores = []
        for i in sorted(range(cfg.n_players), key=lambda i: clock.round_start(r, i)):
            p = self.players[i]
            t = clock.round_start(r, i)
            self.tracer.now = t
            p.on_round_end()
            scores.append((leader_score(p.key, r, p.chain.sortition).score, i))
            if self._down(i, t):
                p.enter_round(r)
                continue
            out = p.on_round_start(r, self._visible(t))
            for k, pr in enumerate(out):
                prs.append(pr)
                # an equivocator releases its extra blocks late to split the vote
                injects.append(t if k == 0 else t + clock.T1 * 0.6)
        potential = sum(1 for s, _ in scores if s < self.params.q)
        res, starts, ends = self._stage1(r, prs, injects)
        stage1_ms = self._stage1_completion(prs, res, r)
        stage2_done = self._stage2(r)
        proposers = sorted({(pr.leader_proof.score, pr.proposer) for pr in prs})
        self.prev_proposers = [(float(s), i) for s, i in proposers]
        winner = proposers[0][1] if proposers else None
        rec = {
            "round": r,
            "potential_leaders": potential,
            "proposals": len(prs),
            "proposers": [i for _, i in proposers],
            "winner": winner,
            "winner_honest": winner is not None and winner not in self.roles,
            "winner_live": winner is not None and not self._down(winner, clock.stage2_start(r, winner)),
            "stage1_ms": stage1_ms,
            "stage2_ms": None if stage2_done is None else float(stage2_done - (t0 + clock.T1)),
            "synchronous": self.net.synchronous(t0),
            "heights": [self.players[i].chain.height for i in self.honest_ids],
        }
        self.rounds.append(rec)
        self._trace(t0 + clock.T, "round_summary", **rec)
        self._prune_txns()

    def _stage1_completion(self, prs, res, r) -> Optional[float]:
        honest_items = [j for j, pr in enumerate(prs) if pr.proposer not in self.roles]
        live = [i for i in self.honest_ids if not self._down(i, self.clock.stage2_start(r, i))]
        if not honest_items or not live:
            return None
        got = res.ready[np.ix_(honest_items, live)]
        if not np.isfinite(got).all():
            return None
        return float(got.max() - self.clock.nominal_start(r))

    def run(self, stop: Optional[Callable[["Simulation"], bool]] = None) -> ScenarioResult:
        """Run all configured rounds; ``stop`` may end the run early after any round."""
        r = 0
        for r in range(1, self.cfg.rounds + 1):
            self.run_round(r)
            if stop is not None and stop(self):
                break
        self._trace(self.clock.nominal_start(r + 1), "run_end", rounds_run=r,
                    bytes_sent=[int(b) for b in self.bytes_sent])
        return ScenarioResult(self.cfg, self.header, self.tracer.records, self.players,
                              self.rounds, self.bytes_sent)


def run_scenario(cfg: ScenarioConfig, manifest: Optional[dict] = None,
                 stop: Optional[Callable[[Simulation], bool]] = None) -> ScenarioResult:
    return Simulation(cfg, manifest).run(stop)
