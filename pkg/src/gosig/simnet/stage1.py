"""Vectorized Stage I engine: stepped fanout gossip of proposals.

Every holder of a proposal sends it to ``m`` random peers at each hop tick
while its local Stage I lasts, as long as its outbound link is idle.  The
engine works on a global tick grid and finalizes first arrivals tick by
tick: an arrival earlier than tick ``k`` can no longer improve, because all
later sends depart at or after tick ``k``.  Finalized arrivals are handed to
a callback in time order, which decides whether the receiver relays the
proposal and when it becomes ready (validation, recovery and payload
retrieval delays).
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Callable, Optional, Sequence

import numpy as np

from .net import DownSchedule, NetModel

INF = float("inf")


@dataclass(frozen=True)
class Stage1Item:
    origin: int
    inject_time: float
    size: int


@dataclass
class Stage1Result:
    arrival: np.ndarray   # (items, nodes) first arrival, inf if never
    ready: np.ndarray     # (items, nodes) time the node started relaying, inf if never
    bytes_sent: np.ndarray
    messages_sent: int


# callback(node, item index, time) -> ready time (inf: do not relay)
Stage1Callback = Callable[[int, int, float], float]


def _draw_targets(gen: np.random.Generator, senders: np.ndarray, n: int, m: int) -> np.ndarray:
    """(len(senders), m) distinct peers per row, never the sender itself."""
    rows = len(senders)
    if m >= n - 1:
        base = np.arange(n - 1)
        t = np.broadcast_to(base, (rows, n - 1)).copy()
        return t + (t >= senders[:, None])
    t = gen.integers(0, n - 1, size=(rows, m))
    while True:
        s = np.sort(t, axis=1)
        dup = (s[:, 1:] == s[:, :-1]).any(axis=1)
        if not dup.any():
            break
        t[dup] = gen.integers(0, n - 1, size=(int(dup.sum()), m))
    return t + (t >= senders[:, None])


def run_stage1(items: Sequence[Stage1Item], starts: np.ndarray, ends: np.ndarray,
               net: NetModel, gen: np.random.Generator, fanout: int, step_ms: float,
               callback: Stage1Callback, down: Optional[DownSchedule] = None,
               link_free: Optional[np.ndarray] = None,
               done_when: Optional[Callable[[np.ndarray], bool]] = None) -> Stage1Result:
    """Simulate one Stage I; ``starts``/``ends`` are the local stage windows."""
    n = len(starts)
    k_items = len(items)
    arrival = np.full((k_items, n), INF)
    ready = np.full((k_items, n), INF)
    processed = np.zeros((k_items, n), dtype=bool)
    bytes_sent = np.zeros(n)
    link = np.zeros(n) if link_free is None else link_free
    down = down if down is not None else DownSchedule()
    sent = 0
    if k_items == 0 or n == 0:
        return Stage1Result(arrival, ready, bytes_sent, 0)
    sizes = np.array([it.size for it in items], dtype=float)
    for j, it in enumerate(items):
        if not down.is_down(it.origin, it.inject_time):
            arrival[j, it.origin] = it.inject_time

    t0 = float(starts.min())
    t_end = float(ends.max())
    n_ticks = int(np.ceil((t_end - t0) / step_ms)) + 1
    for k in range(n_ticks + 1):
        t = t0 + k * step_ms
        # finalize arrivals that can no longer improve
        when = np.maximum(arrival, starts[None, :])
        due = (~processed) & (when < t) & (when < ends[None, :])
        if due.any():
            jj, ii = np.nonzero(due)
            order = np.lexsort((ii, jj, when[jj, ii]))
            for o in order:
                j, i = int(jj[o]), int(ii[o])
                processed[j, i] = True
                ready[j, i] = callback(i, j, float(when[j, i]))
        late = (~processed) & np.isfinite(arrival) & (when >= ends[None, :])
        processed |= late
        if k == n_ticks or t >= t_end:
            break
        if done_when is not None and done_when(processed):
            _coast(ready, sizes, starts, ends, t, step_ms, fanout, net, bytes_sent, down)
            break
        active = (starts <= t) & (ends > t) & (link <= t)
        if down.intervals:
            active &= ~down.down_mask(np.arange(n), np.full(n, t))
        hold = (ready <= t) & active[None, :]
        if not hold.any():
            continue
        hj, hi = np.nonzero(hold)
        # serialize each sender's messages on its outbound link
        order = np.lexsort((hj, hi))
        hj, hi = hj[order], hi[order]
        m_eff = min(fanout, n - 1)
        msg_items = np.repeat(hj, m_eff)
        msg_senders = np.repeat(hi, m_eff)
        msg_bytes = sizes[msg_items]
        csum = np.cumsum(msg_bytes)
        first = np.searchsorted(msg_senders, msg_senders, side="left")
        before = np.where(first > 0, csum[first - 1], 0.0)
        depart = t + (csum - before) / net.bw_per_ms
        per_sender = np.bincount(msg_senders, weights=msg_bytes, minlength=n)
        bytes_sent += per_sender
        busy = per_sender > 0
        link[busy] = t + per_sender[busy] / net.bw_per_ms
        targets = _draw_targets(gen, hi, n, m_eff).reshape(-1)
        sent += len(targets)
        arr = depart + net.latencies(gen, depart)
        keep = ~net.losses(gen, depart)
        if down.intervals:
            keep &= ~down.down_mask(targets, arr)
        np.minimum.at(arrival, (msg_items[keep], targets[keep]), arr[keep])
    return Stage1Result(arrival, ready, bytes_sent, sent)


def _coast(ready, sizes, starts, ends, t, step_ms, fanout, net, bytes_sent, down):
    """Account for the bytes holders keep sending after everyone is served."""
    held = np.where(np.isfinite(ready), sizes[:, None], 0.0).sum(axis=0) * min(fanout, len(starts) - 1)
    remaining = np.maximum(0.0, np.floor((ends - t) / step_ms))
    cap = net.bw_per_ms * step_ms
    per_tick = np.minimum(held, cap)
    for node in down.intervals:
        remaining[node] = 0.0
    bytes_sent += per_tick * remaining


@dataclass
class BroadcastStats:
    complete: np.ndarray      # per round: every honest live node got the block in Stage I
    completion_ms: np.ndarray  # per round: time from injection to last receipt (nan if incomplete)
    coverage: np.ndarray      # per round: fraction of nodes reached


def run_broadcast_rounds(net: NetModel, gen: np.random.Generator, n_players: int, rounds: int,
                         fanout: int = 8, T1_ms: float = 5000.0, step_ms: float = 300.0,
                         block_bytes: int = 1024, verify_ms: float = 11.11,
                         skew_ms: float = 100.0) -> BroadcastStats:
    """Gossip one leader's proposal per round and measure Stage I completeness."""
    complete = np.zeros(rounds, dtype=bool)
    compl = np.full(rounds, np.nan)
    cover = np.zeros(rounds)
    for r in range(rounds):
        offs = gen.uniform(0, skew_ms, n_players) if skew_ms > 0 else np.zeros(n_players)
        starts = offs
        ends = offs + T1_ms
        leader = int(gen.integers(n_players))
        item = Stage1Item(leader, float(starts[leader]), block_bytes)

        def cb(node, j, t):
            return t + verify_ms

        res = run_stage1([item], starts, ends, net, gen, fanout, step_ms, cb,
                         done_when=lambda p: bool(p.all()))
        got = np.isfinite(res.arrival[0]) & (res.arrival[0] < ends)
        cover[r] = got.mean()
        complete[r] = got.all()
        if complete[r]:
            compl[r] = float((res.ready[0] - starts[leader]).max())
    return BroadcastStats(complete, compl, cover)
