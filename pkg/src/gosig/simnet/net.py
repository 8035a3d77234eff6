"""Network, clock and per-player transport state for the simulator."""
from __future__ import annotations

import random
from dataclasses import dataclass, field
from typing import Iterable, NamedTuple, Optional, Sequence

import numpy as np

from .config import ScenarioConfig


class NetModel:
    """Latency, loss, bandwidth and verification-time model.

    Scalar draws come from ``rng`` (a seeded :class:`random.Random`); the
    vector Stage I engine uses :meth:`latencies` and :meth:`losses` with a
    numpy generator.  Before the stabilization time the configured pre-GST
    loss and extra delay apply; afterwards every delay is capped at Δ_t.
    """

    def __init__(self, cfg: ScenarioConfig, rng: Optional[random.Random] = None):
        n = cfg.net
        self.mean = n.latency_mean_ms
        self.loss_rate = n.loss_rate
        self.bw_per_ms = n.bandwidth_Bps / 1000.0
        self.verify_a = n.verify_a_ms
        self.verify_b = n.verify_b_ms
        self.duplicate_rate = n.duplicate_rate
        self.connect_timeout = n.connect_timeout_ms
        self.dead_peer = n.dead_peer_ms
        self.gst = cfg.sync.gst_ms
        self.delta_t = cfg.sync.delta_t_ms
        self.pre_loss = cfg.sync.pre_gst_loss_rate if cfg.sync.pre_gst_loss_rate is not None else n.loss_rate
        self.pre_delay = cfg.sync.pre_gst_extra_delay_ms
        self.rng = rng if rng is not None else random.Random(cfg.seed)

    def synchronous(self, t: float) -> bool:
        return self.gst is None or t >= self.gst

    def loss_at(self, t: float) -> float:
        return self.loss_rate if self.synchronous(t) else self.pre_loss

    def latency(self, t: float) -> float:
        d = self.rng.expovariate(1.0 / self.mean)
        if self.synchronous(t):
            return min(d, self.delta_t) if self.gst is not None else d
        return d + self.pre_delay

    def lost(self, t: float) -> bool:
        p = self.loss_at(t)
        return p > 0 and (p >= 1 or self.rng.random() < p)

    def duplicated(self) -> bool:
        return self.duplicate_rate > 0 and self.rng.random() < self.duplicate_rate

    def tx_ms(self, size: int) -> float:
        return size / self.bw_per_ms

    def verify_ms(self, k: int) -> float:
        return self.verify_a + self.verify_b * k

    # vector forms for the Stage I engine
    def latencies(self, gen: np.random.Generator, t: np.ndarray) -> np.ndarray:
        d = gen.exponential(self.mean, size=t.shape)
        if self.gst is None:
            return d
        sync = t >= self.gst
        return np.where(sync, np.minimum(d, self.delta_t), d + self.pre_delay)

    def losses(self, gen: np.random.Generator, t: np.ndarray) -> np.ndarray:
        u = gen.random(size=t.shape)
        if self.gst is None:
            return u < self.loss_rate
        p = np.where(t >= self.gst, self.loss_rate, self.pre_loss)
        return u < p


class RoundClock:
    """Per-player clock offsets in [0, skew); rounds are numbered from 1."""

    def __init__(self, T1: float, T2: float, offsets: Sequence[float]):
        self.T1 = T1
        self.T2 = T2
        self.T = T1 + T2
        self.offsets = np.asarray(offsets, dtype=float)

    @classmethod
    def draw(cls, cfg: ScenarioConfig, gen: np.random.Generator) -> "RoundClock":
        skew = cfg.clock_skew_ms
        offs = gen.uniform(0, skew, cfg.n_players) if skew > 0 else np.zeros(cfg.n_players)
        return cls(cfg.round.T1_ms, cfg.round.T2_ms, offs)

    def nominal_start(self, r: int) -> float:
        return (r - 1) * self.T

    def round_start(self, r: int, i: int) -> float:
        return self.nominal_start(r) + self.offsets[i]

    def stage2_start(self, r: int, i: int) -> float:
        return self.round_start(r, i) + self.T1

    def round_end(self, r: int, i: int) -> float:
        return self.round_start(r, i) + self.T

    def local_stage(self, i: int, t: float) -> tuple[int, int]:
        """(round, stage) of player ``i`` at global time ``t``; stage 0 before round 1."""
        local = t - self.offsets[i]
        if local < 0:
            return 0, 0
        r = int(local // self.T) + 1
        stage = 1 if local - (r - 1) * self.T < self.T1 else 2
        return r, stage


class DownSchedule:
    """Intervals [start, stop) during which a player is silenced."""

    def __init__(self):
        self.intervals: dict[int, list[tuple[float, float]]] = {}

    def add(self, node: int, start: float, stop: float):
        if stop > start:
            self.intervals.setdefault(node, []).append((start, stop))
            self.intervals[node].sort()

    def is_down(self, node: int, t: float) -> bool:
        for a, b in self.intervals.get(node, ()):
            if a <= t < b:
                return True
        return False

    def down_mask(self, nodes: np.ndarray, times: np.ndarray) -> np.ndarray:
        out = np.zeros(nodes.shape, dtype=bool)
        for node, ivs in self.intervals.items():
            sel = nodes == node
            if not sel.any():
                continue
            for a, b in ivs:
                out |= sel & (times >= a) & (times < b)
        return out

    def next_up(self, node: int, t: float) -> float:
        """Earliest time >= t at which ``node`` is up."""
        for a, b in self.intervals.get(node, ()):
            if a <= t < b:
                t = b
        return t

    def windows(self) -> list[tuple[int, float, float]]:
        return [(n, a, b) for n, ivs in sorted(self.intervals.items()) for a, b in ivs]


@dataclass
class Blacklist:
    """Additive backoff on connection failures, cleared by any received message."""

    base_ms: float
    until: dict[int, float] = field(default_factory=dict)
    failures: dict[int, int] = field(default_factory=dict)

    def fail(self, peer: int, now: float) -> float:
        k = self.failures.get(peer, 0) + 1
        self.failures[peer] = k
        self.until[peer] = now + k * self.base_ms
        return self.until[peer]

    def clear(self, peer: int):
        self.failures.pop(peer, None)
        self.until.pop(peer, None)

    def allowed(self, peer: int, now: float) -> bool:
        u = self.until.get(peer)
        return u is None or now >= u

    def excluded(self, now: float) -> set[int]:
        return {p for p, u in self.until.items() if now < u}


class LifoInbox:
    """Pending verifications; the most recent arrival is handled first."""

    def __init__(self):
        self._stack: list = []

    def push(self, item):
        self._stack.append(item)

    def pop(self):
        return self._stack.pop() if self._stack else None

    def clear(self):
        self._stack.clear()

    def __len__(self) -> int:
        return len(self._stack)


class Delivery(NamedTuple):
    target: int
    depart: float
    arrival: float
    lost: bool


def pick_peers(rng: random.Random, n_players: int, sender: int, m: int,
               excluded: Iterable[int] = ()) -> list[int]:
    """``m`` distinct uniform peers other than ``sender`` and ``excluded``."""
    bad = set(excluded)
    bad.add(sender)
    if n_players - len(bad) <= 2 * m:
        pool = [i for i in range(n_players) if i not in bad]
        return rng.sample(pool, min(m, len(pool)))
    out: list[int] = []
    seen = set(bad)
    while len(out) < m:
        i = rng.randrange(n_players)
        if i not in seen:
            seen.add(i)
            out.append(i)
    return out


def gossip_send(net: NetModel, sender: int, n_players: int, m: int, size: int, now: float,
                link_free: float = 0.0, excluded: Iterable[int] = (),
                free_slots: Optional[int] = None) -> tuple[list[Delivery], float]:
    """Send one message to up to ``m`` random peers over a serial outbound link.

    Returns the deliveries (lost ones flagged) and the new link-free time.
    ``free_slots`` caps the fanout at the number of idle connections.
    """
    if free_slots is not None:
        m = min(m, free_slots)
    out = []
    t = max(now, link_free)
    tx = net.tx_ms(size)
    for target in pick_peers(net.rng, n_players, sender, m, excluded):
        t += tx
        lost = net.lost(t)
        out.append(Delivery(target, t, t + net.latency(t), lost))
    return [d for d in out if not d.lost], t
