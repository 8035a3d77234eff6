"""Declarative scenario description, loaded from YAML or JSON."""
from __future__ import annotations

import json
from pathlib import Path
from typing import Literal, Optional, Union

import yaml
from pydantic import BaseModel, ConfigDict, Field, ValidationError, model_validator

from ..ledger import fault_bound

Behavior = Literal["equivocate", "silent", "overflow-attacker", "arbitrary-relay"]


class ConfigError(ValueError):
    pass


class _Strict(BaseModel):
    model_config = ConfigDict(extra="forbid", frozen=True)


class ByzantineConfig(_Strict):
    count: int = Field(0, ge=0)
    # one tag for every Byzantine player, or one tag per player
    behavior: Union[Behavior, list[Behavior]] = "silent"

    def behaviors(self) -> list[str]:
        if isinstance(self.behavior, str):
            return [self.behavior] * self.count
        return list(self.behavior)


class AttackWindow(_Strict):
    targets: list[int]
    start_ms: float = Field(ge=0)
    stop_ms: float = Field(ge=0)


class AdaptiveConfig(_Strict):
    count: int = Field(0, ge=0)
    schedule: Union[Literal["none", "chase_leaders"], list[AttackWindow]] = "none"


class RoundConfig(_Strict):
    T1_ms: float = Field(5000.0, gt=0)
    T2_ms: float = Field(5000.0, gt=0)
    # Stage I gossip hop interval
    step_ms: float = Field(300.0, gt=0)

    @property
    def T_ms(self) -> float:
        return self.T1_ms + self.T2_ms


class NetConfig(_Strict):
    latency_mean_ms: float = Field(300.0, gt=0)
    loss_rate: float = Field(0.01, ge=0, le=1)
    bandwidth_Bps: float = Field(500_000.0, gt=0)
    verify_a_ms: float = Field(11.0, ge=0)
    verify_b_ms: float = Field(0.11, ge=0)
    duplicate_rate: float = Field(0.0, ge=0, le=1)
    # an attacked host never answers, so the sender waits this long
    connect_timeout_ms: float = Field(1000.0, gt=0)
    # a crashed process has closed its connections; a send to it fails locally
    dead_peer_ms: float = Field(1.0, ge=0)
    # base exclusion after a failed connection; None means half a round
    blacklist_ms: Optional[float] = Field(None, gt=0)
    # max Stage II messages verified per sender per round; 0 disables
    peer_rate_limit: int = Field(0, ge=0)


class SyncConfig(_Strict):
    # global stabilization time; None means synchronous from the start
    gst_ms: Optional[float] = Field(None, ge=0)
    delta_t_ms: float = Field(5000.0, gt=0)
    pre_gst_loss_rate: Optional[float] = Field(None, ge=0, le=1)
    pre_gst_extra_delay_ms: float = Field(0.0, ge=0)


class WorkloadConfig(_Strict):
    tps: float = Field(0.0, ge=0)
    txn_bytes: int = Field(250, gt=0)
    max_block_txns: int = Field(1000, ge=0)


class CryptoConfig(_Strict):
    # width used for byte accounting; the transparent tag itself is 32 bytes
    sig_bits: int = Field(2048, gt=0)
    counter_bits: Literal[8, 16, 32, 64] = 32
    # False skips tag recomputation (timing is still charged)
    verify: bool = True


class ScenarioConfig(_Strict):
    n_players: int = Field(ge=1)
    byzantine: ByzantineConfig = ByzantineConfig()
    adaptive: AdaptiveConfig = AdaptiveConfig()
    round: RoundConfig = RoundConfig()
    clock_skew_ms: float = Field(100.0, ge=0)
    q_numerator: int = Field(7, gt=0)
    fanout: int = Field(8, gt=0)
    connection_limit: int = Field(5, gt=0)
    net: NetConfig = NetConfig()
    sync: SyncConfig = SyncConfig()
    workload: WorkloadConfig = WorkloadConfig()
    crypto: CryptoConfig = CryptoConfig()
    seed: int = 0
    rounds: int = Field(10, ge=1)
    liveness_window: int = Field(10, ge=1)
    genesis_q: Optional[str] = None

    @model_validator(mode="after")
    def _check(self):
        f = fault_bound(self.n_players)
        b, c = self.byzantine.count, self.adaptive.count
        if b + c > f:
            raise ValueError(f"fault budget exceeded: b + c = {b + c} > f = {f} for N = {self.n_players}")
        if not isinstance(self.byzantine.behavior, str) and len(self.byzantine.behavior) != b:
            raise ValueError("byzantine.behavior list must have one entry per Byzantine player")
        if isinstance(self.adaptive.schedule, list):
            for w in self.adaptive.schedule:
                if len(w.targets) > c:
                    raise ValueError(f"attack window targets {len(w.targets)} players, budget is {c}")
                if any(not 0 <= t < self.n_players for t in w.targets):
                    raise ValueError("attack target out of range")
                if w.stop_ms < w.start_ms:
                    raise ValueError("attack window stops before it starts")
        elif self.adaptive.schedule == "chase_leaders" and c == 0:
            raise ValueError("chase_leaders needs adaptive.count > 0")
        if self.clock_skew_ms >= min(self.round.T1_ms, self.round.T2_ms):
            raise ValueError("clock skew must be smaller than a stage")
        if self.genesis_q is not None:
            try:
                raw = bytes.fromhex(self.genesis_q)
            except ValueError:
                raise ValueError("genesis_q must be hex") from None
            if len(raw) != 32:
                raise ValueError("genesis_q must be 32 bytes")
        return self

    @property
    def f(self) -> int:
        return fault_bound(self.n_players)

    @property
    def blacklist_base_ms(self) -> float:
        return self.net.blacklist_ms if self.net.blacklist_ms is not None else self.round.T_ms / 2

    def with_seed(self, seed: int) -> "ScenarioConfig":
        return self.model_copy(update={"seed": seed})

    def to_dict(self) -> dict:
        return self.model_dump(mode="json")


def parse_config(data: dict) -> ScenarioConfig:
    try:
        return ScenarioConfig.model_validate(data)
    except ValidationError as exc:
        raise ConfigError(str(exc)) from None


def load_config(path: Union[str, Path]) -> ScenarioConfig:
    p = Path(path)
    try:
        text = p.read_text()
    except OSError as exc:
        raise ConfigError(f"cannot read scenario {p}: {exc.strerror}") from None
    try:
        data = json.loads(text) if p.suffix == ".json" else yaml.safe_load(text)
    except (yaml.YAMLError, json.JSONDecodeError) as exc:
        raise ConfigError(f"cannot parse scenario {p}: {exc}") from None
    if not isinstance(data, dict):
        raise ConfigError(f"scenario {p} is not a key/value tree")
    return parse_config(data)
