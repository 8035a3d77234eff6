"""Deterministic network simulation of full Gosig rounds."""
from .adversary import BEHAVIORS, AdversaryScript
from .config import ConfigError, ScenarioConfig, load_config, parse_config
from .net import Blacklist, DownSchedule, LifoInbox, NetModel, RoundClock, gossip_send, pick_peers
from .scenario import ScenarioResult, Simulation, run_scenario
from .stage1 import Stage1Item, run_broadcast_rounds, run_stage1

__all__ = [
    "BEHAVIORS", "AdversaryScript", "ConfigError", "ScenarioConfig", "load_config", "parse_config",
    "Blacklist", "DownSchedule", "LifoInbox", "NetModel", "RoundClock", "gossip_send", "pick_peers",
    "ScenarioResult", "Simulation", "run_scenario", "Stage1Item", "run_broadcast_rounds", "run_stage1",
]
