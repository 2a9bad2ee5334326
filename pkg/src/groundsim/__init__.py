"""Twin traffic microsimulators and grounded action transformation for
sim-to-real signal control."""

__version__ = "0.1.0"

from .scenario import (  # noqa: E402
    ConfigError, DomainContext, DynamicsProfile, ExperimentConfig, FlowSpec, RoadNetwork, RoadType, Weather,
    builtin_profile, default_context_for, load_config, loads_config,
)
from .sim import Engine  # noqa: E402
from .env import TrafficSignalEnv, run_fixed_time  # noqa: E402
from .agent import DQNAgent  # noqa: E402
from .oracle import DynamicsEstimate, DynamicsOracle, PromptContext, build_prompt, parse_response  # noqa: E402
from .gat import ForwardModel, InverseModel, ground_action, run_prompt_gat  # noqa: E402
from .metrics import GapReport, gap, gap_improvement, pearson  # noqa: E402

__all__ = [
    "ConfigError", "DomainContext", "DynamicsProfile", "ExperimentConfig", "FlowSpec", "RoadNetwork", "RoadType",
    "Weather", "builtin_profile", "default_context_for", "load_config", "loads_config", "Engine",
    "TrafficSignalEnv", "run_fixed_time", "DQNAgent", "DynamicsEstimate", "DynamicsOracle", "PromptContext",
    "build_prompt", "parse_response", "ForwardModel", "InverseModel", "ground_action", "run_prompt_gat",
    "GapReport", "gap", "gap_improvement", "pearson",
]
