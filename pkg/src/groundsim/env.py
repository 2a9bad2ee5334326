"""Decision-level environment around :class:`~groundsim.sim.Engine`.

The agent picks a phase every ``action_interval`` seconds; the reward is the
negated total queue over the 12 incoming lanes measured at the end of the
interval.
"""
from __future__ import annotations

from dataclasses import dataclass
from pathlib import Path
from typing import Sequence

import numpy as np

from .scenario import NUM_LANES, NUM_PHASES, Arrival, DynamicsProfile, ExperimentConfig, FlowSpec
from .sim import Engine

OBS_DIM = NUM_LANES + NUM_PHASES


class EpisodeDoneError(RuntimeError):
    pass


@dataclass(frozen=True)
class StepResult:
    next_obs: np.ndarray
    reward: float
    done: bool
    info: dict


@dataclass(frozen=True)
class EpisodeStats:
    att: float
    tp: int
    reward_mean: float
    queue_mean: float
    delay: float

    def as_dict(self) -> dict:
        return {"att": self.att, "tp": self.tp, "reward": self.reward_mean, "queue": self.queue_mean,
                "delay": self.delay}


class TrafficSignalEnv:
    """Single-intersection MDP.

    Parameters
    ----------
    config : ExperimentConfig
    profile : DynamicsProfile
        Dynamics of this world (``config.sim_profile`` for E_sim, ``config.real_profile`` for E_real).
    steps : int, optional
        Episode length in seconds; defaults to ``config.trainer.steps``.
    log_path : path, optional
        Write ``step,action,grounded_action,reward,total_queue`` per decision.
    """

    def __init__(self, config: ExperimentConfig, profile: DynamicsProfile, steps: int | None = None,
                 log_path: str | Path | None = None):
        self.config = config
        self.profile = profile
        self.steps = int(steps if steps is not None else config.trainer.steps)
        if self.steps % config.trainer.action_interval:
            raise ValueError("episode length must be a multiple of action_interval")
        self.action_interval = config.trainer.action_interval
        self.log_path = Path(log_path) if log_path is not None else None
        self.engine: Engine | None = None
        self._rewards: list[float] = []
        self._log: list[str] = []

    @property
    def n_actions(self) -> int:
        return NUM_PHASES

    @property
    def done(self) -> bool:
        return self.engine is not None and self.engine.clock >= self.steps

    def reset(self, seed: int | None = None, arrivals: Sequence[Arrival] | FlowSpec | None = None) -> np.ndarray:
        """Fresh engine at clock 0, phase 0, empty network."""
        if arrivals is None:
            arrivals = self.config.flow_for(self.steps)
        rng = np.random.default_rng(self.config.seed if seed is None else seed)
        self.engine = Engine(self.profile, self.config.network, arrivals,
                             yellow_length=self.config.trainer.yellow_length, rng=rng)
        self._rewards = []
        self._log = []
        return self.engine.observe()

    def step(self, action: int, policy_action: int | None = None) -> StepResult:
        """Apply ``action`` for one decision interval.

        ``policy_action`` is only used for the episode log, where it records the
        action the policy asked for before grounding.
        """
        if self.engine is None:
            raise EpisodeDoneError("call reset() first")
        if self.done:
            raise EpisodeDoneError("step after episode end")
        if not 0 <= int(action) < NUM_PHASES:
            raise ValueError(f"action {action} out of range 0..{NUM_PHASES - 1}")
        eng = self.engine
        eng.set_phase(int(action))
        eng.step(self.action_interval)
        queues = eng.queue_lengths()
        total = int(queues.sum())
        reward = -float(total)
        self._rewards.append(reward)
        if self.log_path is not None:
            asked = int(action) if policy_action is None else int(policy_action)
            self._log.append(f"{len(self._rewards) - 1},{asked},{int(action)},{reward!r},{total}")
        done = self.done
        if done and self.log_path is not None:
            self.log_path.parent.mkdir(parents=True, exist_ok=True)
            with self.log_path.open("a") as fh:
                fh.write("\n".join(self._log) + "\n")
        return StepResult(eng.observe(), reward, done, {"queues": queues})

    def episode_stats(self) -> EpisodeStats:
        if not self.done:
            raise EpisodeDoneError("episode_stats called before the episode finished")
        return compute_stats(self.engine, self._rewards)


def compute_stats(engine: Engine, rewards: Sequence[float]) -> EpisodeStats:
    tt = engine.travel_times()
    att = float(tt.mean()) if len(tt) else 0.0
    reward_mean = float(np.mean(rewards)) if len(rewards) else 0.0
    delay = engine.delay_sum / engine.delay_ticks if engine.delay_ticks else 0.0
    return EpisodeStats(att=att, tp=int(len(tt)), reward_mean=reward_mean,
                        queue_mean=-reward_mean if len(rewards) else 0.0, delay=float(delay))


def run_fixed_time(config: ExperimentConfig, profile: DynamicsProfile, cycle: int | None = None,
                   seed: int | None = None, steps: int | None = None,
                   arrivals: Sequence[Arrival] | FlowSpec | None = None) -> EpisodeStats:
    """Round-robin phases, ``cycle`` seconds each, switching at decision boundaries."""
    cycle = int(cycle if cycle is not None else config.trainer.fixed_cycle)
    if cycle < config.trainer.action_interval:
        raise ValueError("cycle must be >= action_interval")
    env = TrafficSignalEnv(config, profile, steps=steps)
    env.reset(seed=seed, arrivals=arrivals)
    k = 0
    while not env.done:
        env.step(fixed_time_phase(k, env.action_interval, cycle))
        k += 1
    return env.episode_stats()


def fixed_time_phase(step_index: int, action_interval: int, cycle: int) -> int:
    return (step_index * action_interval // cycle) % NUM_PHASES


def discounted_return(rewards: Sequence[float], gamma: float) -> float:
    """sum_t gamma^(T-t) r_t over an episode of length T+1."""
    T = len(rewards) - 1
    return float(sum(gamma ** (T - t) * r for t, r in enumerate(rewards))) if rewards else 0.0


class RelabeledEnv:
    """Wraps an environment so action ``a`` executes ``mapping[a]``.

    Gives a world whose dynamics differ from the base only by a known action
    permutation, which is a known-answer target for grounding.
    """

    def __init__(self, env: TrafficSignalEnv, mapping: Sequence[int]):
        mapping = [int(m) for m in mapping]
        if sorted(mapping) != list(range(env.n_actions)):
            raise ValueError(f"mapping must be a permutation of 0..{env.n_actions - 1}")
        self.env = env
        self.mapping = mapping

    def __getattr__(self, name):
        return getattr(self.env, name)

    def reset(self, seed: int | None = None, arrivals=None) -> np.ndarray:
        return self.env.reset(seed=seed, arrivals=arrivals)

    def step(self, action: int, policy_action: int | None = None) -> StepResult:
        asked = int(action) if policy_action is None else policy_action
        return self.env.step(self.mapping[int(action)], policy_action=asked)
