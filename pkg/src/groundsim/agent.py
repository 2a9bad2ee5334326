"""DQN policy over the four signal phases."""
from __future__ import annotations

import configparser
from collections import deque
from dataclasses import dataclass
from pathlib import Path
from typing import Callable

import numpy as np

from .neural import Adam, Mlp, MlpSpec, mse_loss
from .scenario import ExperimentConfig
from .streams import stream


class InsufficientDataError(RuntimeError):
    pass


@dataclass(frozen=True)
class Transition:
    s: np.ndarray
    a: int
    r: float
    s_next: np.ndarray
    done: bool


class ReplayBuffer:
    """Fixed-capacity FIFO of transitions."""

    def __init__(self, capacity: int = 5000):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = capacity
        self._items: deque[Transition] = deque(maxlen=capacity)

    def __len__(self) -> int:
        return len(self._items)

    def __iter__(self):
        return iter(self._items)

    def add(self, item: Transition) -> None:
        self._items.append(item)

    def sample(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        idx = rng.integers(len(self._items), size=batch_size)
        return [self._items[i] for i in idx]


@dataclass
class EpsilonSchedule:
    epsilon: float = 0.1
    decay: float = 0.99
    floor: float = 0.01

    def __post_init__(self):
        if not 0 <= self.floor <= self.epsilon <= 1:
            raise ValueError("need 0 <= floor <= epsilon <= 1")

    def step(self) -> float:
        self.epsilon = max(self.floor, self.epsilon * self.decay)
        return self.epsilon


class DQNAgent:
    """Q-network with a target copy, replay buffer and epsilon-greedy exploration.

    One call to :meth:`observe` per environment decision; once ``learning_start``
    decisions have been seen, every ``update_model_rate``-th decision runs a
    minibatch update, and the target network is synced every
    ``update_target_rate`` updates.
    """

    def __init__(self, n_obs: int = 16, n_actions: int = 4, hidden=(64, 64), lr: float = 1e-3,
                 gamma: float = 0.98, batch_size: int = 64, grad_clip: float = 0.5, buffer_size: int = 5000,
                 learning_start: int = 5000, update_model_rate: int = 1, update_target_rate: int = 5,
                 epsilon: EpsilonSchedule | None = None, seed: int = 0):
        self.spec = MlpSpec((n_obs, *hidden, n_actions))
        self.q = Mlp(self.spec, rng=stream(seed, "init", 0))
        self.target = self.q.copy()
        self.optimizer = Adam(lr=lr, grad_clip=grad_clip)
        self.gamma = gamma
        self.batch_size = batch_size
        self.buffer = ReplayBuffer(buffer_size)
        self.learning_start = learning_start
        self.update_model_rate = update_model_rate
        self.update_target_rate = update_target_rate
        self.schedule = epsilon if epsilon is not None else EpsilonSchedule()
        self.explore_rng = stream(seed, "explore")
        self.replay_rng = stream(seed, "replay")
        self.env_steps = 0
        self.updates = 0
        self.episodes = 0

    @classmethod
    def from_config(cls, config: ExperimentConfig, seed: int | None = None) -> "DQNAgent":
        d, t = config.dqn, config.trainer
        return cls(hidden=d.hidden, lr=d.learning_rate, gamma=d.gamma, batch_size=d.batch_size,
                   grad_clip=d.grad_clip, buffer_size=t.buffer_size, learning_start=t.learning_start,
                   update_model_rate=t.update_model_rate, update_target_rate=t.update_target_rate,
                   epsilon=EpsilonSchedule(d.epsilon, d.epsilon_decay, d.epsilon_min),
                   seed=config.seed if seed is None else seed)

    @property
    def epsilon(self) -> float:
        return self.schedule.epsilon

    def q_values(self, obs) -> np.ndarray:
        return self.q(obs)

    def act(self, obs, epsilon: float | None = None, rng: np.random.Generator | None = None) -> int:
        """Epsilon-greedy; greedy ties go to the lowest action index."""
        eps = self.schedule.epsilon if epsilon is None else epsilon
        rng = self.explore_rng if rng is None else rng
        n_actions = self.spec.n_out
        if eps > 0 and rng.random() < eps:
            return int(rng.integers(n_actions))
        return int(np.argmax(self.q(obs)))

    def observe(self, s, a, r, s_next, done) -> float | None:
        """Store a transition and train on the configured cadence. Returns the loss if trained."""
        self.buffer.add(Transition(np.asarray(s, dtype=np.float64), int(a), float(r),
                                   np.asarray(s_next, dtype=np.float64), bool(done)))
        self.env_steps += 1
        if self.env_steps >= self.learning_start and self.env_steps % self.update_model_rate == 0:
            return self.train_batch()
        return None

    def targets(self, batch: list[Transition]) -> np.ndarray:
        r = np.array([t.r for t in batch])
        done = np.array([t.done for t in batch])
        q_next = self.target(np.stack([t.s_next for t in batch])).max(axis=1)
        return r + self.gamma * np.where(done, 0.0, q_next)

    def train_batch(self) -> float:
        """One Adam step on MSE(Q(s, a), r + gamma * max_a' Q_target(s', a'))."""
        if len(self.buffer) == 0 or self.env_steps < self.learning_start:
            raise InsufficientDataError(
                f"buffer has {len(self.buffer)} transitions after {self.env_steps} steps; "
                f"learning starts at {self.learning_start}")
        batch = self.buffer.sample(self.batch_size, self.replay_rng)
        y = self.targets(batch)
        s = np.stack([t.s for t in batch])
        a = np.array([t.a for t in batch])
        rows = np.arange(len(batch))
        out, cache = self.q.forward(s)
        loss, g_sel = mse_loss(out[rows, a], y)
        g = np.zeros_like(out)
        g[rows, a] = g_sel
        grads, _ = self.q.backward(cache, g)
        self.q.apply_update(self.optimizer, grads)
        self.updates += 1
        if self.updates % self.update_target_rate == 0:
            self.sync_target()
        return loss

    def sync_target(self) -> None:
        self.target.load_from(self.q)

    def end_episode(self) -> None:
        self.episodes += 1
        self.schedule.step()

    def save(self, path: str | Path) -> None:
        """Weights to ``path``; epsilon and counters to ``path`` + ``.meta``."""
        path = Path(path)
        self.q.save(path)
        self.target.save(path.with_name(path.name + ".target"))
        meta = configparser.ConfigParser()
        meta["agent"] = {
            "epsilon": repr(self.schedule.epsilon), "epsilon_decay": repr(self.schedule.decay),
            "epsilon_min": repr(self.schedule.floor), "env_steps": str(self.env_steps),
            "updates": str(self.updates), "episodes": str(self.episodes), "gamma": repr(self.gamma),
        }
        with path.with_name(path.name + ".meta").open("w") as fh:
            meta.write(fh)

    def load(self, path: str | Path) -> "DQNAgent":
        path = Path(path)
        q = Mlp.load(path)
        if q.spec != self.spec:
            raise ValueError(f"checkpoint network {q.spec.widths} does not match agent {self.spec.widths}")
        self.q.load_from(q)
        target_path = path.with_name(path.name + ".target")
        self.target.load_from(Mlp.load(target_path) if target_path.exists() else q)
        meta_path = path.with_name(path.name + ".meta")
        if meta_path.exists():
            meta = configparser.ConfigParser()
            meta.read(meta_path)
            sec = meta["agent"]
            self.schedule.epsilon = float(sec["epsilon"])
            self.env_steps = int(sec["env_steps"])
            self.updates = int(sec["updates"])
            self.episodes = int(sec["episodes"])
        return self


ActionHook = Callable[[np.ndarray, int], int]


def run_episode(env, agent: DQNAgent, seed: int, train: bool = True, ground: ActionHook | None = None,
                epsilon: float | None = None, record: list | None = None,
                rng: np.random.Generator | None = None) -> list[float]:
    """Play one episode and return its per-step rewards.

    ``ground`` maps ``(obs, policy_action)`` to the action actually executed.
    The agent always learns from its own action. ``record`` collects
    ``(s, a_executed, s_next, r)`` tuples. ``rng`` replaces the agent's own
    exploration stream, so rollouts can explore without shifting training draws.
    """
    obs = env.reset(seed=seed)
    rewards = []
    eps = epsilon if epsilon is not None else (agent.epsilon if train else 0.0)
    while not env.done:
        a = agent.act(obs, epsilon=eps, rng=rng)
        executed = ground(obs, a) if ground is not None else a
        res = env.step(executed, policy_action=a)
        if train:
            agent.observe(obs, a, res.reward, res.next_obs, res.done)
        if record is not None:
            record.append((obs, executed, res.next_obs, res.reward))
        rewards.append(res.reward)
        obs = res.next_obs
    if train:
        agent.end_episode()
    return rewards
