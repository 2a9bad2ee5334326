"""Seeded random streams.

Every random consumer gets its own generator derived from the run seed, a
fixed stream id and optional indices (episode number, rollout number), so
changing how one component draws never shifts another component's numbers.
"""
from __future__ import annotations

import numpy as np

STREAM_IDS = {
    "arrivals": 1,       # per-episode traffic, index = episode
    "explore": 2,        # epsilon-greedy draws
    "replay": 3,         # minibatch sampling for the DQN
    "init": 4,           # network weight initialization, index = model id
    "rollout": 5,        # data-collection rollouts, index = (world, iteration)
    "eval": 6,           # evaluation traffic
    "model_batches": 7,  # forward / inverse model minibatch order
}


def stream(seed: int, name: str, *index: int) -> np.random.Generator:
    return np.random.default_rng(np.random.SeedSequence([int(seed), STREAM_IDS[name], *map(int, index)]))


def episode_seed(seed: int, name: str, *index: int) -> int:
    """Integer seed for APIs that take a seed rather than a generator."""
    return int(stream(seed, name, *index).integers(2**63 - 1))
