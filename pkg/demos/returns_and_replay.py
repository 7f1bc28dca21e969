"""Storing episodes, sampling segments and scoring them.

Episodes go into a store, get written to disk and read back. Fixed-length
segments are then drawn uniformly over every valid start, and
lambda-returns turn rewards plus value guesses into training targets.
"""

import tempfile
from pathlib import Path

import numpy as np

from retpop.controller import lambda_returns
from retpop.replay import TrajectoryStore
from retpop.world_model import TokenTrajectory

rng = np.random.default_rng(5)
store = TrajectoryStore()
for length in (4, 9, 6):
    dones = np.zeros(length, dtype=int)
    dones[-1] = 1
    store.append_episode(TokenTrajectory(rng.integers(0, 512, (length, 64)), rng.integers(0, 18, length),
                                         rng.choice([-1.0, 0.0, 1.0], length), dones))

with tempfile.TemporaryDirectory() as tmp:
    path = Path(tmp) / "episodes.traj.jsonl"
    store.save(path)
    store = TrajectoryStore.load(path)
print("episodes on reload:", store.ids())

segment = store.sample_segment(5, seed=1)
values = rng.normal(size=len(segment) + 1)
print("rewards:", segment.rewards, "dones:", segment.dones)
print("lambda-returns:", np.round(lambda_returns(segment.rewards, segment.dones, values), 3))
