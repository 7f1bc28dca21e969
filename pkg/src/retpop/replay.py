"""Episode storage with uniform segment sampling and a JSON-lines file format.

File layout (``.traj.jsonl``): a header line
``{"magic": "RPOP-TRAJ", "version": 1}`` followed by one episode per line::

    {"id": 0, "K": 64, "seed": null,
     "blocks": [{"z": [...], "a": 3, "r": "0.5", "d": 0}, ...]}

Rewards are written as ``repr`` strings so floats survive the round trip
bit-for-bit.
"""

from __future__ import annotations

import json
import threading
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from .world_model import TokenTrajectory

MAGIC = "RPOP-TRAJ"
VERSION = 1


class FormatError(ValueError):
    pass


class NoEligibleSegment(LookupError):
    pass


@dataclass
class EpisodeRecord:
    blocks: TokenTrajectory
    episode_id: int = -1
    seed: int | None = None

    def validate(self) -> None:
        if len(self.blocks) == 0:
            raise ValueError("episode has no blocks")
        if self.blocks.dones[:-1].any():
            raise ValueError("done flag set before the final block")


class TrajectoryStore:
    """Append-only episode store. Appends are atomic per episode."""

    def __init__(self):
        self._episodes: dict[int, EpisodeRecord] = {}
        self._next_id = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return len(self._episodes)

    def __iter__(self):
        return iter(list(self._episodes.values()))

    def ids(self) -> list[int]:
        return list(self._episodes)

    def append_episode(self, episode, seed: int | None = None) -> int:
        if isinstance(episode, TokenTrajectory):
            episode = EpisodeRecord(episode, seed=seed)
        episode.validate()
        if self._episodes:
            K = next(iter(self._episodes.values())).blocks.K
            if episode.blocks.K != K:
                raise ValueError(f"episode has {episode.blocks.K} tokens per block, store holds {K}")
        with self._lock:
            eid = self._next_id
            self._next_id += 1
            self._episodes[eid] = EpisodeRecord(episode.blocks, eid, episode.seed)
        return eid

    def get(self, episode_id: int) -> EpisodeRecord:
        return self._episodes[episode_id]

    def _starts(self, length: int):
        eids = [e for e, rec in self._episodes.items() if len(rec.blocks) >= length]
        counts = np.array([len(self._episodes[e].blocks) - length + 1 for e in eids], dtype=np.int64)
        return eids, counts

    def sample_segment(self, length: int, seed=None) -> TokenTrajectory:
        """A segment of ``length`` consecutive blocks, uniform over all valid (episode, start) pairs."""
        if length < 1:
            raise ValueError("segment length must be >= 1")
        eids, counts = self._starts(length)
        if not eids:
            raise NoEligibleSegment(f"no episode holds {length} blocks")
        rng = seed if isinstance(seed, np.random.Generator) else np.random.default_rng(seed)
        pick = int(rng.integers(counts.sum()))
        which = int(np.searchsorted(np.cumsum(counts), pick, side="right"))
        start = pick - int(counts[:which].sum())
        return self._episodes[eids[which]].blocks[start:start + length]

    def save(self, path) -> None:
        lines = [json.dumps({"magic": MAGIC, "version": VERSION})]
        for rec in self:
            b = rec.blocks
            lines.append(json.dumps({
                "id": rec.episode_id,
                "K": b.K,
                "seed": rec.seed,
                "blocks": [
                    {"z": b.obs[t].tolist(), "a": int(b.actions[t]), "r": repr(float(b.rewards[t])), "d": int(b.dones[t])}
                    for t in range(len(b))
                ],
            }))
        Path(path).write_text("\n".join(lines) + "\n")

    @classmethod
    def load(cls, path) -> "TrajectoryStore":
        text = Path(path).read_text().splitlines()
        try:
            header = json.loads(text[0]) if text else None
        except json.JSONDecodeError as err:
            raise FormatError(f"{path}: unreadable header") from err
        if not isinstance(header, dict) or header.get("magic") != MAGIC:
            raise FormatError(f"{path}: not a trajectory store")
        if header.get("version") != VERSION:
            raise FormatError(f"{path}: unsupported version {header.get('version')!r}")
        records = []
        for lineno, line in enumerate(text[1:], start=2):
            if not line.strip():
                continue
            try:
                ep = json.loads(line)
                blocks = ep["blocks"]
                traj = TokenTrajectory(
                    np.array([blk["z"] for blk in blocks], dtype=np.int64).reshape(len(blocks), ep["K"]),
                    [blk["a"] for blk in blocks],
                    [float(blk["r"]) for blk in blocks],
                    [blk["d"] for blk in blocks],
                )
                rec = EpisodeRecord(traj, int(ep["id"]), ep.get("seed"))
                rec.validate()
            except (KeyError, TypeError, ValueError) as err:
                raise FormatError(f"{path}:{lineno}: malformed episode ({err})") from err
            records.append(rec)
        store = cls()
        for rec in records:
            if rec.episode_id in store._episodes:
                raise FormatError(f"{path}: duplicate episode id {rec.episode_id}")
            store._episodes[rec.episode_id] = rec
        store._next_id = max(store._episodes, default=-1) + 1
        return store
