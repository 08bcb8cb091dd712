"""
Episode-structured replay storage.

Transitions are appended to an open episode; closing the episode computes its
returns-to-go and makes it sampleable. Eviction drops whole episodes, oldest
first, so a sampled window never spans a truncated or foreign episode.
"""

import logging
import threading
from typing import Dict, List

import numpy as np

from app.core.errors import PreconditionError, UsageError

logger = logging.getLogger(__name__)

FIELDS = ("obs", "actions", "rewards", "next_obs", "dones")


class TrajectoryBuffer:
    def __init__(self, capacity: int, obs_dim: int = 3, action_dim: int = 2):
        if capacity < 1:
            raise PreconditionError("buffer capacity must be positive")
        self.capacity = capacity
        self.obs_dim = obs_dim
        self.action_dim = action_dim
        self.episodes: List[Dict[str, np.ndarray]] = []
        self.total_steps = 0
        self._open: Dict[str, list] = {f: [] for f in FIELDS}
        self._next_id = 0
        self._lock = threading.Lock()

    def __len__(self) -> int:
        return self.total_steps

    @property
    def num_episodes(self) -> int:
        return len(self.episodes)

    def add(self, obs, action, reward: float, next_obs, done: bool) -> None:
        with self._lock:
            self._open["obs"].append(np.asarray(obs, dtype=float))
            self._open["actions"].append(np.asarray(action, dtype=float))
            self._open["rewards"].append(float(reward))
            self._open["next_obs"].append(np.asarray(next_obs, dtype=float))
            self._open["dones"].append(bool(done))

    def end_episode(self) -> int | None:
        """Close the open episode; returns its id, or None when it was empty."""
        with self._lock:
            if not self._open["obs"]:
                return None
            rewards = np.asarray(self._open["rewards"], dtype=float)
            episode = {
                "obs": np.stack(self._open["obs"]),
                "actions": np.stack(self._open["actions"]),
                "rewards": rewards,
                "next_obs": np.stack(self._open["next_obs"]),
                "dones": np.asarray(self._open["dones"], dtype=float),
                "rtg": returns_to_go(rewards),
                "id": self._next_id,
            }
            self._next_id += 1
            self.episodes.append(episode)
            self.total_steps += len(rewards)
            self._open = {f: [] for f in FIELDS}
            while self.total_steps > self.capacity and len(self.episodes) > 1:
                dropped = self.episodes.pop(0)
                self.total_steps -= len(dropped["rewards"])
                logger.debug("Evicted episode %d (%d steps)", dropped["id"], len(dropped["rewards"]))
            return episode["id"]

    def _check(self, batch_size: int):
        if not self.episodes:
            raise UsageError("cannot sample from a buffer without closed episodes")
        if batch_size > self.total_steps:
            raise UsageError(f"batch of {batch_size} exceeds buffer occupancy {self.total_steps}")

    def sample_transitions(self, batch_size: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """Uniform single-step transitions over every stored step."""
        with self._lock:
            self._check(batch_size)
            lengths = np.array([len(e["rewards"]) for e in self.episodes])
            starts = np.concatenate([[0], np.cumsum(lengths)[:-1]])
            flat = rng.integers(0, self.total_steps, size=batch_size)
            which = np.searchsorted(starts, flat, side="right") - 1
            batch = {f: np.stack([self.episodes[e][f][i] for e, i in zip(which, flat - starts[which])])
                     for f in FIELDS}
            batch["episode"] = np.array([self.episodes[e]["id"] for e in which])
            return batch

    def sample_windows(self, batch_size: int, k: int, rng: np.random.Generator) -> Dict[str, np.ndarray]:
        """
        Time-contiguous windows of length k. Episodes are drawn in proportion to
        their length and the start uniformly in [0, len - k]; episodes shorter
        than k are left-padded by repeating their first step.

        Besides the stored fields each window carries rtg, timesteps, and the
        one-step-shifted next_rtg / next_actions / next_timesteps (zero return
        and a repeated action past the episode end).
        """
        if k < 1:
            raise PreconditionError("window length must be >= 1")
        with self._lock:
            self._check(batch_size)
            lengths = np.array([len(e["rewards"]) for e in self.episodes], dtype=float)
            picks = rng.choice(len(self.episodes), size=batch_size, p=lengths / lengths.sum())
            out = {name: [] for name in FIELDS + ("rtg", "next_rtg", "next_actions", "timesteps",
                                                  "next_timesteps", "episode")}
            for e in picks:
                ep = self.episodes[e]
                n = len(ep["rewards"])
                t0 = int(rng.integers(0, n - k + 1)) if n >= k else n - k
                idx = np.maximum(np.arange(t0, t0 + k), 0)
                nxt = np.minimum(idx + 1, n - 1)
                for f in FIELDS + ("rtg",):
                    out[f].append(ep[f][idx])
                next_rtg = np.where(idx + 1 < n, ep["rtg"][nxt], 0.0)
                out["next_rtg"].append(next_rtg)
                out["next_actions"].append(ep["actions"][nxt])
                out["timesteps"].append(idx)
                out["next_timesteps"].append(idx + 1)
                out["episode"].append(ep["id"])
            return {name: np.stack(values) if name != "episode" else np.asarray(values)
                    for name, values in out.items()}

    def episode(self, i: int) -> Dict[str, np.ndarray]:
        return self.episodes[i]


def returns_to_go(rewards: np.ndarray) -> np.ndarray:
    """R_0 = sum(r), R_{t+1} = R_t - r_t, so the recursion holds exactly."""
    rtg = np.empty(len(rewards))
    running = float(np.sum(rewards))
    for t, r in enumerate(rewards):
        rtg[t] = running
        running -= r
    return rtg
