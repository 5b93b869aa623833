"""Global episode buffer with capacity eviction and weighted sampling without replacement."""

from __future__ import annotations

from collections import deque
from dataclasses import dataclass, field

import numpy as np


@dataclass
class EpisodeTransitionSet:
    """One agent's transitions from one episode, stored as stacked arrays.

    Row t holds (s_t, a_t, r_t, s_{t+1}, terminal_t). next_mask holds the
    feasible actions at s_{t+1}, used to restrict the bootstrap max.
    """

    agent: int
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    terminals: np.ndarray
    next_mask: np.ndarray | None = None
    distances: np.ndarray | None = None
    captures: int = 0
    epoch: int = 0
    scenario: str = ""
    entry_id: int = -1
    meta: dict = field(default_factory=dict)

    def __post_init__(self):
        self.states = np.asarray(self.states, dtype=np.float64)
        self.actions = np.asarray(self.actions, dtype=np.int64)
        self.rewards = np.asarray(self.rewards, dtype=np.float64)
        self.next_states = np.asarray(self.next_states, dtype=np.float64)
        self.terminals = np.asarray(self.terminals, dtype=bool)
        n = len(self.actions)
        if n == 0:
            raise ValueError("episode has no transitions")
        for name in ("states", "rewards", "next_states", "terminals"):
            if len(getattr(self, name)) != n:
                raise ValueError(f"{name} has {len(getattr(self, name))} rows, expected {n}")
        if self.next_mask is not None:
            self.next_mask = np.asarray(self.next_mask, dtype=bool)
        if self.distances is not None:
            self.distances = np.asarray(self.distances, dtype=np.float64)

    def __len__(self):
        return len(self.actions)

    @property
    def total_reward(self) -> float:
        return float(self.rewards.sum())

    def summary(self) -> dict:
        return {
            "entry_id": self.entry_id, "agent": self.agent, "epoch": self.epoch,
            "scenario": self.scenario, "length": len(self), "total_reward": self.total_reward,
            "mean_reward": float(self.rewards.mean()), "captures": int(self.captures),
        }


class GlobalBuffer:
    """Sliding window of the most recent max_cap episodes, evicted oldest first."""

    def __init__(self, max_cap: int = 64):
        if max_cap < 1:
            raise ValueError("max_cap must be positive")
        self.max_cap = int(max_cap)
        self.entries: deque[EpisodeTransitionSet] = deque()
        self.next_id = 0

    def __len__(self):
        return len(self.entries)

    def __getitem__(self, i) -> EpisodeTransitionSet:
        return self.entries[i]

    def __iter__(self):
        return iter(self.entries)

    @property
    def full(self) -> bool:
        return len(self.entries) >= self.max_cap

    def append(self, episode: EpisodeTransitionSet) -> "GlobalBuffer":
        if episode.entry_id < 0:
            episode.entry_id = self.next_id
        self.next_id = max(self.next_id, episode.entry_id + 1)
        self.entries.append(episode)
        while len(self.entries) > self.max_cap:
            self.entries.popleft()
        return self

    def snapshot(self) -> dict:
        rows = [e.summary() for e in self.entries]
        lengths = [r["length"] for r in rows]
        totals = [r["total_reward"] for r in rows]
        return {
            "size": len(rows), "max_cap": self.max_cap,
            "mean_length": float(np.mean(lengths)) if rows else 0.0,
            "mean_total_reward": float(np.mean(totals)) if rows else 0.0,
            "entries": rows,
        }


def sample_personalized(buffer, P, k_sample: int, rng: np.random.Generator) -> list[EpisodeTransitionSet]:
    return [buffer[i] for i in sample_indices(buffer, P, k_sample, rng)]


def sample_indices(buffer, P, k_sample: int, rng: np.random.Generator) -> list[int]:
    """Indices of k_sample distinct entries drawn one at a time with probability
    proportional to P among those not yet drawn."""
    P = np.asarray(P, dtype=np.float64)
    n = len(buffer)
    if P.shape != (n,):
        raise ValueError(f"P has shape {P.shape}, buffer holds {n} entries")
    if np.any(P < 0) or not np.all(np.isfinite(P)):
        raise ValueError("sampling probabilities must be finite and non-negative")
    if abs(P.sum() - 1.0) > 1e-9:
        raise ValueError(f"sampling probabilities sum to {P.sum()}, not 1")
    if not 1 <= k_sample <= n:
        raise ValueError(f"cannot draw {k_sample} of {n} entries")
    w = P.copy()
    picked = []
    for _ in range(k_sample):
        total = w.sum()
        if total <= 0.0:
            # remaining mass is zero: fall back to uniform over what is left
            w = np.where(w == 0.0, 1.0, 0.0)
            for i in picked:
                w[i] = 0.0
            total = w.sum()
        u = rng.random() * total
        i = int(np.searchsorted(np.cumsum(w), u, side="right"))
        i = min(i, n - 1)
        while w[i] == 0.0:
            i -= 1
        picked.append(i)
        w[i] = 0.0
    return picked
