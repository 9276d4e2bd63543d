"""Transition storage for off-policy updates."""

from __future__ import annotations

from dataclasses import dataclass

import numpy as np


@dataclass(frozen=True)
class Transition:
    state: np.ndarray
    action: np.ndarray
    reward: float
    next_state: np.ndarray
    terminal: bool


@dataclass
class TransitionBatch:
    states: np.ndarray  # (B, s_dim)
    actions: np.ndarray  # (B, a_dim)
    rewards: np.ndarray  # (B,)
    next_states: np.ndarray  # (B, s_dim)
    terminals: np.ndarray  # (B,) bool

    def __len__(self) -> int:
        return self.states.shape[0]


class ReplayBuffer:
    """Fixed-capacity ring of transitions with uniform sampling."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ValueError("capacity must be >= 1")
        self.capacity = int(capacity)
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.terminals = np.zeros(capacity, dtype=bool)
        self.size = 0
        self._pos = 0

    def add(self, t: Transition) -> None:
        if not (np.isfinite(t.state).all() and np.isfinite(t.action).all()
                and np.isfinite(t.reward) and np.isfinite(t.next_state).all()):
            raise ValueError("transition fields must be finite")
        i = self._pos
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.terminals[i] = t.terminal
        self._pos = (self._pos + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def sample(self, batch_size: int, rng: np.random.Generator) -> TransitionBatch:
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        idx = rng.integers(0, self.size, size=batch_size)
        return TransitionBatch(
            states=self.states[idx].copy(),
            actions=self.actions[idx].copy(),
            rewards=self.rewards[idx].copy(),
            next_states=self.next_states[idx].copy(),
            terminals=self.terminals[idx].copy(),
        )

    def state_dict(self) -> dict:
        n = self.size
        return {
            "capacity": self.capacity,
            "size": n,
            "pos": self._pos,
            "states": self.states[:n].copy(),
            "actions": self.actions[:n].copy(),
            "rewards": self.rewards[:n].copy(),
            "next_states": self.next_states[:n].copy(),
            "terminals": self.terminals[:n].copy(),
        }

    @classmethod
    def from_state_dict(cls, d: dict) -> "ReplayBuffer":
        buf = cls(d["capacity"], d["states"].shape[1], d["actions"].shape[1])
        n = d["size"]
        buf.states[:n] = d["states"]
        buf.actions[:n] = d["actions"]
        buf.rewards[:n] = d["rewards"]
        buf.next_states[:n] = d["next_states"]
        buf.terminals[:n] = d["terminals"]
        buf.size = n
        buf._pos = d["pos"]
        return buf
