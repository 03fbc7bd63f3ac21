"""Ring-buffer experience replay and env/model mixed sampling."""

from __future__ import annotations

from typing import NamedTuple

import numpy as np

from .envs import Transition
from .errors import ContractViolation, EmptyBuffer


class Batch(NamedTuple):
    states: np.ndarray
    actions: np.ndarray
    rewards: np.ndarray
    next_states: np.ndarray
    dones: np.ndarray

    def __len__(self) -> int:
        return len(self.rewards)

    @classmethod
    def from_transitions(cls, transitions) -> "Batch":
        if not transitions:
            raise ContractViolation("empty transition list")
        return cls(
            np.stack([t.state for t in transitions]),
            np.stack([t.action for t in transitions]),
            np.array([t.reward for t in transitions], dtype=np.float64),
            np.stack([t.next_state for t in transitions]),
            np.array([t.done for t in transitions], dtype=np.float64),
        )

    def to_transitions(self) -> list[Transition]:
        return [
            Transition(s, a, r, s2, bool(d))
            for s, a, r, s2, d in zip(self.states, self.actions, self.rewards, self.next_states, self.dones)
        ]

    @staticmethod
    def concat(a: "Batch", b: "Batch") -> "Batch":
        return Batch(*(np.concatenate([x, y]) for x, y in zip(a, b)))


class ReplayBuffer:
    """Fixed-capacity FIFO store of transitions, kept as flat arrays."""

    def __init__(self, capacity: int, state_dim: int, action_dim: int):
        if capacity < 1:
            raise ContractViolation("capacity must be positive")
        self.capacity = int(capacity)
        self.state_dim = state_dim
        self.action_dim = action_dim
        self.states = np.zeros((capacity, state_dim))
        self.actions = np.zeros((capacity, action_dim))
        self.rewards = np.zeros(capacity)
        self.next_states = np.zeros((capacity, state_dim))
        self.dones = np.zeros(capacity)
        self.write_index = 0
        self.count = 0

    def __len__(self) -> int:
        return self.count

    def push(self, t: Transition) -> None:
        if t.state.shape != (self.state_dim,) or t.next_state.shape != (self.state_dim,):
            raise ContractViolation(f"state dim mismatch: expected {self.state_dim}")
        if t.action.shape != (self.action_dim,):
            raise ContractViolation(f"action dim mismatch: expected {self.action_dim}")
        i = self.write_index
        self.states[i] = t.state
        self.actions[i] = t.action
        self.rewards[i] = t.reward
        self.next_states[i] = t.next_state
        self.dones[i] = float(t.done)
        self.write_index = (i + 1) % self.capacity
        self.count = min(self.count + 1, self.capacity)

    def push_batch(self, batch: Batch) -> None:
        n = len(batch)
        if batch.states.shape[1:] != (self.state_dim,) or batch.actions.shape[1:] != (self.action_dim,):
            raise ContractViolation("batch dims do not match buffer")
        if n >= self.capacity:
            batch = Batch(*(x[n - self.capacity :] for x in batch))
            n = self.capacity
        idx = (self.write_index + np.arange(n)) % self.capacity
        self.states[idx] = batch.states
        self.actions[idx] = batch.actions
        self.rewards[idx] = batch.rewards
        self.next_states[idx] = batch.next_states
        self.dones[idx] = batch.dones
        self.write_index = int((self.write_index + n) % self.capacity)
        self.count = min(self.count + n, self.capacity)

    def clear(self) -> None:
        self.write_index = 0
        self.count = 0

    def take(self, idx) -> Batch:
        idx = np.asarray(idx)
        return Batch(
            self.states[idx], self.actions[idx], self.rewards[idx], self.next_states[idx], self.dones[idx]
        )

    def sample(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if self.count == 0:
            raise EmptyBuffer("cannot sample from an empty buffer")
        return self.take(rng.integers(0, self.count, size=batch_size))

    def all(self) -> Batch:
        """Everything stored, oldest first."""
        if self.count < self.capacity:
            idx = np.arange(self.count)
        else:
            idx = (self.write_index + np.arange(self.capacity)) % self.capacity
        return self.take(idx)

    def dump(self, path) -> None:
        """Debug dump as a flat ``.npz`` file."""
        np.savez(path, **self.all()._asdict())


class MixedSampler:
    """Draws ``round(real_ratio * B)`` env transitions and the rest from the model buffer."""

    def __init__(self, env_buffer: ReplayBuffer, model_buffer: ReplayBuffer, real_ratio: float = 0.05):
        if not 0.0 <= real_ratio <= 1.0:
            raise ContractViolation("real_ratio must lie in [0, 1]")
        self.env_buffer = env_buffer
        self.model_buffer = model_buffer
        self.real_ratio = real_ratio

    def split(self, batch_size: int) -> tuple[int, int]:
        n_env_avail, n_model_avail = len(self.env_buffer), len(self.model_buffer)
        if n_env_avail == 0 and n_model_avail == 0:
            raise EmptyBuffer("both replay buffers are empty")
        if n_model_avail == 0:
            return batch_size, 0
        if n_env_avail == 0:
            return 0, batch_size
        n_env = int(round(self.real_ratio * batch_size))
        return n_env, batch_size - n_env

    def sample_batch(self, batch_size: int, rng: np.random.Generator) -> Batch:
        if batch_size < 1:
            raise ContractViolation("batch_size must be at least 1")
        n_env, n_model = self.split(batch_size)
        if n_model == 0:
            return self.env_buffer.sample(n_env, rng)
        if n_env == 0:
            return self.model_buffer.sample(n_model, rng)
        return Batch.concat(self.env_buffer.sample(n_env, rng), self.model_buffer.sample(n_model, rng))

    def sample_mixed(self, batch_size: int, rng: np.random.Generator) -> list[Transition]:
        return self.sample_batch(batch_size, rng).to_transitions()
