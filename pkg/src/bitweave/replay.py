"""Proportional prioritized experience replay backed by a sum tree."""
from __future__ import annotations

from dataclasses import dataclass

import numpy as np


class SumTree:
    """Array-backed binary tree whose internal nodes hold the sum of their children.

    Leaves store priorities; prefix-sum search and updates are O(log capacity).
    """

    def __init__(self, capacity: int):
        if capacity < 1:
            raise ValueError("capacity must be positive")
        self.capacity = capacity
        size = 1
        while size < capacity:
            size *= 2
        self._leaves = size
        self.nodes = np.zeros(2 * size)

    @property
    def total(self) -> float:
        return float(self.nodes[1])

    def __getitem__(self, i: int) -> float:
        return float(self.nodes[self._leaves + i])

    def update(self, i: int, value: float) -> None:
        if not 0 <= i < self.capacity:
            raise IndexError(i)
        idx = self._leaves + i
        change = value - self.nodes[idx]
        while idx >= 1:
            self.nodes[idx] += change
            idx //= 2

    def find(self, mass: float) -> int:
        """Index of the leaf whose cumulative range contains ``mass``."""
        idx = 1
        while idx < self._leaves:
            left = 2 * idx
            if mass < self.nodes[left] or self.nodes[left + 1] <= 0:
                idx = left
            else:
                mass -= self.nodes[left]
                idx = left + 1
        return min(idx - self._leaves, self.capacity - 1)


@dataclass
class Transition:
    state: np.ndarray
    action: int
    reward: float
    next_state: np.ndarray
    done: bool
    next_mask: np.ndarray
    imagined: bool = False


class PrioritizedReplay:
    """Ring buffer sampled with probability proportional to ``priority ** alpha``."""

    def __init__(self, capacity: int, alpha: float = 0.6, priority_eps: float = 1e-6,
                 seed: int = 0):
        self.capacity = capacity
        self.alpha = alpha
        self.priority_eps = priority_eps
        self.tree = SumTree(capacity)
        self.data: list[Transition | None] = [None] * min(capacity, 1 << 16)
        self.next = 0
        self.size = 0
        self.max_priority = 1.0
        self.rng = np.random.default_rng(seed)

    def __len__(self):
        return self.size

    def add(self, tr: Transition) -> None:
        i = self.next
        if i >= len(self.data):
            self.data.extend([None] * min(len(self.data), self.capacity - len(self.data)))
        self.data[i] = tr
        self.tree.update(i, self.max_priority ** self.alpha)
        self.next = (i + 1) % self.capacity
        self.size = min(self.size + 1, self.capacity)

    def probabilities(self) -> np.ndarray:
        leaves = self.tree.nodes[self.tree._leaves:self.tree._leaves + self.size]
        return leaves / leaves.sum()

    def sample(self, batch_size: int, beta: float = 0.4):
        """Stratified proportional sample; returns ``(indices, transitions, weights)``.

        Weights are importance-sampling corrections normalised to a maximum of 1.
        """
        if self.size == 0:
            raise ValueError("cannot sample from an empty buffer")
        total = self.tree.total
        seg = total / batch_size
        idx = np.empty(batch_size, dtype=np.int64)
        for k in range(batch_size):
            mass = self.rng.uniform(seg * k, seg * (k + 1))
            i = self.tree.find(min(mass, total * (1 - 1e-12)))
            if i >= self.size:
                i = int(self.rng.integers(self.size))
            idx[k] = i
        probs = np.array([self.tree[i] for i in idx]) / total
        weights = (self.size * probs) ** (-beta)
        weights /= weights.max()
        return idx, [self.data[i] for i in idx], weights

    def update_priorities(self, idx, td_errors) -> None:
        for i, err in zip(idx, td_errors):
            p = abs(float(err)) + self.priority_eps
            self.max_priority = max(self.max_priority, p)
            self.tree.update(int(i), p ** self.alpha)
