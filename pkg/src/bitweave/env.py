"""Encoding construction as an MDP, with speedup rewards and a reward cache."""
from __future__ import annotations

import logging
import math
import os
import threading
from dataclasses import dataclass
from typing import Callable, Iterator

import numpy as np

from .linearize import (BitBudget, EncodingPlan, LinearizedTensor, alto_default_plan,
                        bit_budget, count_interleavings)
from .mttkrp import BenchConfig, BenchResult, BenchTimeout, benchmark
from .tensor import SparseTensorCoo

log = logging.getLogger(__name__)

TIMEOUT_FACTOR = 5.0


class StateMatrix:
    """``order x total_bits`` one-hot matrix; column ``j`` names the mode feeding bit ``j``."""

    __slots__ = ("budget", "bits", "step", "row_counts")

    def __init__(self, budget: BitBudget, bits: np.ndarray | None = None):
        self.budget = budget
        if bits is None:
            bits = np.zeros((budget.order, budget.total), dtype=np.int8)
        self.bits = bits
        self.row_counts = bits.sum(axis=1).astype(np.int64)
        self.step = int(self.row_counts.sum())

    @property
    def is_terminal(self) -> bool:
        return self.step == self.budget.total

    @property
    def picks(self) -> tuple[int, ...]:
        return tuple(int(np.argmax(self.bits[:, j])) for j in range(self.step))

    def plan(self) -> EncodingPlan:
        if not self.is_terminal:
            raise ValueError("only terminal states define a plan")
        return EncodingPlan(self.picks)

    def valid_mask(self) -> np.ndarray:
        return self.row_counts < np.asarray(self.budget.per_mode)

    def __eq__(self, other):
        return (isinstance(other, StateMatrix) and self.budget == other.budget
                and np.array_equal(self.bits, other.bits))

    def __repr__(self):
        return f"StateMatrix(step={self.step}, picks={self.picks})"

    @classmethod
    def from_plan(cls, plan: EncodingPlan, budget: BitBudget) -> "StateMatrix":
        s = initial_state(budget)
        for a in plan.picks:
            s = transition(s, a)
        return s


def initial_state(budget: BitBudget) -> StateMatrix:
    return StateMatrix(budget)


def valid_actions(s: StateMatrix) -> list[int]:
    if s.is_terminal:
        raise ValueError("terminal state has no actions")
    return [int(n) for n in np.flatnonzero(s.valid_mask())]


def transition(s: StateMatrix, a: int) -> StateMatrix:
    if s.is_terminal or not 0 <= a < s.budget.order or s.row_counts[a] >= s.budget.per_mode[a]:
        raise ValueError(f"action {a + 1} is not valid in {s!r}")
    bits = s.bits.copy()
    bits[a, s.step] = 1
    return StateMatrix(s.budget, bits)


def state_space_size(budget: BitBudget) -> int:
    return count_interleavings(budget)


def enumerate_terminal_states(budget: BitBudget) -> Iterator[StateMatrix]:
    """Depth-first walk of every masked episode."""
    stack = [initial_state(budget)]
    while stack:
        s = stack.pop()
        if s.is_terminal:
            yield s
            continue
        for a in valid_actions(s):
            stack.append(transition(s, a))


@dataclass(frozen=True)
class RewardOutcome:
    speedup: float
    seconds: float
    cached: bool = False
    timed_out: bool = False


class RewardCache:
    """Thread-safe map from plan strings to measured speedups."""

    def __init__(self):
        self._lock = threading.Lock()
        self._data: dict[str, RewardOutcome] = {}

    def get(self, key: str) -> RewardOutcome | None:
        with self._lock:
            return self._data.get(key)

    def put(self, key: str, outcome: RewardOutcome) -> None:
        with self._lock:
            self._data[key] = outcome

    def __len__(self):
        with self._lock:
            return len(self._data)

    def __contains__(self, key):
        with self._lock:
            return key in self._data

    def items(self):
        with self._lock:
            return list(self._data.items())

    def save(self, path: str | os.PathLike) -> None:
        """Write ``plan;speedup;seconds`` lines; timed-out entries are not persisted."""
        with open(path, "w") as fh:
            for key, out in self.items():
                if not out.timed_out:
                    fh.write(f"{key};{out.speedup!r};{out.seconds!r}\n")

    def load(self, path: str | os.PathLike) -> int:
        n = 0
        with open(path) as fh:
            for line in fh:
                line = line.strip()
                if not line:
                    continue
                key, speedup, seconds = line.split(";")
                self.put(key, RewardOutcome(float(speedup), float(seconds)))
                n += 1
        return n


class Environment:
    """Common reward plumbing: cache, counters and the floor for timeouts.

    Subclasses implement :meth:`_evaluate`, returning ``(speedup, seconds)``.
    """

    def __init__(self, budget: BitBudget, alto_plan: EncodingPlan | None = None):
        self.budget = budget
        self.alto_plan = alto_plan or alto_default_plan(budget)
        self.cache = RewardCache()
        self.interactions = 0
        self.floor = 1.0
        self._eval_lock = threading.Lock()

    @property
    def baseline_seconds(self) -> float:
        return float("nan")

    def lookup(self, plan: EncodingPlan) -> RewardOutcome | None:
        hit = self.cache.get(plan.to_string())
        if hit is None:
            return None
        return RewardOutcome(hit.speedup, hit.seconds, True, hit.timed_out)

    def terminal_reward(self, plan: EncodingPlan) -> RewardOutcome:
        plan.validate(self.budget)
        key = plan.to_string()
        with self._eval_lock:
            hit = self.lookup(plan)
            if hit is not None:
                return hit
            self.interactions += 1
            try:
                speedup, seconds = self._evaluate(plan)
                out = RewardOutcome(speedup, seconds)
                self.floor = min(self.floor, speedup)
            except BenchTimeout as exc:
                log.warning("plan %s timed out: %s", key, exc)
                out = RewardOutcome(self.floor, math.inf, timed_out=True)
            self.cache.put(key, out)
            return out

    def _evaluate(self, plan: EncodingPlan) -> tuple[float, float]:
        raise NotImplementedError


class BenchmarkEnvironment(Environment):
    """Rewards are measured MTTKRP speedups over the default interleaving."""

    def __init__(self, tensor: SparseTensorCoo, cfg: BenchConfig | None = None,
                 clock: Callable[[], float] | None = None, tensor_id: str = "tensor"):
        super().__init__(bit_budget(tensor.dims))
        self.tensor = tensor
        self.tensor_id = tensor_id
        self.cfg = cfg or BenchConfig()
        self._clock_kw = {} if clock is None else {"clock": clock}
        self.baseline: BenchResult = self._bench(self.alto_plan)
        self.baseline_wall = self.baseline.total_seconds

    @property
    def baseline_seconds(self) -> float:
        return self.baseline.total_seconds

    def _bench(self, plan, timeout=None, lt: LinearizedTensor | None = None) -> BenchResult:
        return benchmark(self.tensor, plan, self.cfg, timeout=timeout, lt=lt, **self._clock_kw)

    def _evaluate(self, plan):
        runs = self.cfg.warmup + self.cfg.repeats
        cap = TIMEOUT_FACTOR * self.baseline_wall * runs + 1.0
        res = self._bench(plan, timeout=cap)
        return self.baseline.total_seconds / res.total_seconds, res.total_seconds


class SyntheticEnvironment(Environment):
    """Rewards from a pluggable ``plan -> speedup`` oracle; no timing involved."""

    def __init__(self, budget: BitBudget, oracle: Callable[[EncodingPlan], float],
                 alto_plan: EncodingPlan | None = None):
        super().__init__(budget, alto_plan)
        self.oracle = oracle

    def _evaluate(self, plan):
        speedup = float(self.oracle(plan))
        if not speedup > 0:
            raise ValueError(f"oracle returned non-positive speedup {speedup}")
        return speedup, 1.0 / speedup


def matching_oracle(hidden: EncodingPlan) -> Callable[[EncodingPlan], float]:
    """``exp(matches / total_bits)`` where matches counts picks agreeing with ``hidden``."""
    target = np.asarray(hidden.picks)

    def oracle(plan: EncodingPlan) -> float:
        matches = int(np.sum(np.asarray(plan.picks) == target))
        return math.exp(matches / len(target))

    return oracle
