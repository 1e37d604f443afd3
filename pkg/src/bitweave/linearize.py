"""Bit-interleaved linear encodings of tensor coordinates.

An encoding plan assigns every bit of the linear position, lowest first, to
the next unassigned low bit of one mode's coordinate. Modes are 0-based
internally; the text form of a plan uses 1-based mode ids.
"""
from __future__ import annotations

import math
from collections import Counter
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .tensor import SparseTensorCoo

MAX_WORD_BITS = 128
FACTORIAL_CAP = 4096


class PlanError(ValueError):
    """Raised when a plan does not match a bit budget."""


@dataclass(frozen=True)
class BitBudget:
    per_mode: tuple[int, ...]

    @property
    def total(self) -> int:
        return sum(self.per_mode)

    @property
    def order(self) -> int:
        return len(self.per_mode)

    @property
    def active_modes(self) -> tuple[int, ...]:
        return tuple(n for n, b in enumerate(self.per_mode) if b > 0)

    @property
    def word_bits(self) -> int:
        """Smallest native word (64 or 128 bits) that holds a position."""
        return 64 if self.total <= 64 else 128


def bit_budget(dims: Sequence[int]) -> BitBudget:
    per_mode = []
    for d in dims:
        d = int(d)
        if d < 1:
            raise ValueError(f"mode length must be >= 1, got {d}")
        per_mode.append((d - 1).bit_length())
    return BitBudget(tuple(per_mode))


def count_interleavings(budget: BitBudget | Sequence[int], cap: int = FACTORIAL_CAP) -> int:
    """Number of distinct interleavings: the multinomial total! / prod(bits!)."""
    per_mode = budget.per_mode if isinstance(budget, BitBudget) else tuple(budget)
    total = sum(per_mode)
    if total > cap:
        raise ValueError(f"bit total {total} exceeds factorial cap {cap}")
    count = math.factorial(total)
    for b in per_mode:
        count //= math.factorial(b)
    return count


@dataclass(frozen=True)
class EncodingPlan:
    """Sequence of 0-based mode picks, one per linear bit (LSB first)."""

    picks: tuple[int, ...]

    def __post_init__(self):
        object.__setattr__(self, "picks", tuple(int(p) for p in self.picks))

    def __len__(self):
        return len(self.picks)

    def counts(self, order: int) -> list[int]:
        c = [0] * order
        for p in self.picks:
            if not 0 <= p < order:
                raise PlanError(f"mode {p + 1} does not exist in an order-{order} tensor")
            c[p] += 1
        return c

    def validate(self, budget: BitBudget) -> "EncodingPlan":
        counts = self.counts(budget.order)
        for n, (got, want) in enumerate(zip(counts, budget.per_mode)):
            if got != want:
                raise PlanError(f"mode {n + 1} picked {got} times, its bit budget is {want}")
        return self

    def is_valid(self, budget: BitBudget) -> bool:
        try:
            self.validate(budget)
        except PlanError:
            return False
        return True

    def to_string(self) -> str:
        return ",".join(str(p + 1) for p in self.picks)

    @classmethod
    def from_string(cls, text: str) -> "EncodingPlan":
        text = text.strip()
        if not text:
            return cls(())
        try:
            picks = [int(tok) - 1 for tok in text.split(",")]
        except ValueError:
            raise PlanError(f"cannot parse plan {text!r}") from None
        if any(p < 0 for p in picks):
            raise PlanError(f"mode ids are 1-based, got {text!r}")
        return cls(tuple(picks))

    def __str__(self):
        return self.to_string()

    def bit_map(self) -> list[tuple[int, int]]:
        """``(mode, mode_bit)`` for every linear bit, lowest first."""
        seen: Counter = Counter()
        out = []
        for p in self.picks:
            out.append((p, seen[p]))
            seen[p] += 1
        return out


def alto_default_plan(budget: BitBudget) -> EncodingPlan:
    """Round-robin over modes from shortest to longest, low bits first.

    Ties in mode length go to the lower mode index; exhausted modes are skipped.
    """
    if budget.total < 1:
        raise ValueError("bit budget is empty")
    order = sorted(budget.active_modes, key=lambda n: (budget.per_mode[n], n))
    remaining = list(budget.per_mode)
    picks = []
    while len(picks) < budget.total:
        for n in order:
            if remaining[n]:
                picks.append(n)
                remaining[n] -= 1
    return EncodingPlan(tuple(picks))


def concatenated_plan(budget: BitBudget, mode_order: Sequence[int] | None = None) -> EncodingPlan:
    """All bits of each mode in turn; the first mode listed ends up least significant."""
    mode_order = range(budget.order) if mode_order is None else mode_order
    return EncodingPlan(tuple(n for n in mode_order for _ in range(budget.per_mode[n])))


def enumerate_plans(budget: BitBudget) -> Iterator[EncodingPlan]:
    """Yield every valid plan (distinct multiset permutations) in lexicographic order."""
    remaining = list(budget.per_mode)
    picks: list[int] = []
    total = budget.total

    def rec():
        if len(picks) == total:
            yield EncodingPlan(tuple(picks))
            return
        for n in range(budget.order):
            if remaining[n]:
                remaining[n] -= 1
                picks.append(n)
                yield from rec()
                picks.pop()
                remaining[n] += 1

    yield from rec()


def _runs(pairs: list[tuple[int, int]]) -> list[tuple[int, int, int]]:
    """Group ``(linear_bit, mode_bit)`` pairs into contiguous runs.

    Returns ``(linear_start, mode_start, length)`` so a run can be moved with a
    single shift and mask.
    """
    runs: list[list[int]] = []
    for t, k in pairs:
        if runs and runs[-1][0] + runs[-1][2] == t and runs[-1][1] + runs[-1][2] == k:
            runs[-1][2] += 1
        else:
            runs.append([t, k, 1])
    return [tuple(r) for r in runs]


@dataclass(frozen=True)
class ModeMask:
    """Linear bit positions holding one mode's coordinate bits."""

    mode: int
    bits: tuple[int, ...]
    runs: tuple[tuple[int, int, int], ...]

    @property
    def mask(self) -> int:
        m = 0
        for t in self.bits:
            m |= 1 << t
        return m


def mode_masks(plan: EncodingPlan, budget: BitBudget) -> tuple[ModeMask, ...]:
    per_mode: list[list[tuple[int, int]]] = [[] for _ in range(budget.order)]
    for t, (n, k) in enumerate(plan.bit_map()):
        per_mode[n].append((t, k))
    return tuple(
        ModeMask(n, tuple(t for t, _ in pairs), tuple(_runs(pairs)))
        for n, pairs in enumerate(per_mode)
    )


def encode(coords: Sequence[int], plan: EncodingPlan, budget: BitBudget) -> int:
    """Scatter coordinate bits into a linear position."""
    if len(coords) != budget.order:
        raise ValueError(f"expected {budget.order} coordinates, got {len(coords)}")
    for n, c in enumerate(coords):
        if not 0 <= c < (1 << budget.per_mode[n]):
            raise ValueError(f"coordinate {c} out of range for mode {n + 1}")
    p = 0
    for t, (n, k) in enumerate(plan.bit_map()):
        p |= ((int(coords[n]) >> k) & 1) << t
    return p


def decode(p: int, plan: EncodingPlan, budget: BitBudget) -> tuple[int, ...]:
    """Gather a linear position back into coordinates."""
    if not 0 <= p < (1 << budget.total):
        raise ValueError(f"position {p} needs more than {budget.total} bits")
    coords = [0] * budget.order
    for t, (n, k) in enumerate(plan.bit_map()):
        coords[n] |= ((p >> t) & 1) << k
    return tuple(coords)


def _position_dtype(budget: BitBudget):
    return np.uint64 if budget.total <= 64 else object


def encode_array(coords: np.ndarray, masks: Sequence[ModeMask], budget: BitBudget) -> np.ndarray:
    """Vectorised :func:`encode` over an ``(nnz, order)`` coordinate array."""
    dtype = _position_dtype(budget)
    pos = np.zeros(coords.shape[0], dtype=dtype)
    for mm in masks:
        col = coords[:, mm.mode].astype(dtype)
        for t0, k0, length in mm.runs:
            field_mask = (1 << length) - 1
            if dtype is object:
                pos |= ((col >> k0) & field_mask) << t0
            else:
                pos |= ((col >> np.uint64(k0)) & np.uint64(field_mask)) << np.uint64(t0)
    return pos


def extract_mode(pos: np.ndarray, mm: ModeMask) -> np.ndarray:
    """Recover one mode's coordinates from positions with shift-and-mask runs."""
    if pos.dtype == object:
        out = np.zeros(pos.shape[0], dtype=object)
        for t0, k0, length in mm.runs:
            out |= ((pos >> t0) & ((1 << length) - 1)) << k0
        return out.astype(np.int64)
    out = np.zeros(pos.shape[0], dtype=np.uint64)
    for t0, k0, length in mm.runs:
        out |= ((pos >> np.uint64(t0)) & np.uint64((1 << length) - 1)) << np.uint64(k0)
    return out.astype(np.int64)


@dataclass(frozen=True)
class LinearizedTensor:
    dims: tuple[int, ...]
    plan: EncodingPlan
    budget: BitBudget
    positions: np.ndarray
    values: np.ndarray
    masks: tuple[ModeMask, ...] = field(repr=False)

    @property
    def nnz(self) -> int:
        return int(self.values.shape[0])

    def mode_coords(self, mode: int, start: int = 0, stop: int | None = None) -> np.ndarray:
        return extract_mode(self.positions[start:stop], self.masks[mode])

    def storage_bytes(self) -> int:
        """Index words plus double-precision values."""
        return self.nnz * (self.budget.word_bits // 8 + 8)


def linearize(t: SparseTensorCoo, plan: EncodingPlan) -> LinearizedTensor:
    budget = bit_budget(t.dims)
    if budget.total > MAX_WORD_BITS:
        raise ValueError(f"{budget.total} index bits exceed the {MAX_WORD_BITS}-bit word limit")
    plan.validate(budget)
    masks = mode_masks(plan, budget)
    pos = encode_array(t.coords, masks, budget)
    order = np.argsort(pos, kind="stable")
    positions = pos[order]
    values = t.values[order]
    positions.setflags(write=False)
    values.setflags(write=False)
    return LinearizedTensor(t.dims, plan, budget, positions, values, masks)
