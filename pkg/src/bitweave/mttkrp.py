"""Parallel MTTKRP over linearized tensors and the timing harness."""
from __future__ import annotations

import threading
import time
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field
from typing import Callable, Sequence

import numpy as np

from .linearize import EncodingPlan, LinearizedTensor, linearize
from .tensor import FactorMatrices, SparseTensorCoo

FACTOR_SEED = 0x5EED


@dataclass
class BenchConfig:
    rank: int = 16
    repeats: int = 10
    warmup: int = 1
    threads: int = 1
    reuse_threshold: float = 8.0
    seed: int = FACTOR_SEED

    def __post_init__(self):
        if self.rank < 1 or self.repeats < 1 or self.warmup < 0 or self.threads < 1:
            raise ValueError(f"invalid bench config {self}")
        if self.reuse_threshold < 1:
            raise ValueError("reuse threshold must be >= 1")


@dataclass
class BenchResult:
    mode_seconds: list[float]
    checksum: float
    samples: list[list[float]] = field(default_factory=list, repr=False)

    @property
    def total_seconds(self) -> float:
        return float(sum(self.mode_seconds))


class BenchTimeout(RuntimeError):
    """Benchmark exceeded its wall-clock budget; ``samples`` holds what finished."""

    def __init__(self, message, samples):
        super().__init__(message)
        self.samples = samples


def _partition(nnz: int, parts: int) -> list[tuple[int, int]]:
    edges = np.linspace(0, nnz, parts + 1).astype(np.int64)
    return [(int(a), int(b)) for a, b in zip(edges[:-1], edges[1:]) if b > a]


def _chunk_rows(lt: LinearizedTensor, factors: FactorMatrices, mode: int, start: int, stop: int):
    vals = lt.values[start:stop]
    rows = np.repeat(vals[:, None], factors.rank, axis=1)
    for k in range(len(lt.dims)):
        if k == mode:
            continue
        rows *= factors[k][lt.mode_coords(k, start, stop)]
    return lt.mode_coords(mode, start, stop), rows


def mttkrp_linearized(lt: LinearizedTensor, factors: FactorMatrices, mode: int,
                      threads: int = 1, reuse_threshold: float = 8.0,
                      strategy: str | None = None) -> np.ndarray:
    """Mode-``mode`` MTTKRP, decoding coordinates from positions on the fly.

    Nonzeros are split into contiguous position ranges, one per thread. When the
    expected fiber reuse ``nnz / I_n`` reaches ``reuse_threshold`` each thread
    accumulates privately and the buffers are summed pairwise; otherwise threads
    add straight into the shared output under a lock. ``strategy`` forces
    ``"reduction"`` or ``"atomic"``.
    """
    factors.check_dims(lt.dims)
    rows_out = lt.dims[mode]
    out = np.zeros((rows_out, factors.rank))
    if lt.nnz == 0:
        return out
    if strategy is None:
        strategy = "reduction" if lt.nnz / rows_out >= reuse_threshold else "atomic"
    if strategy not in ("reduction", "atomic"):
        raise ValueError(f"unknown strategy {strategy!r}")
    chunks = _partition(lt.nnz, max(1, threads))

    if len(chunks) == 1:
        idx, rows = _chunk_rows(lt, factors, mode, *chunks[0])
        np.add.at(out, idx, rows)
        return out

    if strategy == "reduction":
        def work(chunk):
            local = np.zeros_like(out)
            idx, rows = _chunk_rows(lt, factors, mode, *chunk)
            np.add.at(local, idx, rows)
            return local

        with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
            bufs = list(pool.map(work, chunks))
        while len(bufs) > 1:
            paired = [bufs[i] + bufs[i + 1] for i in range(0, len(bufs) - 1, 2)]
            if len(bufs) % 2:
                paired.append(bufs[-1])
            bufs = paired
        return bufs[0]

    lock = threading.Lock()

    def work_atomic(chunk):
        idx, rows = _chunk_rows(lt, factors, mode, *chunk)
        with lock:
            np.add.at(out, idx, rows)

    with ThreadPoolExecutor(max_workers=len(chunks)) as pool:
        list(pool.map(work_atomic, chunks))
    return out


def benchmark(t: SparseTensorCoo, plan: EncodingPlan, cfg: BenchConfig | None = None,
              timeout: float | None = None,
              clock: Callable[[], float] = time.perf_counter,
              lt: LinearizedTensor | None = None) -> BenchResult:
    """Time all-modes MTTKRP for ``plan``; per-mode medians over ``cfg.repeats``.

    Linearization and factor setup happen outside the timed region.
    """
    cfg = cfg or BenchConfig()
    if lt is None:
        lt = linearize(t, plan)
    factors = FactorMatrices.random(t.dims, cfg.rank, cfg.seed)
    order = len(t.dims)

    def run_once(samples):
        outs = []
        for n in range(order):
            t0 = clock()
            outs.append(mttkrp_linearized(lt, factors, n, cfg.threads, cfg.reuse_threshold))
            if samples is not None:
                samples[n].append(clock() - t0)
        return outs

    started = time.monotonic()
    for _ in range(cfg.warmup):
        run_once(None)
    samples: list[list[float]] = [[] for _ in range(order)]
    outs = []
    for _ in range(cfg.repeats):
        outs = run_once(samples)
        if timeout is not None and time.monotonic() - started > timeout:
            raise BenchTimeout(f"benchmark exceeded {timeout:.3g}s", samples)
    medians = [float(np.median(s)) for s in samples]
    checksum = float(sum(np.sum(o) for o in outs))
    return BenchResult(medians, checksum, samples)


class FakeClock:
    """Deterministic clock: each pair of reads spans the next scripted duration."""

    def __init__(self, durations: Sequence[float]):
        self._durations = list(durations)
        self._i = 0
        self._now = 0.0
        self._open = False

    def __call__(self) -> float:
        if self._open:
            self._now += self._durations[self._i % len(self._durations)]
            self._i += 1
        self._open = not self._open
        return self._now
