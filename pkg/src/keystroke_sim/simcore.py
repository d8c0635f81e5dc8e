"""Simulation clock, event queue and seeded random streams.

All time values are integer nanoseconds.  Cycle counts only appear at the
edges (interrupt handler costs, probe intervals) and are translated through
:class:`CpuClock`.
"""

from __future__ import annotations

import hashlib
import heapq
import itertools
from dataclasses import dataclass, field
from typing import Any, Iterator

import numpy as np

NS_PER_US = 1_000
NS_PER_MS = 1_000_000
NS_PER_S = 1_000_000_000

DEFAULT_FREQ_HZ = 2_400_000_000

# Upper bound on a single simulated run; keeps int64 arithmetic far from overflow.
MAX_SPAN_NS = 10**15


class ParameterError(ValueError):
    """Raised for invalid model, attacker or experiment parameters."""


def ms(x: float) -> int:
    return int(round(x * NS_PER_MS))


def us(x: float) -> int:
    return int(round(x * NS_PER_US))


def seconds(x: float) -> int:
    return int(round(x * NS_PER_S))


def _div_round_half_up(num: int, den: int) -> int:
    return (2 * num + den) // (2 * den)


@dataclass(frozen=True)
class CpuClock:
    """Translates between CPU cycles and simulated nanoseconds."""

    freq_hz: int = DEFAULT_FREQ_HZ

    def __post_init__(self) -> None:
        if int(self.freq_hz) != self.freq_hz or self.freq_hz <= 0:
            raise ParameterError(f"freq_hz must be a positive integer, got {self.freq_hz!r}")

    def cycles_to_ns(self, cycles: int) -> int:
        return convert(self, cycles)

    def ns_to_cycles(self, ns: int) -> int:
        return _div_round_half_up(int(ns) * self.freq_hz, NS_PER_S)

    def ns_to_cycles_array(self, ns: np.ndarray) -> np.ndarray:
        return np.floor(np.asarray(ns, dtype=np.float64) * (self.freq_hz / NS_PER_S) + 0.5)


def convert(clock: CpuClock, cycles: int) -> int:
    """Cycle count to nanoseconds, ``round(cycles * 1e9 / freq_hz)`` with halves rounded up."""
    return _div_round_half_up(int(cycles) * NS_PER_S, clock.freq_hz)


# -- random streams ---------------------------------------------------------

SEED_MASK = (1 << 64) - 1


def _name_key(name: str) -> int:
    return int.from_bytes(hashlib.sha256(name.encode("utf-8")).digest()[:8], "little")


def derive_rng(seed: int, *names: str | int) -> np.random.Generator:
    """Independent generator for ``(seed, *names)``.

    Streams are keyed by hashing each name, so adding a new consumer never
    shifts the draws seen by existing ones.
    """
    if not 0 <= int(seed) <= SEED_MASK:
        raise ParameterError(f"seed must be a 64-bit unsigned integer, got {seed!r}")
    key = tuple(_name_key(n) if isinstance(n, str) else int(n) for n in names)
    return np.random.Generator(np.random.PCG64(np.random.SeedSequence(int(seed), spawn_key=key)))


def draw_uniform(gen: np.random.Generator, lo: int, hi: int, size: int | None = None):
    """Integer duration uniformly from the closed interval ``[lo, hi]``."""
    if lo > hi:
        raise ParameterError(f"uniform interval is empty: lo={lo} > hi={hi}")
    out = gen.integers(int(lo), int(hi) + 1, size=size, dtype=np.int64)
    return int(out) if size is None else out


def draw_gaussian(
    gen: np.random.Generator,
    mu: float,
    sigma: float,
    lo: float,
    size: int | None = None,
    hi: float | None = None,
):
    """Gaussian durations truncated to ``[lo, hi)`` by resampling.

    Resampling (rather than clipping) keeps the truncated law free of
    point masses at the bounds.
    """
    if sigma < 0:
        raise ParameterError(f"sigma must be non-negative, got {sigma}")
    if hi is not None and hi <= lo:
        raise ParameterError(f"truncation interval is empty: [{lo}, {hi})")
    n = 1 if size is None else int(size)
    if sigma == 0:
        if mu < lo or (hi is not None and mu >= hi):
            raise ParameterError(f"zero-variance draw mu={mu} lies outside [{lo}, {hi})")
        out = np.full(n, int(round(mu)), dtype=np.int64)
        return int(out[0]) if size is None else out
    mu_arr = np.broadcast_to(np.asarray(mu, dtype=np.float64), (n,))
    lo_arr = np.broadcast_to(np.asarray(lo, dtype=np.float64), (n,))
    hi_arr = None if hi is None else np.broadcast_to(np.asarray(hi, dtype=np.float64), (n,))
    out = np.empty(n, dtype=np.float64)
    todo = np.arange(n)
    for _ in range(10_000):
        if todo.size == 0:
            break
        x = np.round(gen.normal(mu_arr[todo], sigma))
        ok = x >= lo_arr[todo]
        if hi_arr is not None:
            ok &= x < hi_arr[todo]
        out[todo[ok]] = x[ok]
        todo = todo[~ok]
    else:
        raise ParameterError("truncation region has negligible probability mass")
    out = out.astype(np.int64)
    return int(out[0]) if size is None else out


# -- event queue -------------------------------------------------------------


@dataclass
class EventQueue:
    """Time-ordered queue; equal timestamps pop in insertion order."""

    _heap: list = field(default_factory=list)
    _counter: Iterator[int] = field(default_factory=itertools.count)

    def schedule(self, t: int, payload: Any) -> None:
        if t < 0:
            raise ParameterError(f"timestamps are non-negative, got {t}")
        heapq.heappush(self._heap, (int(t), next(self._counter), payload))

    def pop(self) -> tuple[int, Any]:
        t, _, payload = heapq.heappop(self._heap)
        return t, payload

    def peek_time(self) -> int | None:
        return self._heap[0][0] if self._heap else None

    def __len__(self) -> int:
        return len(self._heap)

    def __bool__(self) -> bool:
        return bool(self._heap)
