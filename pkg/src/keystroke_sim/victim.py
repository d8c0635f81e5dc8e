"""Typing ground truth and the observable footprint of keystroke processing.

A keystroke travels through the interrupt handler, the input library and the
application's text buffer.  Each hop leaves traces an unprivileged attacker
can observe; :class:`Emissions` is the common currency handed to attackers.
"""

from __future__ import annotations

import enum
from dataclasses import dataclass, field
from typing import Iterator, Sequence

import numpy as np

from .simcore import CpuClock, ParameterError, convert, draw_gaussian, ms


class Channel(enum.IntEnum):
    IRQ = 0  # interrupt line activity, ident is an IrqKind
    COUNTER = 1  # per-kind interrupt counter increment, ident is an IrqKind
    CACHE_LINE = 2  # shared-memory line touch, ident is a line id
    CACHE_SET = 3  # cache set touch, ident is a set id


class IrqKind(enum.IntEnum):
    KEYBOARD = 0
    TIMER = 1
    OTHER = 2


class EventKind(enum.IntEnum):
    REAL = 0
    FAKE = 1


# Scancode the defense injects for fake keys (F16, no printable mapping).
RESERVED_KEY_CODE = 0x67
REAL_KEY_CODE = 0x1E


@dataclass(frozen=True)
class KeyEvent:
    t: int
    kind: EventKind = EventKind.REAL
    key_code: int = REAL_KEY_CODE

    def __post_init__(self) -> None:
        if self.t < 0:
            raise ParameterError("event time must be non-negative")
        if self.kind is EventKind.FAKE and self.key_code != RESERVED_KEY_CODE:
            raise ParameterError("fake events must carry the reserved key code")
        if self.kind is EventKind.REAL and self.key_code == RESERVED_KEY_CODE:
            raise ParameterError("the reserved key code is not available to real keys")


# -- typing -----------------------------------------------------------------


@dataclass(frozen=True)
class TypingModel:
    """Inter-keystroke interval law: truncated Gaussian in nanoseconds."""

    mean_interval: int = ms(125)
    sigma: int = ms(40)
    mode: str = "free-text"
    count: int | None = None
    min_interval: int = ms(30)

    def __post_init__(self) -> None:
        if self.mean_interval <= 0:
            raise ParameterError("mean_interval must be positive")
        if self.sigma < 0:
            raise ParameterError("sigma must be non-negative")
        if self.mode not in ("free-text", "fixed-count"):
            raise ParameterError(f"unknown typing mode {self.mode!r}")
        if self.mode == "fixed-count" and (self.count is None or self.count < 0):
            raise ParameterError("fixed-count mode needs a non-negative count")
        if not 0 < self.min_interval <= self.mean_interval:
            raise ParameterError("min_interval must lie in (0, mean_interval]")


TYPING_PRESETS = {
    # 8 keystrokes per second
    "skilled": TypingModel(mean_interval=ms(125), sigma=ms(40)),
    # 160-200 ms intervals
    "pinet": TypingModel(mean_interval=ms(180), sigma=ms(20)),
    # trained sequences, centred in the 125-215 ms range
    "lee-trained": TypingModel(mean_interval=ms(170), sigma=ms(43)),
    "lee-untrained": TypingModel(mean_interval=ms(215), sigma=ms(106)),
}


@dataclass(frozen=True)
class GroundTruth:
    times: np.ndarray
    span: int

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=np.int64)
        object.__setattr__(self, "times", t)
        if self.span <= 0:
            raise ParameterError("span must be positive")
        if t.size and (t[0] < 0 or t[-1] >= self.span):
            raise ParameterError("ground truth times must lie in [0, span)")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ParameterError("ground truth times must be strictly increasing")

    def __len__(self) -> int:
        return int(self.times.size)


def _draw_gaps(model: TypingModel, n: int, gen: np.random.Generator) -> np.ndarray:
    if n == 0:
        return np.zeros(0, dtype=np.int64)
    return draw_gaussian(gen, model.mean_interval, model.sigma, model.min_interval, size=n)


def generate_typing(model: TypingModel, span: int, gen: np.random.Generator) -> GroundTruth:
    """Real keystroke times over ``[0, span)``.

    Free-text mode types continuously from a random phase.  Fixed-count
    mode places exactly ``model.count`` keys at a random offset.
    """
    if span <= 0:
        raise ParameterError("span must be positive")
    if model.mode == "fixed-count":
        n = int(model.count)
        if n == 0:
            return GroundTruth(np.zeros(0, dtype=np.int64), span)
        if model.sigma == 0 and (n - 1) * model.mean_interval >= span:
            raise ParameterError(f"{n} keys at {model.mean_interval} ns spacing do not fit in {span} ns")
        for _ in range(1000):
            rel = np.concatenate([[0], np.cumsum(_draw_gaps(model, n - 1, gen))])
            if rel[-1] < span:
                break
        else:
            raise ParameterError(f"{n} keys practically never fit in {span} ns")
        offset = int(gen.integers(0, span - rel[-1]))
        return GroundTruth(rel + offset, span)

    first = int(gen.integers(0, model.mean_interval))
    # draw in chunks until the span is covered
    est = int(span // model.mean_interval) + 16
    times = [np.array([first], dtype=np.int64)]
    last = first
    while last < span:
        chunk = last + np.cumsum(_draw_gaps(model, est, gen))
        times.append(chunk)
        last = int(chunk[-1])
        est = max(16, est // 4)
    t = np.concatenate(times)
    return GroundTruth(t[t < span], span)


# -- pipeline footprint -----------------------------------------------------


@dataclass(frozen=True)
class PipelineModel:
    """Constants of the keystroke-processing pipeline and its environment."""

    isr_cycles: int = 60_000
    other_irq_cycles: int = 155_000
    timer_irq_cycles: int = 20_000
    other_irq_rate: float = 4.0
    # share of background interrupts whose handler costs about as much as the keyboard ISR
    lookalike_fraction: float = 0.25
    irq_jitter: float = 0.05
    lib_addresses: tuple[int, ...] = (0x381C0,)
    kernel_sets: tuple[int, ...] = (0x940, 0x941, 0x942, 0x943, 0x944)
    buffer_sets: tuple[int, ...] = (0x1A0, 0x1A1, 0x1A2, 0x1A3, 0x1A4)
    # bursty foreign accesses to each monitored set group
    cache_noise_rate: float = 0.0
    cache_noise_set_prob: float = 0.5
    cache_noise_spread: int = 200_000

    def __post_init__(self) -> None:
        for name in ("lib_addresses", "kernel_sets", "buffer_sets"):
            object.__setattr__(self, name, tuple(int(x) for x in getattr(self, name)))
        if not 0 < self.isr_cycles < self.other_irq_cycles:
            raise ParameterError("need 0 < isr_cycles < other_irq_cycles")
        if self.timer_irq_cycles <= 0:
            raise ParameterError("timer_irq_cycles must be positive")
        if self.other_irq_rate < 0 or self.cache_noise_rate < 0:
            raise ParameterError("rates must be non-negative")
        if not 0 <= self.lookalike_fraction <= 1 or not 0 <= self.cache_noise_set_prob <= 1:
            raise ParameterError("probabilities must lie in [0, 1]")
        if not 0 <= self.irq_jitter < 1:
            raise ParameterError("irq_jitter must lie in [0, 1)")
        if self.cache_noise_spread < 0:
            raise ParameterError("cache_noise_spread must be non-negative")
        groups = [set(self.lib_addresses), set(self.kernel_sets), set(self.buffer_sets)]
        if not all(groups):
            raise ParameterError("lib_addresses, kernel_sets and buffer_sets must be non-empty")
        if sum(map(len, groups)) != len(set().union(*groups)):
            raise ParameterError("lib_addresses, kernel_sets and buffer_sets must be pairwise disjoint")
        for g, name in zip(groups, ("lib_addresses", "kernel_sets", "buffer_sets")):
            if len(g) != len(getattr(self, name)):
                raise ParameterError(f"duplicate ids in {name}")


@dataclass(frozen=True)
class Emission:
    t: int
    channel: Channel
    ident: int
    busy_for: int = 0


_FIELDS = ("t", "channel", "ident", "busy", "origin")


@dataclass(frozen=True)
class Emissions:
    """Columnar, time-sorted emission log.

    ``origin`` is the index of the causing event in its stream (-1 for
    background activity).  It exists for analysis only; attackers never read it.
    """

    t: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    channel: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int8))
    ident: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    busy: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))
    origin: np.ndarray = field(default_factory=lambda: np.zeros(0, np.int64))

    def __len__(self) -> int:
        return int(self.t.size)

    def __iter__(self) -> Iterator[Emission]:
        for t, c, i, b in zip(self.t.tolist(), self.channel.tolist(), self.ident.tolist(), self.busy.tolist()):
            yield Emission(t, Channel(c), i, b)

    def select(self, channel: Channel, ident=None) -> "Emissions":
        mask = self.channel == channel
        if ident is not None:
            mask &= np.isin(self.ident, np.atleast_1d(ident))
        return self._take(mask)

    def _take(self, idx) -> "Emissions":
        return Emissions(*(getattr(self, f)[idx] for f in _FIELDS))

    def sorted(self) -> "Emissions":
        order = np.argsort(self.t, kind="stable")
        return self._take(order)

    @classmethod
    def concat(cls, parts: Sequence["Emissions"]) -> "Emissions":
        parts = [p for p in parts if len(p)]
        if not parts:
            return cls()
        return cls(*(np.concatenate([getattr(p, f) for p in parts]) for f in _FIELDS)).sorted()


def _make(t, channel, ident, busy, origin) -> Emissions:
    n = np.asarray(t).size
    return Emissions(
        np.asarray(t, dtype=np.int64).reshape(n),
        np.full(n, int(channel), dtype=np.int8),
        np.broadcast_to(np.asarray(ident, dtype=np.int64), (n,)).copy(),
        np.broadcast_to(np.asarray(busy, dtype=np.int64), (n,)).copy(),
        np.broadcast_to(np.asarray(origin, dtype=np.int64), (n,)).copy(),
    )


def irq_busy(cycles: int, n: int, pipe: PipelineModel, clock: CpuClock, gen=None) -> np.ndarray:
    """Handler busy time in ns, with +-``irq_jitter`` relative spread when a generator is given."""
    base = convert(clock, cycles)
    if gen is None or pipe.irq_jitter == 0:
        return np.full(n, base, dtype=np.int64)
    scale = gen.uniform(1 - pipe.irq_jitter, 1 + pipe.irq_jitter, size=n)
    return np.maximum(1, np.round(base * scale)).astype(np.int64)


def irq_emissions(times, kind: IrqKind, busy, origin) -> Emissions:
    return _make(times, Channel.IRQ, int(kind), busy, origin)


def counter_emissions(times, kind: IrqKind, origin) -> Emissions:
    return _make(times, Channel.COUNTER, int(kind), 0, origin)


def touch_emissions(times, ids: Sequence[int], channel: Channel, origin) -> Emissions:
    """One touch of every id at every time."""
    times = np.asarray(times, dtype=np.int64)
    ids = np.asarray(ids, dtype=np.int64)
    origin = np.broadcast_to(np.asarray(origin, dtype=np.int64), times.shape)
    return _make(
        np.repeat(times, ids.size),
        channel,
        np.tile(ids, times.size),
        0,
        np.repeat(origin, ids.size),
    )


def process_events(times, pipe: PipelineModel, clock: CpuClock, gen=None, origin=None) -> Emissions:
    """Undefended footprint of real keystrokes at ``times``."""
    times = np.asarray(times, dtype=np.int64)
    if origin is None:
        origin = np.arange(times.size)
    busy = irq_busy(pipe.isr_cycles, times.size, pipe, clock, gen)
    return Emissions.concat(
        [
            irq_emissions(times, IrqKind.KEYBOARD, busy, origin),
            counter_emissions(times, IrqKind.KEYBOARD, origin),
            touch_emissions(times, pipe.lib_addresses, Channel.CACHE_LINE, origin),
            touch_emissions(times, pipe.kernel_sets, Channel.CACHE_SET, origin),
            touch_emissions(times, pipe.buffer_sets, Channel.CACHE_SET, origin),
        ]
    )


def process_event(event: KeyEvent, pipe: PipelineModel, clock: CpuClock, gen=None) -> list[Emission]:
    """Footprint of a single keystroke without any defense in place.

    Fake events take the unused-key path: they raise the interrupt but never
    reach the library or the text buffer.
    """
    if event.kind is EventKind.REAL:
        return list(process_events([event.t], pipe, clock, gen))
    busy = irq_busy(pipe.isr_cycles, 1, pipe, clock, gen)
    t = [event.t]
    return list(
        Emissions.concat(
            [
                irq_emissions(t, IrqKind.KEYBOARD, busy, 0),
                counter_emissions(t, IrqKind.KEYBOARD, 0),
                touch_emissions(t, pipe.kernel_sets, Channel.CACHE_SET, 0),
            ]
        )
    )


def _poisson_times(rate: float, span: int, gen) -> np.ndarray:
    n = gen.poisson(rate * span / 1e9)
    return np.sort(gen.integers(0, span, size=n))


def inject_background(pipe: PipelineModel, span: int, gen, clock: CpuClock | None = None) -> Emissions:
    """Foreign activity: other interrupts and bursty accesses to monitored cache sets."""
    if span <= 0:
        raise ParameterError("span must be positive")
    clock = clock or CpuClock()
    parts = []
    t_irq = _poisson_times(pipe.other_irq_rate, span, gen)
    if t_irq.size:
        lookalike = gen.random(t_irq.size) < pipe.lookalike_fraction
        busy = np.where(
            lookalike,
            irq_busy(pipe.isr_cycles, t_irq.size, pipe, clock, gen),
            irq_busy(pipe.other_irq_cycles, t_irq.size, pipe, clock, gen),
        )
        parts.append(irq_emissions(t_irq, IrqKind.OTHER, busy, -1))
        parts.append(counter_emissions(t_irq, IrqKind.OTHER, -1))
    for group in (pipe.kernel_sets, pipe.buffer_sets):
        bursts = _poisson_times(pipe.cache_noise_rate, span, gen)
        if not bursts.size:
            continue
        ids = np.asarray(group, dtype=np.int64)
        hit = gen.random((bursts.size, ids.size)) < pipe.cache_noise_set_prob
        offs = gen.integers(0, pipe.cache_noise_spread + 1, size=hit.shape)
        t = (bursts[:, None] + offs)[hit]
        keep = t < span
        parts.append(_make(t[keep], Channel.CACHE_SET, np.broadcast_to(ids, hit.shape)[hit][keep], 0, -1))
    return Emissions.concat(parts)
