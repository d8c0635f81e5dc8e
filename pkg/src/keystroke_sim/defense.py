"""Fake-keystroke injection and the three layers that hide real keys among fakes.

Layer 1 injects keyboard interrupts from a randomly rescheduled timer and
gives real and fake keys the same interrupt footprint.  Layer 2 duplicates
every key event into a hidden window so the input library runs the same code
for both.  Layer 3 touches the text buffer on every event.
"""

from __future__ import annotations

from dataclasses import dataclass, field

import numpy as np

from .simcore import CpuClock, EventQueue, ParameterError, draw_uniform, ms, us
from .victim import (
    RESERVED_KEY_CODE,
    REAL_KEY_CODE,
    Channel,
    Emissions,
    EventKind,
    GroundTruth,
    IrqKind,
    KeyEvent,
    PipelineModel,
    counter_emissions,
    irq_busy,
    irq_emissions,
    process_events,
    touch_emissions,
)

LAYERS = frozenset({1, 2, 3})


@dataclass(frozen=True)
class DefenseConfig:
    enabled: bool = True
    inj_lo: int = 0
    inj_hi: int = ms(20)
    handler_delay_max: int = us(100)
    layers: frozenset = field(default=LAYERS)

    def __post_init__(self) -> None:
        object.__setattr__(self, "layers", frozenset(int(x) for x in self.layers))
        if not self.layers <= LAYERS:
            raise ParameterError(f"unknown defense layers {sorted(self.layers - LAYERS)}")
        if not 0 <= self.inj_lo <= self.inj_hi or self.inj_hi == 0:
            raise ParameterError("need 0 <= inj_lo <= inj_hi and inj_hi > 0")
        if self.handler_delay_max < 0:
            raise ParameterError("handler_delay_max must be non-negative")

    @property
    def injects(self) -> bool:
        return self.enabled and 1 in self.layers

    @property
    def rate(self) -> float:
        """Expected events per second of the injection timer."""
        return 2e9 / (self.inj_lo + self.inj_hi) if self.injects else 0.0


@dataclass(frozen=True)
class MergedStream:
    """Real and fake key events in time order."""

    times: np.ndarray
    kinds: np.ndarray
    span: int

    def __len__(self) -> int:
        return int(self.times.size)

    @property
    def is_real(self) -> np.ndarray:
        return self.kinds == EventKind.REAL

    @property
    def events(self) -> list[KeyEvent]:
        return [
            KeyEvent(t, EventKind(k), REAL_KEY_CODE if k == EventKind.REAL else RESERVED_KEY_CODE)
            for t, k in zip(self.times.tolist(), self.kinds.tolist())
        ]

    @classmethod
    def from_events(cls, events, span: int) -> "MergedStream":
        events = sorted(events, key=lambda e: e.t)
        return cls(
            np.array([e.t for e in events], dtype=np.int64),
            np.array([int(e.kind) for e in events], dtype=np.int8),
            span,
        )


def injection_loop(truth: GroundTruth, cfg: DefenseConfig, span: int, gen) -> MergedStream:
    """Merge real keys with timer-injected fakes.

    The timer restarts with a fresh uniform delay after every event, real or
    fake.  A disabled config passes the real keys through untouched.
    """
    real = np.asarray(truth.times, dtype=np.int64)
    if not cfg.injects:
        return MergedStream(real.copy(), np.zeros(real.size, dtype=np.int8), span)

    q = EventQueue()
    for i, t in enumerate(real.tolist()):
        q.schedule(t, ("key", i))
    chunk = max(64, int(span / max(1, (cfg.inj_lo + cfg.inj_hi) // 2)) + 64)
    delays = iter(())
    generation = 0

    def next_delay() -> int:
        nonlocal delays
        try:
            return next(delays)
        except StopIteration:
            delays = iter(draw_uniform(gen, cfg.inj_lo, cfg.inj_hi, size=chunk).tolist())
            return next(delays)

    q.schedule(next_delay(), ("timer", generation))
    times: list[int] = []
    kinds: list[int] = []
    while q:
        t, (what, tag) = q.pop()
        if t >= span:
            break
        if what == "timer":
            if tag != generation:
                continue  # superseded by a later restart
            kinds.append(EventKind.FAKE)
        else:
            kinds.append(EventKind.REAL)
        times.append(t)
        generation += 1
        q.schedule(t + next_delay(), ("timer", generation))
    return MergedStream(np.array(times, dtype=np.int64), np.array(kinds, dtype=np.int8), span)


def renewal_fakes(starts: np.ndarray, ends: np.ndarray, cfg: DefenseConfig, gen) -> tuple[np.ndarray, np.ndarray]:
    """Fake events of a timer restarted at each ``starts[i]`` and cut off at ``ends[i]``.

    Vectorised equivalent of :func:`injection_loop` for many independent
    segments.  Returns ``(segment index, time)`` arrays of the fakes with
    ``starts[i] < t < ends[i]``.
    """
    starts = np.asarray(starts, dtype=np.int64)
    ends = np.asarray(ends, dtype=np.int64)
    mean = (cfg.inj_lo + cfg.inj_hi) / 2
    seg_out, t_out = [], []
    todo = np.arange(starts.size)
    cur = starts.copy()
    while todo.size:
        width = int(np.max(ends[todo] - cur[todo]) / mean * 1.2) + 32
        width = min(width, max(32, 4_000_000 // todo.size))
        gaps = draw_uniform(gen, cfg.inj_lo, cfg.inj_hi, size=(todo.size, width))
        t = cur[todo, None] + np.cumsum(gaps, axis=1)
        ok = t < ends[todo, None]
        rows, _ = np.nonzero(ok)
        seg_out.append(todo[rows])
        t_out.append(t[ok])
        cur[todo] = t[:, -1]
        todo = todo[t[:, -1] < ends[todo]]
    seg = np.concatenate(seg_out) if seg_out else np.zeros(0, np.int64)
    tt = np.concatenate(t_out) if t_out else np.zeros(0, np.int64)
    order = np.lexsort((tt, seg))
    return seg[order], tt[order]


def _handler_delays(n: int, cfg: DefenseConfig, gen) -> np.ndarray:
    if cfg.handler_delay_max == 0:
        return np.zeros(n, dtype=np.int64)
    return draw_uniform(gen, 0, cfg.handler_delay_max, size=n)


def layer1_emissions(stream: MergedStream, pipe: PipelineModel, cfg: DefenseConfig, clock: CpuClock, gen) -> Emissions:
    """Keyboard and timer interrupt for every event, each after its own small random delay."""
    n = len(stream)
    origin = np.arange(n)
    t_kb = stream.times + _handler_delays(n, cfg, gen)
    t_tm = stream.times + _handler_delays(n, cfg, gen)
    return Emissions.concat(
        [
            irq_emissions(t_kb, IrqKind.KEYBOARD, irq_busy(pipe.isr_cycles, n, pipe, clock, gen), origin),
            irq_emissions(t_tm, IrqKind.TIMER, irq_busy(pipe.timer_irq_cycles, n, pipe, clock, gen), origin),
            counter_emissions(t_kb, IrqKind.KEYBOARD, origin),
            counter_emissions(t_tm, IrqKind.TIMER, origin),
            # spurious interrupts prefetch the rest of the handler, so the set footprint matches
            touch_emissions(t_kb, pipe.kernel_sets, Channel.CACHE_SET, origin),
        ]
    )


def layer2_duplicate(stream: MergedStream, pipe: PipelineModel) -> Emissions:
    """Library lines touched twice per event: the original path plus the hidden-window copy."""
    origin = np.arange(len(stream))
    once = touch_emissions(stream.times, pipe.lib_addresses, Channel.CACHE_LINE, origin)
    return Emissions.concat([once, once])


def layer3_touch(stream: MergedStream, pipe: PipelineModel, enabled: bool = True) -> Emissions:
    """Buffer sets touched for every event; only real keys touch them when the layer is off."""
    origin = np.arange(len(stream))
    mask = np.ones(len(stream), dtype=bool) if enabled else stream.is_real
    return touch_emissions(stream.times[mask], pipe.buffer_sets, Channel.CACHE_SET, origin[mask])


def defended_emissions(stream: MergedStream, pipe: PipelineModel, cfg: DefenseConfig, clock: CpuClock, gen) -> Emissions:
    """Footprint of a merged stream with the configured layers in place."""
    origin = np.arange(len(stream))
    real = stream.is_real
    if not cfg.enabled:
        return process_events(stream.times[real], pipe, clock, gen, origin=origin[real])
    parts = []
    if 1 in cfg.layers:
        parts.append(layer1_emissions(stream, pipe, cfg, clock, gen))
    else:
        t = stream.times
        busy = irq_busy(pipe.isr_cycles, t.size, pipe, clock, gen)
        parts += [
            irq_emissions(t, IrqKind.KEYBOARD, busy, origin),
            counter_emissions(t, IrqKind.KEYBOARD, origin),
            touch_emissions(t, pipe.kernel_sets, Channel.CACHE_SET, origin),
        ]
    if 2 in cfg.layers:
        parts.append(layer2_duplicate(stream, pipe))
    else:
        parts.append(touch_emissions(stream.times[real], pipe.lib_addresses, Channel.CACHE_LINE, origin[real]))
    parts.append(layer3_touch(stream, pipe, enabled=3 in cfg.layers))
    return Emissions.concat(parts)


def observable_features(stream: MergedStream, emissions: Emissions) -> dict[str, np.ndarray]:
    """Per-event features an attacker could measure, keyed by feature name.

    ``gap_prev`` is the time since the previous keyboard interrupt,
    ``busy`` the keyboard handler cost and ``n_emissions`` the size of the
    event's footprint.
    """
    n = len(stream)
    irq = emissions.select(Channel.IRQ, int(IrqKind.KEYBOARD))
    irq = irq._take(irq.origin >= 0)
    kb_time = np.full(n, -1, dtype=np.int64)
    busy = np.zeros(n, dtype=np.int64)
    kb_time[irq.origin] = irq.t
    busy[irq.origin] = irq.busy
    order = np.argsort(kb_time, kind="stable")
    gap = np.full(n, np.nan)
    gap[order[1:]] = np.diff(kb_time[order])
    counts = np.bincount(emissions.origin[emissions.origin >= 0], minlength=n)
    return {"gap_prev": gap, "busy": busy.astype(float), "n_emissions": counts.astype(float)}
