"""Unprivileged keystroke-timing attackers.

Each attacker turns an emission log into a :class:`ProbeTrace` (what its
measurement loop records) and then into a :class:`DetectionResult` by
thresholding.  Probe loops are simulated event-driven: only probe rounds
that observe something are materialised.
"""

from __future__ import annotations

import csv
from dataclasses import dataclass, replace
from typing import Sequence

import numpy as np
from scipy.signal import find_peaks

from .metrics import DEFAULT_FRAME, FrameGrid, evaluate
from .simcore import CpuClock, ParameterError, convert, us
from .victim import Channel, Emissions, GroundTruth, IrqKind, PipelineModel

AUTO = "auto"


@dataclass(frozen=True)
class ProbeTrace:
    t: np.ndarray
    value: np.ndarray

    def __post_init__(self) -> None:
        t = np.asarray(self.t, dtype=np.int64)
        v = np.asarray(self.value, dtype=np.float64)
        if t.shape != v.shape:
            raise ParameterError("probe trace times and values differ in length")
        if t.size > 1 and np.any(np.diff(t) <= 0):
            raise ParameterError("probe trace times must be strictly increasing")
        object.__setattr__(self, "t", t)
        object.__setattr__(self, "value", v)

    def __len__(self) -> int:
        return int(self.t.size)

    def write_csv(self, fh) -> None:
        w = csv.writer(fh, lineterminator="\n")
        w.writerow(("t_ns", "value"))
        for t, v in zip(self.t.tolist(), self.value.tolist()):
            w.writerow((t, repr(v)))

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            self.write_csv(fh)


@dataclass(frozen=True)
class DetectionResult:
    times: np.ndarray
    scores: np.ndarray | None = None

    def __post_init__(self) -> None:
        t = np.asarray(self.times, dtype=np.int64)
        if t.size > 1 and np.any(np.diff(t) < 0):
            raise ParameterError("detection times must be sorted")
        object.__setattr__(self, "times", t)

    def __len__(self) -> int:
        return int(self.times.size)


@dataclass(frozen=True)
class AttackerConfig:
    """Probe loop parameters.  ``threshold`` is in the attacker's own unit, or ``"auto"``."""

    probe_interval: int
    threshold: float | str = AUTO
    n_sets: int = 5
    smooth_window: int = us(500)
    miss_prob: float = 0.0
    fp_rate: float = 0.0
    jitter: float = 0.10

    def __post_init__(self) -> None:
        if self.probe_interval <= 0:
            raise ParameterError("probe_interval must be positive")
        if self.n_sets < 1:
            raise ParameterError("n_sets must be at least 1")
        if not 0 <= self.miss_prob < 1:
            raise ParameterError("miss_prob must lie in [0, 1)")
        if self.fp_rate < 0:
            raise ParameterError("fp_rate must be non-negative")
        if not 0 <= self.jitter < 1:
            raise ParameterError("jitter must lie in [0, 1)")
        if self.smooth_window <= 0:
            raise ParameterError("smooth_window must be positive")
        if isinstance(self.threshold, str) and self.threshold.lower() != AUTO:
            raise ParameterError(f"threshold must be a number or {AUTO!r}")

    @property
    def auto(self) -> bool:
        return isinstance(self.threshold, str)


_DEFAULT_CLOCK = CpuClock()
RDTSC_DEFAULT = AttackerConfig(probe_interval=convert(_DEFAULT_CLOCK, 95), threshold=1000.0)
PROCFS_DEFAULT = AttackerConfig(probe_interval=convert(_DEFAULT_CLOCK, 980), threshold=0.5)
FLUSH_RELOAD_DEFAULT = AttackerConfig(probe_interval=us(1), threshold=0.5)
MULTI_PP_DEFAULT = AttackerConfig(probe_interval=us(50), threshold=AUTO)


def _probe_delay(n: int, cfg: AttackerConfig, gen) -> np.ndarray:
    """Wait from an event until the next probe round, probe rounds being jittered around the interval."""
    period = cfg.probe_interval * gen.uniform(1 - cfg.jitter, 1 + cfg.jitter, size=n)
    return np.floor(gen.random(n) * period).astype(np.int64)


def _observe(t_events: np.ndarray, cfg: AttackerConfig, gen) -> tuple[np.ndarray, np.ndarray]:
    """Probe-round times at which events become visible, with the number of events seen in each round."""
    t_events = np.sort(np.asarray(t_events, dtype=np.int64))
    seen = t_events + _probe_delay(t_events.size, cfg, gen)
    rounds: list[int] = []
    counts: list[int] = []
    for t, s in zip(t_events.tolist(), seen.tolist()):
        if rounds and t <= rounds[-1]:
            counts[-1] += 1  # landed before the pending probe round
        else:
            rounds.append(s)
            counts.append(1)
    return np.array(rounds, dtype=np.int64), np.array(counts, dtype=np.float64)


def _trim(trace: ProbeTrace, span: int | None) -> ProbeTrace:
    if span is None:
        return trace
    keep = trace.t < span
    return ProbeTrace(trace.t[keep], trace.value[keep])


def _merge_spurious(trace: ProbeTrace, t_extra: np.ndarray, value: float) -> ProbeTrace:
    if t_extra.size == 0:
        return trace
    t = np.concatenate([trace.t, t_extra])
    v = np.concatenate([trace.value, np.full(t_extra.size, value)])
    u, inv = np.unique(t, return_inverse=True)
    return ProbeTrace(u, np.bincount(inv, weights=v))


def apply_threshold(trace: ProbeTrace, threshold: float) -> DetectionResult:
    keep = trace.value > threshold
    return DetectionResult(trace.t[keep], trace.value[keep])


def best_threshold(scores: ProbeTrace, truth: GroundTruth, frame: int = DEFAULT_FRAME) -> float:
    """Threshold on ``scores`` maximising the frame F-score against ``truth``.

    Candidates are the midpoints between consecutive distinct scores plus one
    value below the minimum (detect everything).  Ties go to the higher
    threshold.
    """
    if len(scores) == 0:
        raise ParameterError("best_threshold needs at least one score")
    if len(truth) == 0:
        raise ParameterError("best_threshold needs at least one real keystroke")
    grid = FrameGrid.for_truth(truth, frame)
    order = np.argsort(-scores.value, kind="stable")
    v = scores.value[order]
    frames = scores.t[order] // frame
    _, first = np.unique(frames, return_index=True)
    new_frame = np.zeros(v.size, dtype=bool)
    new_frame[first] = True
    is_key = np.isin(frames, np.unique(truth.times // frame))
    tp = np.cumsum(new_frame & is_key)
    fp = np.cumsum(new_frame & ~is_key)
    # the last position of every run of equal scores is a candidate cut
    ends = np.flatnonzero(np.append(v[1:] != v[:-1], True))
    tp, fp = tp[ends], fp[ends]
    p = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
    r = tp / grid.k_real
    f = np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1), 0.0)
    best = int(np.argmax(f))  # first maximum = highest threshold
    distinct = v[ends]
    if best + 1 < distinct.size:
        return float((distinct[best] + distinct[best + 1]) / 2)
    return float(distinct[-1] - 1.0)


def _resolve_threshold(trace: ProbeTrace, cfg: AttackerConfig, calibration: GroundTruth | None, frame: int) -> float:
    if not cfg.auto:
        return float(cfg.threshold)
    if calibration is None:
        raise ParameterError("threshold=auto needs calibration ground truth")
    if len(trace) == 0:
        return float("inf")
    return best_threshold(trace, calibration, frame)


# -- interrupt timing -------------------------------------------------------


def record_interrupts(deltas, threshold: float) -> np.ndarray:
    """Indices of read-to-read deltas above ``threshold``.

    The literal recording loop: ``deltas[i]`` is ``tsc[i+1] - tsc[i]`` of
    consecutive timestamp reads, in cycles.
    """
    d = np.asarray(deltas)
    return np.flatnonzero(d > threshold)


def rdtsc_probe(emissions: Emissions, cfg: AttackerConfig, clock: CpuClock, gen, span: int | None = None) -> ProbeTrace:
    """Timestamp deltas of back-to-back counter reads that were stretched by interrupts.

    Interrupts arriving while another handler runs are queued behind it, so
    they lengthen the same read gap.  Returns ``(read time, delta in cycles)``.
    """
    irq = emissions.select(Channel.IRQ)
    starts, ends = [], []
    for t, b in zip(irq.t.tolist(), irq.busy.tolist()):
        if ends and t < ends[-1]:
            ends[-1] += b
        else:
            starts.append(t)
            ends.append(t + b)
    starts = np.array(starts, dtype=np.int64)
    ends = np.array(ends, dtype=np.int64)
    n = starts.size
    gap = np.round(cfg.probe_interval * gen.uniform(1 - cfg.jitter, 1 + cfg.jitter, size=n)).astype(np.int64)
    before = np.floor(gen.random(n) * gap).astype(np.int64)  # last read before the interrupt
    read = ends + (gap - before)
    delta_ns = read - (starts - before)
    trace = ProbeTrace(read, clock.ns_to_cycles_array(delta_ns))
    return _trim(trace, span)


def rdtsc_band(pipe: PipelineModel) -> tuple[float, float]:
    """Delta range, in cycles, attributed to the keyboard handler."""
    return 0.5 * pipe.isr_cycles, (pipe.isr_cycles + pipe.other_irq_cycles) / 2


def rdtsc_attack(
    emissions: Emissions,
    cfg: AttackerConfig,
    clock: CpuClock,
    gen,
    pipe: PipelineModel | None = None,
    calibration: GroundTruth | None = None,
    span: int | None = None,
    frame: int = DEFAULT_FRAME,
) -> DetectionResult:
    """Record deltas above the threshold and keep those in the keyboard-handler band."""
    pipe = pipe or PipelineModel()
    trace = rdtsc_probe(emissions, cfg, clock, gen, span)
    lo, hi = rdtsc_band(pipe)
    in_band = (trace.value >= lo) & (trace.value <= hi)
    candidates = ProbeTrace(trace.t[in_band], trace.value[in_band])
    return apply_threshold(candidates, _resolve_threshold(candidates, cfg, calibration, frame))


# -- procfs interrupt counters ----------------------------------------------


def procfs_probe(emissions: Emissions, cfg: AttackerConfig, gen, span: int | None = None) -> ProbeTrace:
    """Keyboard-counter increments seen by polling the per-IRQ statistics."""
    ticks = emissions.select(Channel.COUNTER, int(IrqKind.KEYBOARD))
    t, inc = _observe(ticks.t, cfg, gen)
    return _trim(ProbeTrace(t, inc), span)


def procfs_attack(
    emissions: Emissions,
    cfg: AttackerConfig,
    gen,
    calibration: GroundTruth | None = None,
    span: int | None = None,
    frame: int = DEFAULT_FRAME,
) -> DetectionResult:
    trace = procfs_probe(emissions, cfg, gen, span)
    return apply_threshold(trace, _resolve_threshold(trace, cfg, calibration, frame))


# -- Flush+Reload -----------------------------------------------------------


def flush_reload_probe(
    emissions: Emissions,
    target: int,
    cfg: AttackerConfig,
    gen,
    span: int,
    lines: Sequence[int] | None = None,
) -> ProbeTrace:
    """Reload hits on ``target``: one per probe round in which the line was touched since the flush."""
    if lines is not None and target not in set(int(x) for x in lines):
        raise ParameterError(f"target line {target:#x} is not a shared library line of the victim")
    touches = emissions.select(Channel.CACHE_LINE, target)
    t, hits = _observe(touches.t, cfg, gen)
    keep = gen.random(t.size) >= cfg.miss_prob
    trace = ProbeTrace(t[keep], np.ones(int(keep.sum())))
    n_fp = gen.poisson(cfg.fp_rate * span / 1e9)
    trace = _merge_spurious(trace, np.sort(gen.integers(0, span, size=n_fp)), 1.0)
    return _trim(trace, span)


def flush_reload_attack(
    emissions: Emissions,
    target: int,
    cfg: AttackerConfig,
    gen,
    span: int,
    lines: Sequence[int] | None = None,
    calibration: GroundTruth | None = None,
    frame: int = DEFAULT_FRAME,
) -> DetectionResult:
    trace = flush_reload_probe(emissions, target, cfg, gen, span, lines)
    return apply_threshold(trace, _resolve_threshold(trace, cfg, calibration, frame))


# -- Multi-Prime+Probe ------------------------------------------------------


def sliding_mean(x: np.ndarray, width: int) -> np.ndarray:
    """Centred moving average; the signal is zero-padded at both ends."""
    if width < 1:
        raise ParameterError("window width must be at least one sample")
    return np.convolve(np.asarray(x, dtype=np.float64), np.ones(width) / width, mode="same")


def multi_prime_probe_trace(
    emissions: Emissions, sets: Sequence[int], cfg: AttackerConfig, gen, span: int
) -> ProbeTrace:
    """Summed eviction activity over the monitored sets, smoothed over ``smooth_window``."""
    sets = [int(s) for s in sets]
    if not sets:
        raise ParameterError("Multi-Prime+Probe needs at least one cache set")
    if len(sets) != cfg.n_sets:
        raise ParameterError(f"expected {cfg.n_sets} sets, got {len(sets)}")
    n_est = int(span / cfg.probe_interval * 1.12) + 16
    steps = np.round(cfg.probe_interval * gen.uniform(1 - cfg.jitter, 1 + cfg.jitter, size=n_est)).astype(np.int64)
    grid = np.cumsum(steps)
    grid = grid[: np.searchsorted(grid, span) + 1]
    activity = np.zeros(grid.size, dtype=np.int32)
    touches = emissions.select(Channel.CACHE_SET, sets)
    for s in sets:  # fixed set order keeps the draw sequence reproducible
        idx = np.unique(np.searchsorted(grid, touches.t[touches.ident == s], side="left"))
        idx = idx[idx < grid.size]
        idx = idx[gen.random(idx.size) >= cfg.miss_prob]
        spurious = gen.integers(0, grid.size, size=gen.poisson(cfg.fp_rate * span / 1e9))
        hit = np.zeros(grid.size, dtype=bool)
        hit[idx] = True
        hit[spurious] = True
        activity += hit
    width = max(1, int(round(cfg.smooth_window / cfg.probe_interval)))
    return ProbeTrace(grid, sliding_mean(activity, width))


def activity_peaks(trace: ProbeTrace, radius: int, probe_interval: int) -> ProbeTrace:
    """Local maxima of the smoothed activity, keeping only the highest within ``radius`` ns."""
    distance = max(1, int(round(radius / probe_interval)))
    idx, _ = find_peaks(trace.value, height=1e-12, distance=distance)
    return ProbeTrace(trace.t[idx], trace.value[idx])


def multi_prime_probe_attack(
    emissions: Emissions,
    sets: Sequence[int],
    cfg: AttackerConfig,
    gen,
    span: int,
    calibration: GroundTruth | None = None,
    frame: int = DEFAULT_FRAME,
) -> DetectionResult:
    smoothed = multi_prime_probe_trace(emissions, sets, cfg, gen, span)
    peaks = _trim(activity_peaks(smoothed, frame, cfg.probe_interval), span)
    return apply_threshold(peaks, _resolve_threshold(peaks, cfg, calibration, frame))


ATTACKS = ("procfs", "rdtsc", "flush-reload", "multi-pp-kernel", "multi-pp-buffer")


def with_overrides(cfg: AttackerConfig, **kw) -> AttackerConfig:
    return replace(cfg, **{k: v for k, v in kw.items() if v is not None})
