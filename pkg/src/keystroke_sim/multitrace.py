"""Password recovery by averaging many perfectly aligned traces.

A strong attacker records the same password entry many times through a
noise-free channel that sees every real and fake keystroke.  Averaging the
aligned traces leaves Gaussian bumps at the real key positions on top of the
flat floor of injected events; a matched filter then picks the bumps out.
:func:`required_traces` measures how many traces that takes.
"""

from __future__ import annotations

import csv
import logging
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field, replace
from typing import Sequence

import numpy as np
from scipy.ndimage import gaussian_filter1d

from .defense import DefenseConfig, renewal_fakes
from .simcore import ParameterError, derive_rng, draw_gaussian, ms, seconds
from .victim import TypingModel, generate_typing

log = logging.getLogger(__name__)

RESULTS_CSV_HEADER = ("rep", "required_traces", "success_at_1825", "censored")
PROFILE_CSV_HEADER = ("bin_start_ns", "mass")


@dataclass(frozen=True)
class PasswordAttackParams:
    """Experiment knobs.

    ``tolerance`` is the allowed distance between a located peak and the
    real key; ``None`` means one ``sigma``, widened to one bin so that a
    zero-variance experiment can still succeed on a binned profile.
    """

    n_keys: int = 8
    span: int = seconds(2)
    sigma: int = ms(40)
    defense: DefenseConfig = field(default_factory=DefenseConfig)
    bin: int = ms(1)
    threshold_traces: int = 1825
    mean_interval: int = ms(200)
    tolerance: int | None = None
    max_traces: int = 8192
    burn_in: int = ms(200)
    votes: int = 3

    def __post_init__(self) -> None:
        if self.n_keys < 0:
            raise ParameterError("n_keys must be non-negative")
        if self.sigma < 0:
            raise ParameterError("sigma must be non-negative")
        if self.bin <= 0 or self.span <= 0 or self.span % self.bin:
            raise ParameterError("bin must be positive and divide span")
        if self.mean_interval <= 0:
            raise ParameterError("mean_interval must be positive")
        if self.sigma == 0 and self.n_keys * self.mean_interval > self.span:
            raise ParameterError(f"{self.n_keys} keys every {self.mean_interval} ns do not fit in {self.span} ns")
        if self.threshold_traces < 1 or self.max_traces < 1:
            raise ParameterError("trace counts must be positive")
        if self.tolerance is not None and self.tolerance < 0:
            raise ParameterError("tolerance must be non-negative")
        if self.burn_in < 0 or self.votes < 1 or self.votes % 2 == 0:
            raise ParameterError("burn_in must be non-negative and votes a positive odd number")

    @property
    def n_bins(self) -> int:
        return self.span // self.bin

    @property
    def match_tolerance(self) -> int:
        return max(self.sigma, self.bin) if self.tolerance is None else self.tolerance


@dataclass(frozen=True)
class AlignedTrace:
    """Unlabelled event times of one recording, relative to its start."""

    event_times: np.ndarray
    span: int

    def __post_init__(self) -> None:
        t = np.sort(np.asarray(self.event_times, dtype=np.int64))
        object.__setattr__(self, "event_times", t)
        if t.size and (t[0] < 0 or t[-1] >= self.span):
            raise ParameterError("trace events must lie in [0, span)")

    def __len__(self) -> int:
        return int(self.event_times.size)


@dataclass(frozen=True)
class DensityProfile:
    """Mean number of events per bin over a set of traces."""

    bins: np.ndarray
    bin: int
    span: int

    def __post_init__(self) -> None:
        b = np.asarray(self.bins, dtype=np.float64)
        object.__setattr__(self, "bins", b)
        if b.size * self.bin != self.span:
            raise ParameterError("profile bins must tile the span exactly")
        if np.any(b < 0):
            raise ParameterError("profile mass must be non-negative")

    @property
    def mass(self) -> float:
        return float(self.bins.sum())

    @property
    def starts(self) -> np.ndarray:
        return np.arange(self.bins.size, dtype=np.int64) * self.bin

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(PROFILE_CSV_HEADER)
            for s, m in zip(self.starts.tolist(), self.bins.tolist()):
                w.writerow((s, repr(float(m))))


# -- trace generation ---------------------------------------------------------


def canonical_schedule(params: PasswordAttackParams, gen) -> np.ndarray:
    """The password's key times, fixed for one experiment.

    Gaps follow the typing law but never drop below four sigma: two keys
    closer than that blur into one peak once jittered, and no number of
    traces separates them.  Keys are kept three sigma away from the trace
    edges when they fit, so the per-trace jitter is rarely truncated.
    """
    if params.n_keys == 0:
        return np.zeros(0, dtype=np.int64)
    margin = 3 * params.sigma
    need = (params.n_keys - 1) * params.mean_interval
    if need + 2 * margin >= params.span:
        margin = 0
    model = TypingModel(
        mean_interval=params.mean_interval,
        sigma=params.sigma,
        mode="fixed-count",
        count=params.n_keys,
        min_interval=min(max(4 * params.sigma, ms(30)), params.mean_interval),
    )
    return generate_typing(model, params.span - 2 * margin, gen).times + margin


def _trace_events(params: PasswordAttackParams, canon: np.ndarray, n: int, gen) -> tuple[np.ndarray, np.ndarray]:
    """``(trace index, time)`` of every event in ``n`` fresh traces."""
    k = canon.size
    if k and params.sigma == 0:
        keys = np.tile(canon, (n, 1))
    elif k:
        keys = draw_gaussian(gen, np.tile(canon, n), params.sigma, 0, size=n * k, hi=params.span).reshape(n, k)
        keys.sort(axis=1)
    else:
        keys = np.zeros((n, 0), dtype=np.int64)
    idx = [np.repeat(np.arange(n), k)]
    times = [keys.ravel()]
    if params.defense.injects:
        # the timer restarts at every real key; the burn-in makes the trace start stationary
        starts = np.concatenate([np.full((n, 1), -params.burn_in), keys], axis=1)
        ends = np.concatenate([keys, np.full((n, 1), params.span)], axis=1)
        seg, t = renewal_fakes(starts.ravel(), ends.ravel(), params.defense, gen)
        keep = t >= 0
        idx.append(seg[keep] // (k + 1))
        times.append(t[keep])
    return np.concatenate(idx), np.concatenate(times)


def simulate_password_traces(
    params: PasswordAttackParams, n_traces: int, gen, canon: np.ndarray | None = None
) -> tuple[list[AlignedTrace], np.ndarray]:
    """``n_traces`` recordings of one password entry and its canonical key times."""
    if n_traces < 1:
        raise ParameterError("n_traces must be positive")
    if canon is None:
        canon = canonical_schedule(params, gen)
    idx, times = _trace_events(params, np.asarray(canon, dtype=np.int64), n_traces, gen)
    order = np.lexsort((times, idx))
    idx, times = idx[order], times[order]
    cuts = np.searchsorted(idx, np.arange(1, n_traces))
    return [AlignedTrace(t, params.span) for t in np.split(times, cuts)], canon


def _binned(params: PasswordAttackParams, canon: np.ndarray, n: int, gen) -> np.ndarray:
    """Per-trace histograms as an ``(n, n_bins)`` count matrix."""
    idx, times = _trace_events(params, canon, n, gen)
    flat = idx * params.n_bins + times // params.bin
    counts = np.bincount(flat, minlength=n * params.n_bins).reshape(n, params.n_bins)
    dtype = np.uint8 if counts.max(initial=0) < 256 else np.uint16
    return counts.astype(dtype)


# -- averaging and peak location --------------------------------------------


def average_aligned(traces: Sequence[AlignedTrace], bin: int) -> DensityProfile:
    if not traces:
        raise ParameterError("need at least one trace")
    span = traces[0].span
    if any(t.span != span for t in traces):
        raise ParameterError("traces must share one span")
    if bin <= 0 or span % bin:
        raise ParameterError("bin must be positive and divide the span")
    all_times = np.concatenate([t.event_times for t in traces])
    counts = np.bincount(all_times // bin, minlength=span // bin)
    return DensityProfile(counts / len(traces), bin, span)


def locate_keystrokes(profile: DensityProfile, n_keys: int, sigma: int) -> np.ndarray:
    """Centres of the ``n_keys`` best Gaussian matches, ascending.

    The profile is correlated with a Gaussian of std ``sigma``; peaks are
    taken greedily, each one blanking ``2 * sigma`` (at least one bin)
    around it.
    """
    if n_keys < 1:
        raise ParameterError("n_keys must be positive")
    if sigma < 0:
        raise ParameterError("sigma must be non-negative")
    score = profile.bins
    if sigma > 0:
        score = gaussian_filter1d(score, sigma / profile.bin, mode="constant", truncate=4.0)
    score = score.copy()
    radius = max(1, int(2 * sigma // profile.bin))
    picks = []
    for _ in range(min(n_keys, score.size)):
        i = int(np.argmax(score))
        picks.append(i)
        score[max(0, i - radius) : i + radius + 1] = -np.inf
    while len(picks) < n_keys:  # more keys than bins: repeat the last pick
        picks.append(picks[-1])
    centres = np.asarray(picks, dtype=np.int64) * profile.bin + profile.bin // 2
    return np.sort(centres)


def attack_success(positions, truth, sigma: float) -> bool:
    """True iff the i-th position lies within ``sigma`` of the i-th key, both sorted."""
    p = np.sort(np.asarray(positions, dtype=np.int64))
    t = np.sort(np.asarray(truth, dtype=np.int64))
    if p.size != t.size:
        raise ParameterError(f"{p.size} positions for {t.size} keys")
    return bool(np.all(np.abs(p - t) <= sigma))


# -- required trace count ------------------------------------------------------


@dataclass(frozen=True)
class RepResult:
    rep: int
    required_traces: int
    success_at_threshold: bool
    censored: bool

    def row(self) -> tuple:
        return (self.rep, self.required_traces, str(self.success_at_threshold).lower(), str(self.censored).lower())


@dataclass(frozen=True)
class RequiredTraces:
    reps: tuple[RepResult, ...]
    threshold_traces: int

    @property
    def counts(self) -> np.ndarray:
        return np.array([r.required_traces for r in self.reps], dtype=np.int64)

    @property
    def mean(self) -> float:
        return float(self.counts.mean())

    def quantiles(self, qs=(0.25, 0.5, 0.75)) -> tuple[float, ...]:
        return tuple(float(x) for x in np.quantile(self.counts, qs))

    @property
    def exceeds_threshold(self) -> bool:
        return self.mean > self.threshold_traces

    @property
    def n_censored(self) -> int:
        return sum(r.censored for r in self.reps)

    def to_csv(self, path) -> None:
        with open(path, "w", newline="", encoding="utf-8") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(RESULTS_CSV_HEADER)
            for r in self.reps:
                w.writerow(r.row())


class _Probe:
    """Success test at a given trace count, against one fixed trace pool."""

    def __init__(self, params: PasswordAttackParams, pool: np.ndarray, canon: np.ndarray, gen):
        self.params, self.pool, self.canon, self.gen = params, pool, canon, gen

    def once(self, n: int) -> bool:
        p = self.params
        rows = self.gen.choice(self.pool.shape[0], size=n, replace=False)
        prof = DensityProfile(self.pool[rows].sum(axis=0, dtype=np.int64) / n, p.bin, p.span)
        return attack_success(locate_keystrokes(prof, p.n_keys, p.sigma), self.canon, p.match_tolerance)

    def __call__(self, n: int) -> bool:
        if n >= self.pool.shape[0]:
            return self.once(self.pool.shape[0])  # every subset is the whole pool
        wins = sum(self.once(n) for _ in range(self.params.votes))
        return 2 * wins > self.params.votes


def required_traces_once(params: PasswordAttackParams, gen, rep: int = 0) -> RepResult:
    """Smallest trace count at which the attack succeeds, for one password.

    Doubling finds a failing/succeeding bracket, then bisection narrows it.
    A search that still fails with the whole pool is censored at the pool
    size.
    """
    if params.n_keys < 1:
        raise ParameterError("the attack needs at least one key")
    canon = canonical_schedule(params, gen)
    pool = _binned(params, canon, params.max_traces, gen)
    ok = _Probe(params, pool, canon, gen)
    cap = params.max_traces
    lo, hi = 0, 1  # ok(lo) is treated as false, ok(hi) unknown
    while not ok(hi):
        if hi >= cap:
            return RepResult(rep, cap, ok(min(params.threshold_traces, cap)), True)
        lo, hi = hi, min(2 * hi, cap)
    while hi - lo > 1:
        mid = (lo + hi) // 2
        if ok(mid):
            hi = mid
        else:
            lo = mid
    return RepResult(rep, hi, ok(min(params.threshold_traces, cap)), False)


def _rep_task(args) -> RepResult:
    params, seed, rep = args
    return required_traces_once(params, derive_rng(seed, "multitrace", rep), rep)


def required_traces(params: PasswordAttackParams, seed: int, reps: int, jobs: int = 1) -> RequiredTraces:
    """Required-trace counts over ``reps`` independent passwords.

    Each repetition draws from its own seed stream, so results do not depend
    on ``jobs``.
    """
    if reps < 1:
        raise ParameterError("reps must be positive")
    tasks = [(params, seed, r) for r in range(reps)]
    if jobs > 1:
        with ProcessPoolExecutor(max_workers=jobs) as pool:
            results = list(pool.map(_rep_task, tasks))
    else:
        results = [_rep_task(t) for t in tasks]
    for r in results:
        log.debug("rep %d: %d traces%s", r.rep, r.required_traces, " (censored)" if r.censored else "")
    return RequiredTraces(tuple(results), params.threshold_traces)


def with_defense(params: PasswordAttackParams, enabled: bool) -> PasswordAttackParams:
    return replace(params, defense=replace(params.defense, enabled=enabled))
