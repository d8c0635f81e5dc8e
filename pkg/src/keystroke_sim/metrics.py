"""Frame-based scoring of keystroke detections and the zero-information baselines."""

from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.stats import rankdata

from .simcore import ParameterError, ms

DEFAULT_FRAME = ms(10)


@dataclass(frozen=True)
class FrameGrid:
    frame: int
    span: int
    k_real: int

    def __post_init__(self) -> None:
        if self.frame <= 0 or self.span <= 0:
            raise ParameterError("frame and span must be positive")
        if not 0 <= self.k_real <= self.n_frames:
            raise ParameterError("k_real must lie in [0, n_frames]")

    @property
    def n_frames(self) -> int:
        return -(-self.span // self.frame)

    @classmethod
    def for_truth(cls, truth, frame: int = DEFAULT_FRAME) -> "FrameGrid":
        k = np.unique(np.asarray(truth.times) // frame).size
        return cls(frame, truth.span, k)


@dataclass(frozen=True)
class Metrics:
    tp: int
    fp: int
    fn: int
    precision: float
    recall: float
    fscore: float
    advantage_pct: float = float("nan")

    @classmethod
    def from_counts(cls, tp: int, fp: int, fn: int, grid: FrameGrid | None = None) -> "Metrics":
        p = tp / (tp + fp) if tp + fp else 0.0
        r = tp / (tp + fn) if tp + fn else 0.0
        f = fscore(p, r)
        adv = advantage(f, grid) if grid is not None and grid.k_real > 0 else float("nan")
        return cls(tp, fp, fn, p, r, f, adv)


def fscore(p: float, r: float) -> float:
    """Harmonic mean of precision and recall."""
    if not (0 <= p <= 1 and 0 <= r <= 1):
        raise ParameterError("precision and recall must lie in [0, 1]")
    return 0.0 if p + r == 0 else 2 * p * r / (p + r)


def _frames(times, frame: int) -> np.ndarray:
    return np.unique(np.asarray(times, dtype=np.int64) // frame)


def evaluate(det_times, truth, grid: FrameGrid | None = None) -> Metrics:
    """Score detections against ground truth per time frame.

    Several detections in one frame count once.  A frame holding both a
    detection and a real key is a true positive.
    """
    grid = grid or FrameGrid.for_truth(truth)
    times = getattr(det_times, "times", det_times)
    d = _frames(times, grid.frame)
    t = _frames(truth.times, grid.frame)
    tp = int(np.intersect1d(d, t, assume_unique=True).size)
    return Metrics.from_counts(tp, int(d.size) - tp, int(t.size) - tp, grid)


def evaluate_per_detection(det_times, truth, grid: FrameGrid | None = None) -> Metrics:
    """Detection-level variant: every detection is scored, none are merged.

    The first detection in a key frame is the true positive, any others in
    that frame are false positives.  Reported alongside :func:`evaluate` for
    comparison with detection-count precision figures.
    """
    grid = grid or FrameGrid.for_truth(truth)
    times = np.asarray(getattr(det_times, "times", det_times), dtype=np.int64)
    t = _frames(truth.times, grid.frame)
    tp = int(np.intersect1d(_frames(times, grid.frame), t, assume_unique=True).size)
    return Metrics.from_counts(tp, int(times.size) - tp, int(t.size) - tp, grid)


def always_one(grid: FrameGrid) -> Metrics:
    """Detector that fires in every frame."""
    if grid.k_real < 1:
        raise ParameterError("always-one precision is undefined without real keys")
    return Metrics.from_counts(grid.k_real, grid.n_frames - grid.k_real, 0, grid)


def always_one_fscore(k: int, n: int) -> float:
    return 2 * k / (n + k)


def advantage(f: float, grid: FrameGrid) -> float:
    """Relative F-score gain over the always-one detector, in percent."""
    if grid.k_real < 1:
        raise ParameterError("advantage needs at least one real key frame")
    return (f / always_one_fscore(grid.k_real, grid.n_frames) - 1) * 100


def random_guess(grid: FrameGrid, p_guess: float, gen, trials: int) -> Metrics:
    """Monte Carlo mean of a detector firing independently per frame with probability ``p_guess``.

    Counts are per-trial means rounded to integers; rates are per-trial means.
    """
    if not 0 <= p_guess <= 1:
        raise ParameterError("p_guess must lie in [0, 1]")
    if trials < 1:
        raise ParameterError("trials must be positive")
    k, n = grid.k_real, grid.n_frames
    tp = gen.binomial(k, p_guess, size=trials)
    fp = gen.binomial(n - k, p_guess, size=trials)
    fn = k - tp
    with np.errstate(invalid="ignore", divide="ignore"):
        p = np.where(tp + fp > 0, tp / np.maximum(tp + fp, 1), 0.0)
        r = np.where(k > 0, tp / max(k, 1), 0.0)
        f = np.where(p + r > 0, 2 * p * r / np.where(p + r > 0, p + r, 1), 0.0)
    fm = float(f.mean())
    adv = advantage(fm, grid) if k > 0 else float("nan")
    return Metrics(
        int(round(tp.mean())), int(round(fp.mean())), int(round(fn.mean())), float(p.mean()), float(r.mean()), fm, adv
    )


def auc(positive, negative) -> float:
    """Area under the ROC curve of ``score > threshold`` separating the two samples (ties count half)."""
    pos = np.asarray(positive, dtype=float)
    neg = np.asarray(negative, dtype=float)
    if pos.size == 0 or neg.size == 0:
        raise ParameterError("AUC needs both classes")
    ranks = rankdata(np.concatenate([pos, neg]))
    u = ranks[: pos.size].sum() - pos.size * (pos.size + 1) / 2
    return float(u / (pos.size * neg.size))


def separability(positive, negative) -> float:
    """Best AUC of a one-feature threshold rule in either direction."""
    a = auc(positive, negative)
    return max(a, 1 - a)


METRICS_CSV_HEADER = ("scenario", "attack", "defense", "seed", "tp", "fp", "fn", "precision", "recall", "fscore", "advantage_pct")


def format_float(x: float) -> str:
    return "nan" if math.isnan(x) else f"{x:.6f}"
