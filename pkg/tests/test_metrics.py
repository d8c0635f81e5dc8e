import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keystroke_sim.metrics import (
    FrameGrid,
    Metrics,
    advantage,
    always_one,
    auc,
    evaluate,
    evaluate_per_detection,
    fscore,
    random_guess,
    separability,
)
from keystroke_sim.simcore import ParameterError, derive_rng, ms
from keystroke_sim.victim import GroundTruth

FRAME = ms(10)
GRID_8_100 = FrameGrid(FRAME, 100 * FRAME, 8)

# Exact E[F] of a per-frame Bernoulli(p) guesser with k=8 of n=100 key frames,
# by enumerating both binomials (independent script, frozen here).
EXACT_RANDOM_F_P008 = 0.07762447356674855
EXACT_RANDOM_F_P050 = 0.13776325350973168


def _truth_in_frames(frames, n_frames):
    return GroundTruth(np.asarray(sorted(frames), dtype=np.int64) * FRAME + FRAME // 2, n_frames * FRAME)


def test_perfect_detector():
    truth = _truth_in_frames(range(0, 100, 12), 100)
    m = evaluate(truth.times, truth)
    assert (m.precision, m.recall, m.fscore) == (1.0, 1.0, 1.0)


def test_every_frame_detector_is_always_one():
    truth = _truth_in_frames(range(0, 96, 12), 100)
    m = evaluate(np.arange(100) * FRAME, truth)
    assert m.precision == pytest.approx(0.08) and m.recall == 1.0
    assert m.fscore == pytest.approx(4 / 27, abs=1e-12)
    assert m.fscore == pytest.approx(always_one(FrameGrid.for_truth(truth)).fscore, abs=1e-15)


def test_empty_detections():
    truth = _truth_in_frames([3], 100)
    assert evaluate([], truth).fscore == 0.0


def test_fscore_examples():
    assert fscore(0.89, 1.0) == pytest.approx(0.9418, abs=1e-4)
    assert fscore(1.0, 1.0) == 1.0
    assert fscore(0.71, 0.92) == pytest.approx(0.8015, abs=1e-4)
    assert abs(fscore(0.71, 0.92) - 0.81) <= 0.01
    assert fscore(0.0, 0.0) == 0.0
    with pytest.raises(ParameterError):
        fscore(1.2, 0.5)


def test_always_one_closed_forms():
    assert always_one(GRID_8_100).fscore == pytest.approx(4 / 27, abs=1e-12)
    assert always_one(FrameGrid(FRAME, 100 * FRAME, 100)).fscore == 1.0
    assert always_one(FrameGrid(ms(5), 100 * FRAME, 8)).fscore == pytest.approx(16 / 208, abs=1e-12)
    with pytest.raises(ParameterError):
        always_one(FrameGrid(FRAME, 100 * FRAME, 0))


def test_advantage_examples():
    assert advantage(1.0, GRID_8_100) == pytest.approx(575.0, abs=1e-9)
    assert advantage(4 / 27, GRID_8_100) == pytest.approx(0.0, abs=1e-9)
    assert advantage(0.09, GRID_8_100) == pytest.approx(-39.25, abs=1e-9)
    assert abs(advantage(0.09, GRID_8_100) - (-40.2)) <= 2


@settings(max_examples=100, deadline=None)
@given(st.floats(0, 1), st.floats(0, 1))
def test_advantage_increasing(a, b):
    if b - a > 1e-9:
        assert advantage(a, GRID_8_100) < advantage(b, GRID_8_100)


def test_frame_grid_counts():
    assert FrameGrid(FRAME, 1001 * ms(1), 1).n_frames == 101
    with pytest.raises(ParameterError):
        FrameGrid(FRAME, 100 * FRAME, 101)


def test_random_guess_limits():
    gen = derive_rng(1)
    assert random_guess(GRID_8_100, 1.0, gen, 10).fscore == pytest.approx(always_one(GRID_8_100).fscore)
    assert random_guess(GRID_8_100, 0.0, gen, 10).fscore == 0.0
    with pytest.raises(ParameterError):
        random_guess(GRID_8_100, 0.5, gen, 0)


def test_random_guess_matches_exact_expectation():
    m = random_guess(GRID_8_100, 0.08, derive_rng(2, "guess"), 10**4)
    assert m.fscore == pytest.approx(0.08, abs=0.01)
    assert m.fscore == pytest.approx(EXACT_RANDOM_F_P008, abs=0.005)


def test_random_guess_at_one_half_is_near_published_baseline():
    m = random_guess(GRID_8_100, 0.5, derive_rng(3, "guess"), 10**4)
    assert m.fscore == pytest.approx(EXACT_RANDOM_F_P050, abs=0.003)


def _brute_force(det_times, truth_times, n_frames):
    tp = fp = fn = 0
    for f in range(n_frames):
        d = any(f * FRAME <= t < (f + 1) * FRAME for t in det_times)
        k = any(f * FRAME <= t < (f + 1) * FRAME for t in truth_times)
        tp += d and k
        fp += d and not k
        fn += k and not d
    return tp, fp, fn


def test_evaluate_matches_frame_counting_oracle():
    gen = np.random.default_rng(20240601)
    mismatches = 0
    for _ in range(1000):
        n = int(gen.integers(1, 51))
        span = n * FRAME
        truth_t = np.unique(gen.integers(0, span, size=gen.integers(0, 12)))
        det_t = np.sort(gen.integers(0, span, size=gen.integers(0, 30)))
        m = evaluate(det_t, GroundTruth(truth_t, span))
        mismatches += (m.tp, m.fp, m.fn) != _brute_force(det_t.tolist(), truth_t.tolist(), n)
    assert mismatches == 0


instances = st.integers(1, 50).flatmap(
    lambda n: st.tuples(
        st.just(n),
        st.lists(st.integers(0, n * FRAME - 1), max_size=15, unique=True),
        st.lists(st.integers(0, n * FRAME - 1), max_size=40),
    )
)


@settings(max_examples=300, deadline=None)
@given(instances)
def test_count_and_range_invariants(inst):
    n, truth_t, det_t = inst
    truth = GroundTruth(np.array(sorted(truth_t), dtype=np.int64), n * FRAME)
    m = evaluate(np.array(sorted(det_t), dtype=np.int64), truth)
    assert m.tp + m.fn == len({t // FRAME for t in truth_t})
    assert m.tp + m.fp == len({t // FRAME for t in det_t})
    if m.precision > 0 and m.recall > 0:
        assert min(m.precision, m.recall) - 1e-12 <= m.fscore <= max(m.precision, m.recall) + 1e-12


@settings(max_examples=100, deadline=None)
@given(instances, st.integers(0, 20))
def test_evaluate_invariant_under_frame_shift(inst, shift):
    n, truth_t, det_t = inst
    span = (n + shift) * FRAME
    a = evaluate(np.array(sorted(det_t), dtype=np.int64), GroundTruth(np.array(sorted(truth_t), dtype=np.int64), span))
    off = shift * FRAME
    b = evaluate(
        np.array(sorted(det_t), dtype=np.int64) + off,
        GroundTruth(np.array(sorted(truth_t), dtype=np.int64) + off, span),
    )
    assert (a.tp, a.fp, a.fn) == (b.tp, b.fp, b.fn)


def test_per_detection_counts_every_detection():
    truth = _truth_in_frames([2], 10)
    det = np.array([2 * FRAME, 2 * FRAME + 1, 5 * FRAME])
    assert (evaluate(det, truth).fp, evaluate_per_detection(det, truth).fp) == (1, 2)


def test_metrics_zero_denominators():
    m = Metrics.from_counts(0, 0, 0)
    assert (m.precision, m.recall, m.fscore) == (0.0, 0.0, 0.0)
    assert math.isnan(m.advantage_pct)


def test_auc():
    assert auc([2, 3], [0, 1]) == 1.0
    assert auc([0, 1], [2, 3]) == 0.0
    assert auc([1, 1], [1, 1]) == 0.5
    assert separability([0, 1], [2, 3]) == 1.0
    with pytest.raises(ParameterError):
        auc([], [1])
