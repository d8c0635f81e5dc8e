import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from keystroke_sim import multitrace as mt
from keystroke_sim.defense import DefenseConfig
from keystroke_sim.simcore import ParameterError, derive_rng, ms, seconds

DEFAULT = mt.PasswordAttackParams()
OFF = mt.with_defense(DEFAULT, False)

# Expected fakes in [0, 2 s): 200 for a stationary U[0, 20 ms] renewal stream,
# minus 1/3 per key restart (numerical renewal-function oracle, m(200 ms) =
# 20 - 1/3), plus the 8 keys themselves.
EVENTS_PER_TRACE = 200 + 8 * (1 - 1 / 3)


def _profile(times, bin=ms(1), span=seconds(2), n=1):
    return mt.average_aligned([mt.AlignedTrace(np.asarray(times), span)] * n, bin)


def test_params_validation():
    with pytest.raises(ParameterError):
        mt.PasswordAttackParams(bin=ms(3))
    with pytest.raises(ParameterError):
        mt.PasswordAttackParams(sigma=0, mean_interval=ms(300))
    with pytest.raises(ParameterError):
        mt.PasswordAttackParams(sigma=-1)
    assert DEFAULT.match_tolerance == ms(40)
    assert mt.PasswordAttackParams(sigma=0).match_tolerance == ms(1)


def test_zero_sigma_traces_repeat_the_password():
    params = mt.with_defense(mt.PasswordAttackParams(sigma=0), False)
    traces, canon = mt.simulate_password_traces(params, 50, derive_rng(1))
    assert len(canon) == 8 and np.all(np.diff(canon) == ms(200))
    assert all(np.array_equal(t.event_times, canon) for t in traces)


def test_n_traces_must_be_positive():
    with pytest.raises(ParameterError):
        mt.simulate_password_traces(DEFAULT, 0, derive_rng(1))


def test_events_per_defended_trace():
    traces, _ = mt.simulate_password_traces(DEFAULT, 20_000, derive_rng(2))
    counts = np.array([len(t) for t in traces])
    assert abs(counts.mean() - EVENTS_PER_TRACE) < 0.25
    assert all(t.event_times.min() >= 0 and t.event_times.max() < seconds(2) for t in traces)


def test_per_key_spread_is_sigma():
    traces, canon = mt.simulate_password_traces(OFF, 10_000, derive_rng(3))
    keys = np.stack([t.event_times for t in traces])
    assert np.all(np.abs(keys.std(axis=0) - ms(40)) <= ms(1))
    assert np.all(np.abs(keys.mean(axis=0) - canon) <= ms(2))


def test_average_single_event():
    p = _profile([ms(500)])
    assert p.bins[500] == 1.0 and p.mass == 1.0


def test_averaging_identical_traces_is_idempotent():
    times = [ms(3), ms(700), ms(1999)]
    assert np.array_equal(_profile(times, n=7).bins, _profile(times).bins)


def test_average_needs_traces():
    with pytest.raises(ParameterError):
        mt.average_aligned([], ms(1))


def test_fake_floor_is_flat():
    params = mt.PasswordAttackParams(n_keys=0)
    traces, _ = mt.simulate_password_traces(params, 10_000, derive_rng(4))
    b = mt.average_aligned(traces, ms(1)).bins
    assert b.max() / b.mean() <= 1.2


trace_lists = st.lists(st.lists(st.integers(0, seconds(2) - 1), max_size=30), min_size=1, max_size=6)


@settings(max_examples=100, deadline=None)
@given(trace_lists, trace_lists)
def test_averaging_is_linear(a, b):
    ta = [mt.AlignedTrace(np.array(x, dtype=np.int64), seconds(2)) for x in a]
    tb = [mt.AlignedTrace(np.array(x, dtype=np.int64), seconds(2)) for x in b]
    both = mt.average_aligned(ta + tb, ms(1)).bins
    weighted = (len(ta) * mt.average_aligned(ta, ms(1)).bins + len(tb) * mt.average_aligned(tb, ms(1)).bins) / (len(ta) + len(tb))
    assert np.allclose(both, weighted)


@settings(max_examples=100, deadline=None)
@given(trace_lists)
def test_doubling_bin_width_preserves_mass(a):
    traces = [mt.AlignedTrace(np.array(x, dtype=np.int64), seconds(2)) for x in a]
    fine, coarse = mt.average_aligned(traces, ms(1)), mt.average_aligned(traces, ms(2))
    assert coarse.bins.size * 2 == fine.bins.size
    assert coarse.mass == pytest.approx(fine.mass)
    assert np.allclose(coarse.bins, fine.bins.reshape(-1, 2).sum(axis=1))


def test_locate_noiseless_bumps():
    centres = np.array([150, 400, 610, 800, 1000, 1230, 1500, 1800]) + 0.5
    x = np.arange(2000) + 0.5
    bins = sum(np.exp(-0.5 * ((x - c) / 40) ** 2) for c in centres)
    found = mt.locate_keystrokes(mt.DensityProfile(bins, ms(1), seconds(2)), 8, ms(40))
    assert np.all(np.abs(found - centres * 1e6) <= ms(1))


def test_locate_rejects_zero_keys():
    with pytest.raises(ParameterError):
        mt.locate_keystrokes(_profile([1]), 0, ms(40))


def test_flat_profiles_rarely_succeed():
    gen = derive_rng(5, "flat")
    canon = mt.canonical_schedule(DEFAULT, gen)
    wins = 0
    for _ in range(200):
        prof = mt.DensityProfile(gen.poisson(100, size=2000) / 1000, ms(1), seconds(2))
        wins += mt.attack_success(mt.locate_keystrokes(prof, 8, ms(40)), canon, ms(40))
    assert wins <= 2


def test_undefended_averaging_finds_every_key():
    traces, canon = mt.simulate_password_traces(OFF, 10_000, derive_rng(6))
    found = mt.locate_keystrokes(mt.average_aligned(traces, ms(1)), 8, ms(40))
    assert mt.attack_success(found, canon, ms(40))


def test_attack_success_examples():
    truth = np.arange(1, 9) * ms(200)
    assert mt.attack_success(truth, truth, ms(40))
    off = truth.copy()
    off[3] += ms(80)
    assert not mt.attack_success(off, truth, ms(40))
    assert mt.attack_success(truth + np.where(np.arange(8) % 2, ms(20), -ms(20)), truth, ms(40))
    with pytest.raises(ParameterError):
        mt.attack_success(truth[:7], truth, ms(40))


def test_required_traces_zero_sigma_undefended():
    res = mt.required_traces(mt.with_defense(mt.PasswordAttackParams(sigma=0), False), seed=1, reps=3)
    assert res.counts.tolist() == [1, 1, 1]


def test_required_traces_undefended():
    res = mt.required_traces(OFF, seed=1, reps=5)
    assert res.mean <= 50 and res.n_censored == 0


def test_required_traces_reports_censoring():
    res = mt.required_traces(mt.PasswordAttackParams(max_traces=16), seed=1, reps=2)
    assert all(r.censored and r.required_traces == 16 for r in res.reps)


def test_required_traces_is_deterministic_and_job_independent():
    params = mt.PasswordAttackParams(max_traces=512)
    a = mt.required_traces(params, seed=9, reps=2)
    b = mt.required_traces(params, seed=9, reps=2, jobs=2)
    assert a.reps == b.reps


def test_more_fakes_need_more_traces():
    quiet = mt.required_traces(OFF, seed=3, reps=20)
    noisy = mt.required_traces(DEFAULT, seed=3, reps=20)
    assert quiet.quantiles((0.75,))[0] < noisy.quantiles((0.25,))[0]


def test_fake_rate_scales_the_floor():
    slow = mt.PasswordAttackParams(defense=DefenseConfig(inj_hi=ms(40)))
    assert mt.required_traces(slow, seed=4, reps=5).mean < mt.required_traces(DEFAULT, seed=4, reps=5).mean


def test_results_csv(tmp_path):
    res = mt.required_traces(mt.with_defense(mt.PasswordAttackParams(sigma=0), False), seed=1, reps=2)
    path = tmp_path / "mt.csv"
    res.to_csv(path)
    assert path.read_text() == "rep,required_traces,success_at_1825,censored\n0,1,true,false\n1,1,true,false\n"


def test_profile_csv(tmp_path):
    path = tmp_path / "profile.csv"
    _profile([ms(1)], bin=ms(500)).to_csv(path)
    assert path.read_text().splitlines() == ["bin_start_ns,mass", "0,1.0", "500000000,0.0", "1000000000,0.0", "1500000000,0.0"]
