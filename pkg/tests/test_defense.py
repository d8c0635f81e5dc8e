from collections import Counter

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.stats import ks_2samp

from keystroke_sim.defense import (
    DefenseConfig,
    MergedStream,
    defended_emissions,
    injection_loop,
    layer1_emissions,
    layer2_duplicate,
    layer3_touch,
    observable_features,
    renewal_fakes,
)
from keystroke_sim.metrics import separability
from keystroke_sim.simcore import CpuClock, ParameterError, derive_rng, ms, seconds
from keystroke_sim.victim import TYPING_PRESETS, Channel, EventKind, GroundTruth, IrqKind, PipelineModel, generate_typing

CLOCK = CpuClock()
PIPE = PipelineModel()
NO_KEYS = GroundTruth(np.zeros(0, dtype=np.int64), seconds(60))


def _typed_stream(seed, span=seconds(60), cfg=DefenseConfig()):
    truth = generate_typing(TYPING_PRESETS["skilled"], span, derive_rng(seed, "typing"))
    return truth, injection_loop(truth, cfg, span, derive_rng(seed, "injection"))


def _stream(kinds, gap=ms(10)):
    kinds = np.asarray(kinds, dtype=np.int8)
    return MergedStream(np.arange(1, kinds.size + 1, dtype=np.int64) * gap, kinds, seconds(1))


def test_config_validation_and_rate():
    assert DefenseConfig().rate == pytest.approx(100.0)
    assert DefenseConfig(enabled=False).rate == 0.0
    with pytest.raises(ParameterError):
        DefenseConfig(inj_lo=ms(30))
    with pytest.raises(ParameterError):
        DefenseConfig(layers={4})


def test_fakes_only_rate():
    for seed in range(5):
        s = injection_loop(NO_KEYS, DefenseConfig(), seconds(60), derive_rng(seed))
        assert abs(len(s) - 6000) <= 180
        assert not s.is_real.any()


def test_disabled_is_identity():
    truth, _ = _typed_stream(1)
    s = injection_loop(truth, DefenseConfig(enabled=False), seconds(60), derive_rng(1))
    assert np.array_equal(s.times, truth.times) and s.is_real.all()


def test_merged_rate_with_typing():
    # Each real key restarts the timer.  The post-key wait is a full U[0, 20 ms]
    # draw instead of the residual (mean 20/3 ms), so a key adds 1 - 1/3 events:
    # 100 + 8 * 2/3 = 105.33 per second.
    rates = [len(_typed_stream(seed)[1]) / 60 for seed in range(10)]
    assert abs(np.mean(rates) - (100 + 8 * 2 / 3)) < 0.4


@settings(max_examples=40, deadline=None)
@given(st.integers(0, 2**32))
def test_every_real_key_kept_unshifted(seed):
    truth, s = _typed_stream(seed, span=seconds(5))
    assert np.array_equal(s.times[s.is_real], truth.times)
    assert np.all(np.diff(s.times) >= 0)


def test_fake_events_carry_reserved_code():
    _, s = _typed_stream(2, span=seconds(1))
    assert all((e.kind is EventKind.FAKE) == (e.key_code == 0x67) for e in s.events)


def test_timer_restarts_after_real_key():
    # no gap after a real key can exceed the maximum injection delay
    _, s = _typed_stream(3)
    assert np.diff(s.times).max() <= ms(20)


def test_renewal_fakes_matches_event_loop_count():
    starts = np.zeros(4000, dtype=np.int64)
    ends = np.full(4000, ms(200))
    seg, t = renewal_fakes(starts, ends, DefenseConfig(), derive_rng(1))
    assert np.all((t > 0) & (t < ms(200)))
    # renewal function of U[0, 20 ms] at 200 ms is 20 - 1/3
    assert abs(np.bincount(seg, minlength=4000).mean() - (20 - 1 / 3)) < 0.1
    loop = [len(injection_loop(GroundTruth(np.zeros(0, np.int64), ms(200)), DefenseConfig(), ms(200), derive_rng(s))) for s in range(2000)]
    assert abs(np.mean(loop) - (20 - 1 / 3)) < 0.15


def test_handler_delay_zero_keeps_event_times():
    s = _stream([0, 1, 0, 1])
    ems = layer1_emissions(s, PIPE, DefenseConfig(handler_delay_max=0), CLOCK, derive_rng(1))
    assert set(ems.t.tolist()) == set(s.times.tolist())


def test_handler_delay_bounded():
    s = _stream([0, 1] * 50)
    cfg = DefenseConfig()
    ems = layer1_emissions(s, PIPE, cfg, CLOCK, derive_rng(1))
    lag = ems.t - s.times[ems.origin]
    assert lag.min() >= 0 and lag.max() <= cfg.handler_delay_max


def test_layer1_busy_distributions_match():
    s = _stream([0] * 1000 + [1] * 1000, gap=ms(1))
    ems = layer1_emissions(s, PIPE, DefenseConfig(), CLOCK, derive_rng(4)).select(Channel.IRQ, int(IrqKind.KEYBOARD))
    real = s.is_real[ems.origin]
    assert ks_2samp(ems.busy[real], ems.busy[~real]).statistic <= 0.06


def test_layer1_emits_keyboard_and_timer_per_event():
    s = _stream([0, 1, 1])
    irq = layer1_emissions(s, PIPE, DefenseConfig(), CLOCK, derive_rng(1)).select(Channel.IRQ)
    assert Counter(zip(irq.origin.tolist(), irq.ident.tolist())) == Counter(
        {(i, k): 1 for i in range(3) for k in (IrqKind.KEYBOARD, IrqKind.TIMER)}
    )


def test_layer2_duplicates_library_lines():
    pipe = PipelineModel(lib_addresses=(0x100, 0x140, 0x180))
    ems = layer2_duplicate(_stream([1]), pipe)
    assert len(ems) == 6 and Counter(ems.ident.tolist()) == {0x100: 2, 0x140: 2, 0x180: 2}


def test_layer2_off_fakes_have_no_library_footprint():
    s = _stream([1])
    ems = defended_emissions(s, PIPE, DefenseConfig(layers={1, 3}), CLOCK, derive_rng(1))
    assert len(ems.select(Channel.CACHE_LINE)) == 0


def test_layer3_gating():
    fake, real = _stream([1]), _stream([0])
    assert len(layer3_touch(fake, PIPE, enabled=True)) == len(PIPE.buffer_sets)
    assert len(layer3_touch(fake, PIPE, enabled=False)) == 0
    assert len(layer3_touch(real, PIPE, enabled=False)) == len(PIPE.buffer_sets)
    on = defended_emissions(fake, PIPE, DefenseConfig(layers={1, 2}), CLOCK, derive_rng(1))
    assert not np.isin(on.select(Channel.CACHE_SET).ident, PIPE.buffer_sets).any()


def _footprints(stream, ems):
    base = {int(IrqKind.KEYBOARD): CLOCK.cycles_to_ns(PIPE.isr_cycles), int(IrqKind.TIMER): CLOCK.cycles_to_ns(PIPE.timer_irq_cycles)}
    per_event = [Counter() for _ in range(len(stream))]
    for o, c, i, b in zip(ems.origin.tolist(), ems.channel.tolist(), ems.ident.tolist(), ems.busy.tolist()):
        bucket = round(b / base[i]) if c == Channel.IRQ else 0
        per_event[o][(c, i, bucket)] += 1
    return per_event


@pytest.mark.parametrize("layers", [{1, 2, 3}])
def test_footprint_multisets_identical(layers):
    _, s = _typed_stream(6, span=seconds(5))
    ems = defended_emissions(s, PIPE, DefenseConfig(layers=layers), CLOCK, derive_rng(6))
    prints = _footprints(s, ems)
    reference = prints[0]
    assert all(p == reference for p in prints)


def test_footprints_differ_without_defense():
    s = _stream([0, 1])
    ems = defended_emissions(s, PIPE, DefenseConfig(layers={1}), CLOCK, derive_rng(1))
    real, fake = _footprints(s, ems)
    assert real != fake


def test_density_uniform_with_and_without_typing():
    typed, quiet = [], []
    for seed in range(10):
        typed.append(np.diff(_typed_stream(seed)[1].times))
        quiet.append(np.diff(injection_loop(NO_KEYS, DefenseConfig(), seconds(60), derive_rng(seed, "quiet")).times))
    per_run = [ks_2samp(a, b).statistic for a, b in zip(typed, quiet)]
    assert np.mean(per_run) <= 0.05
    assert ks_2samp(np.concatenate(typed), np.concatenate(quiet)).statistic <= 0.05


def _pooled_features(seeds):
    pooled = {}
    for seed in seeds:
        _, s = _typed_stream(seed)
        ems = defended_emissions(s, PIPE, DefenseConfig(), CLOCK, derive_rng(seed, "pipeline"))
        feats = observable_features(s, ems)
        for name, v in feats.items():
            ok = ~np.isnan(v)
            real, fake = pooled.setdefault(name, ([], []))
            real.append(v[ok & s.is_real])
            fake.append(v[ok & ~s.is_real])
    return {k: (np.concatenate(r), np.concatenate(f)) for k, (r, f) in pooled.items()}


def test_handler_cost_and_footprint_size_are_uninformative():
    feats = _pooled_features(range(5))
    assert separability(*feats["busy"]) <= 0.55
    assert separability(*feats["n_emissions"]) == 0.5


def test_gap_before_real_key_follows_backward_recurrence():
    # A key lands at a uniformly random point of a U[0, 20 ms] injection gap,
    # so the time since the previous event has density (20 - x) / 200 and
    # P(fake gap > real gap) = 2/3.  Fake gaps run slightly short of U[0, 20 ms]
    # because long timer draws are more often pre-empted by a key.
    real, fake = _pooled_features(range(5))["gap_prev"]
    assert abs(real.mean() - ms(20) / 3) < ms(0.3)
    assert ms(9.5) < fake.mean() < ms(10)
    assert abs(separability(real, fake) - 2 / 3) < 0.03
