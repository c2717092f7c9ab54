from dataclasses import replace

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from sna.domain import ContractViolation, SamplingInterval
from sna.envsim import (
    Trace,
    TraceConfig,
    calibrate_trace,
    constant_trace,
    generate_trace,
    ideal_samples,
    read_trace_csv,
    sample_at,
    trace_exceedance,
    write_trace_csv,
)

I30, I480 = SamplingInterval.from_seconds(30), SamplingInterval.from_seconds(480)
QUIET = dict(night_sigma=0.0, day_sigma=0.0, ac_amplitude=0.0, occupancy_step_prob=0.0)


def short(**kw):
    return TraceConfig(duration_s=kw.pop("duration_s", 86_400), **kw)


def ramp_trace(slope_per_s: float, duration_s: int, nodes=(1,)) -> Trace:
    return Trace(samples=np.arange(duration_s) * slope_per_s, offsets={n: 0.0 for n in nodes})


class TestGenerate:
    def test_all_noise_off_is_constant(self):
        tr = generate_trace(short(base_temp=21.5, **QUIET), [1])
        assert np.all(tr.samples == 21.5)

    def test_same_seed_bit_identical(self):
        a = generate_trace(short(seed=3), [1, 2])
        b = generate_trace(short(seed=3), [1, 2])
        assert a.samples.tobytes() == b.samples.tobytes()
        assert a.offsets == b.offsets

    def test_different_seed_differs(self):
        assert not np.array_equal(generate_trace(short(seed=3), [1]).samples,
                                  generate_trace(short(seed=4), [1]).samples)

    def test_length_and_finite(self):
        tr = generate_trace(short(duration_s=5000), [1])
        assert tr.duration_s == 5000 and np.isfinite(tr.samples).all()

    def test_offsets_bounded_and_stable_per_node(self):
        a = generate_trace(short(), [1, 2, 3])
        b = generate_trace(short(), [3])
        assert all(-1 <= v <= 1 for v in a.offsets.values())
        assert a.offsets[3] == b.offsets[3]

    def test_night_quieter_than_day(self):
        tr = generate_trace(TraceConfig(), [1])
        night = np.abs(np.diff(tr.samples[:28_800:30])).mean()
        day = np.abs(np.diff(tr.samples[28_800:72_000:30])).mean()
        assert day > 2 * night

    @pytest.mark.parametrize("bad", [
        dict(duration_s=0), dict(day_start=50_000, day_end=40_000), dict(night_sigma=-1.0),
        dict(occupancy_step_prob=1.5), dict(ac_period_s=0.0),
    ])
    def test_invalid_config(self, bad):
        with pytest.raises(ContractViolation):
            generate_trace(replace(TraceConfig(), **bad), [1])


class TestSampleAt:
    def test_first_sample_plus_offset(self):
        tr = generate_trace(short(), [4])
        assert sample_at(tr, 4, 0) == tr.samples[0] + tr.offsets[4]

    def test_constant(self):
        tr = constant_trace(20.0, 100, [1, 2], offsets={1: 0.25, 2: -0.5})
        assert {sample_at(tr, 1, t) for t in (0, 31_400, 99_999)} == {20.25}
        assert sample_at(tr, 2, 5_000) == 19.5

    def test_nearest_second(self):
        tr = ramp_trace(1.0, 10)
        assert sample_at(tr, 1, 1500) == 2.0
        assert sample_at(tr, 1, 1499) == 1.0
        assert sample_at(tr, 1, 9999) == 9.0

    @pytest.mark.parametrize("t", [-1, 10_000])
    def test_out_of_range(self, t):
        with pytest.raises(ContractViolation):
            sample_at(ramp_trace(1.0, 10), 1, t)

    def test_unknown_node(self):
        with pytest.raises(ContractViolation):
            sample_at(ramp_trace(1.0, 10), 9, 0)


class TestExceedance:
    def test_constant_is_zero(self):
        tr = constant_trace(22.0, 4000, [1])
        assert all(trace_exceedance(tr, 1, iv, 0.5) == 0.0 for iv in SamplingInterval.all())

    def test_ramp_one_degree_per_480s(self):
        assert trace_exceedance(ramp_trace(1 / 480, 10 * 480), 1, I480, 0.5) == 1.0

    def test_too_short(self):
        with pytest.raises(ContractViolation):
            trace_exceedance(constant_trace(22.0, 960, [1]), 1, I480, 0.5)

    def test_matches_brute_force(self):
        tr = generate_trace(short(seed=11), [1])
        series = tr.samples + tr.offsets[1]
        pairs = [(series[t], series[t + 120]) for t in range(0, tr.duration_s - 120, 120)]
        expected = sum(abs(b - a) > 0.5 for a, b in pairs) / len(pairs)
        assert trace_exceedance(tr, 1, SamplingInterval.from_seconds(120), 0.5) == expected

    @settings(max_examples=15)
    @given(st.integers(0, 2**31), st.sampled_from(SamplingInterval.all()))
    def test_monotone_in_threshold(self, seed, iv):
        tr = generate_trace(short(seed=seed, duration_s=43_200), [1])
        rates = [trace_exceedance(tr, 1, iv, th) for th in (1.0, 0.5, 0.25, 0.1)]
        assert rates == sorted(rates)

    def test_default_short_gaps_change_less(self):
        tr = generate_trace(TraceConfig(), [1])
        assert trace_exceedance(tr, 1, I30, 0.5) <= trace_exceedance(tr, 1, I480, 0.5)

    def test_ideal_samples_spacing(self):
        tr = ramp_trace(1.0, 1000)
        assert list(ideal_samples(tr, 1, I480)) == [0.0, 480.0, 960.0]


def test_csv_roundtrip(tmp_path):
    tr = generate_trace(short(duration_s=600), [2, 5])
    path = tmp_path / "trace.csv"
    write_trace_csv(tr, [2, 5], path)
    text = path.read_bytes()
    assert text.startswith(b"t_s,node,value_c\n") and b"\r" not in text
    back = read_trace_csv(path)
    for node in (2, 5):
        np.testing.assert_allclose(back.node_series(node), tr.node_series(node), atol=1e-9)


def test_csv_rejects_bad_header(tmp_path):
    path = tmp_path / "x.csv"
    path.write_text("time,node,value\n0,1,20\n")
    with pytest.raises(ContractViolation):
        read_trace_csv(path)


def test_calibration_is_a_fixed_point_of_the_shipped_defaults():
    result = calibrate_trace(TraceConfig(), node=2)
    assert result.config == TraceConfig()
    assert 0.03 <= result.exceedance_480 <= 0.10
    assert result.exceedance_30 <= 0.01
