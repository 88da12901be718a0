import math
import warnings
from decimal import Decimal

import numpy as np
import pytest
from hypothesis import given, strategies as st

from chronon.correlator import correlate
from chronon.peakfit import CascadeFit
from chronon.qdsim import ClockParams, LinkParams, SourceParams, simulate_run
from chronon.syncproto import (PS_PER_S, SyncProtocolError, SyncReport, apply_offset, compute_sync,
                               kappa_from_reference, path_length_from_roundtrip, verify_delay_insertion)
from chronon.timetags import TagStream


def fake_fit(tau_max_ps, err=2.0, origin=None):
    origin = int(tau_max_ps) - 1000 if origin is None else origin
    return CascadeFit(A=100.0, B=0.0, tau_rise_ps=200.0, tau_decay_ps=1140.0, omega_rad_per_ps=0.0, phi_rad=0.0,
                      C=5.0, t0_local_ps=0.0, tau_max_local_ps=float(tau_max_ps - origin), origin_ps=origin,
                      tau_max_err_ps=err)


def test_path_length_reference_values():
    assert path_length_from_roundtrip(192.576560e6) == pytest.approx(19663.8, abs=0.5)
    assert path_length_from_roundtrip(0.0) == 0.0
    assert path_length_from_roundtrip(1000.0, 1.0) == pytest.approx(0.149896229, rel=1e-12)


@pytest.mark.parametrize("tau, n", [(-1.0, 1.468), (10.0, 0.9)])
def test_path_length_rejects_bad_input(tau, n):
    with pytest.raises(ValueError):
        path_length_from_roundtrip(tau, n)


@given(st.floats(0, 1e9), st.floats(1.0, 3.0))
def test_path_length_linear(tau, n):
    assert path_length_from_roundtrip(2 * tau, n) == pytest.approx(2 * path_length_from_roundtrip(tau, n))


def test_all_zero_offsets():
    r = compute_sync(fake_fit(7 * PS_PER_S), fake_fit(0.0), coarse_offset_s=7)
    assert r.raw_offset_decimal == r.compensated_offset_decimal == Decimal(7)
    assert r.raw_offset_s == r.compensated_offset_s == 7.0


def test_compensation_identity():
    r = compute_sync(fake_fit(96_393_880 + 1234.5), fake_fit(192_787_760.0), kappa_ps=12.0)
    assert r.compensated_fine_ps == pytest.approx(1234.5 - 12.0)
    assert r.one_way_propagation_ps == 96_393_880.0
    assert r.compensated_offset_err_ps == pytest.approx(math.sqrt(4 + 1))


def test_exact_decimal_offsets_keep_picoseconds():
    # offsets of ~10 days, before and after a fiber insertion; the difference is 4.61 ns
    before = SyncReport(669_509_148_370.0, 1.0, 0.0, 1.0, coarse_offset_s=918251)
    after = SyncReport(669_509_152_980.0, 1.0, 0.0, 1.0, coarse_offset_s=918251)
    assert str(before.raw_offset_decimal) == "918251.66950914837"
    assert str(after.raw_offset_decimal) == "918251.66950915298"
    assert (after.raw_offset_decimal - before.raw_offset_decimal) * PS_PER_S == Decimal(4610)


def test_far_peak_is_protocol_error():
    with pytest.raises(SyncProtocolError):
        compute_sync(fake_fit(0.6 * PS_PER_S), fake_fit(1e8))
    with pytest.raises(SyncProtocolError):
        compute_sync(fake_fit(0.0), fake_fit(1e8), coarse_offset_s=1.5)


def test_missing_fit_raises():
    bad = fake_fit(0.0)
    bad.tau_max_local_ps = float("nan")
    with pytest.raises(ValueError):
        compute_sync(bad, fake_fit(1e8))


def test_coarse_offset_split():
    # the same absolute peak seen through different integer coarse offsets
    tau = 3 * PS_PER_S + 123_456_789
    r0 = compute_sync(fake_fit(tau), fake_fit(1e6), coarse_offset_s=3)
    assert r0.tau_one_way_ps == 123_456_789
    assert r0.raw_offset_decimal == Decimal("3.000123456789")


def test_kappa_from_reference_zeroes_reference():
    ref = compute_sync(fake_fit(96_393_880 + 140.0, err=3.0), fake_fit(192_787_760.0 - 5.0, err=4.0))
    k, kerr = kappa_from_reference(ref)
    assert k == pytest.approx(142.5)
    assert kerr == pytest.approx(math.sqrt(9 + 4))
    again = compute_sync(fake_fit(96_393_880 + 140.0), fake_fit(192_787_760.0 - 5.0), kappa_ps=k)
    assert again.compensated_fine_ps == pytest.approx(0.0)


def _truth_report(link, clock=ClockParams(offset_s=2, offset_ps=5000.0)):
    _, g = simulate_run(SourceParams(), link, clock, None, 0.0005, 1)
    coarse = int(clock.offset_s)
    return SyncReport(g.one_way_peak_start_ps - coarse * PS_PER_S, 1.0, g.round_trip_peak_start_ps, 1.0,
                      coarse_offset_s=coarse)


@pytest.mark.parametrize("field, value, ratio", [
    ("inserted_delay_ps", 4480.0, 2.0),          # common path
    ("forward_extra_delay_ps", 4480.0, 1.0),     # forward arm only
    ("detector_delay_ps", (0.0, 4480.0, 0.0), 0.0),  # subscriber detector cable
])
def test_delay_ratio_by_location(field, value, ratio):
    before = _truth_report(LinkParams())
    after = _truth_report(LinkParams(**{field: value}))
    v = verify_delay_insertion(before, after)
    assert v.one_way_shift_ps == pytest.approx(4480.0)
    assert v.ratio == pytest.approx(ratio)
    assert v.passed is (ratio == 2.0)
    assert v.raw_offset_shift_ps == pytest.approx(4480.0)


def test_verify_rejects_missing():
    good = SyncReport(1.0, 1.0, 2.0, 1.0)
    with pytest.raises(ValueError):
        verify_delay_insertion(good, SyncReport(float("nan"), 1.0, 2.0, 1.0))


def _stream(rng, n=2000, span=10**9):
    t0 = np.sort(rng.integers(10**8, span, n)).astype(np.uint64)
    t1 = np.sort(rng.integers(10**8, span, n)).astype(np.uint64)
    return TagStream.from_arrays(np.concatenate([t0, t1]), np.repeat(np.array([0, 1], np.uint16), n), 2)


def test_apply_offset_zero_is_identity():
    s = _stream(np.random.default_rng(0))
    assert apply_offset(s, SyncReport(0.0, 1.0, 0.0, 1.0)) is s


def test_apply_offset_moves_selected_channel():
    rng = np.random.default_rng(1)
    base = np.sort(rng.integers(0, 10**9, 500)).astype(np.uint64)
    offset = 3 * PS_PER_S + 777_000
    times = np.concatenate([base, base + np.uint64(offset)])
    chans = np.repeat(np.array([0, 1], np.uint16), base.size)
    s = TagStream.from_arrays(times, chans, 2)
    report = SyncReport(777_000.0, 1.0, 0.0, 1.0, coarse_offset_s=3)
    fixed = apply_offset(s, report, channels=[1])
    assert np.array_equal(fixed.channel_times(1), base)
    assert np.array_equal(fixed.channel_times(0), base)
    h = correlate(fixed.channel_times(0), fixed.channel_times(1), -160, 160, 16)
    assert h.counts[h.n_bins // 2] == base.size


def test_apply_offset_clamps_with_warning():
    s = TagStream.from_arrays(np.array([5, 10**6], np.uint64), np.array([0, 0], np.uint16), 1)
    with pytest.warns(RuntimeWarning):
        out = apply_offset(s, SyncReport(1000.0, 1.0, 0.0, 1.0))
    assert out.channel_times(0).tolist() == [0, 10**6 - 1000]


@given(st.integers(0, 10**12))
def test_epoch_shift_invariance(shift):
    # moving both clocks by the same epoch changes no correlation
    rng = np.random.default_rng(5)
    a = np.sort(rng.integers(0, 10**7, 300)).astype(np.uint64)
    b = np.sort(a + rng.integers(0, 2000, 300).astype(np.uint64))
    h0 = correlate(a, b, -1000, 4000, 16)
    h1 = correlate(a + np.uint64(shift), b + np.uint64(shift), -1000, 4000, 16)
    assert np.array_equal(h0.counts, h1.counts)


def test_report_dict_roundtrip():
    r = compute_sync(fake_fit(918251 * PS_PER_S + 96_393_880 + 50.0), fake_fit(192_787_760.0), coarse_offset_s=918251, kappa_ps=3.0)
    d = r.to_dict()
    assert isinstance(d["compensated_offset_s"], str)
    assert SyncReport.from_dict(d) == r
    assert "compensated" in r.summary()


def _sim(offset_ps, seed=3):
    clock = ClockParams(offset_s=0.0, offset_ps=float(offset_ps), jitter_sigma_ps=(20.0, 20.0, 20.0))
    return simulate_run(SourceParams(pair_prob=0.02), LinkParams(), clock, None, 0.05, seed)


def test_corrected_stream_recorrelates_at_propagation():
    offset = 2_000_000_000  # 2 ms subscriber lead
    stream, truth = _sim(offset)
    report = SyncReport(float(truth.one_way_peak_start_ps), 1.0, float(truth.round_trip_peak_start_ps), 1.0)
    fixed = apply_offset(stream, report, channels=[1])
    # after correction the X@B - XX@A cascade starts at the pure propagation delay
    prop = int(truth.forward_delay_ps)
    h = correlate(fixed.channel_times(1), fixed.channel_times(0), prop - 480, prop + 1600, 16)
    raw = correlate(stream.channel_times(1), stream.channel_times(0), prop + offset - 480, prop + offset + 1600, 16)
    assert np.array_equal(h.counts, raw.counts)
    start_bin = int(np.nonzero(h.counts > 0.2 * h.counts.max())[0][0])
    assert abs(h.tau_start_ps + 16 * start_bin - prop) <= 3 * 16
    assert h.counts.max() > 50


def test_shifting_subscriber_stream_shifts_raw_offset_exactly():
    from chronon.peakfit import fit_cascade
    stream, truth = _sim(5_000_000)
    a, b = stream.channel_times(0), stream.channel_times(1)
    lo = int(truth.one_way_peak_start_ps) // 16 * 16 - 3008
    fit0 = fit_cascade(correlate(b, a, lo, lo + 10000, 16), fixed={"B": 0.0})
    s = 123_456_789 * 16
    fit1 = fit_cascade(correlate(b + np.uint64(s), a, lo + s, lo + s + 10000, 16), fixed={"B": 0.0})
    rt = fake_fit(truth.round_trip_peak_start_ps)
    r0, r1 = compute_sync(fit0, rt), compute_sync(fit1, rt)
    assert (r1.raw_offset_decimal - r0.raw_offset_decimal) * PS_PER_S == pytest.approx(s, abs=1e-3)
    assert r1.compensated_fine_ps - r0.compensated_fine_ps == pytest.approx(s, abs=1e-3)
