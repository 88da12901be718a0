import numpy as np
import pytest

from chronon.correlator import correlate
from chronon.qdsim import (DEFAULT_SETTINGS, ClockParams, LinkParams, MeasurementConfig, PolarizationState,
                           SourceParams, fss_omega, polarization_vector, simulate_hbt, simulate_run,
                           simulate_tomography_set)

IDEAL_CLK = ClockParams(jitter_sigma_ps=(0, 0, 0))


def test_fss_period_from_splitting():
    # 4.71 micro-eV -> h / (4.71 ueV) = 878.06 ps
    assert 2 * np.pi / fss_omega(4.71) == pytest.approx(878.06, abs=0.05)


def test_polarization_tokens():
    for tok in "HVDARL":
        assert np.linalg.norm(polarization_vector(tok)) == pytest.approx(1)
    assert abs(np.vdot(polarization_vector("R"), polarization_vector("L"))) < 1e-15
    with pytest.raises(ValueError):
        polarization_vector("X")
    with pytest.raises(ValueError):
        MeasurementConfig.from_label("HQ")


def test_polarization_state_normalized():
    assert np.allclose(PolarizationState.phi_plus().amplitudes, np.array([1, 0, 0, 1]) / np.sqrt(2))
    with pytest.raises(ValueError):
        PolarizationState(np.array([1, 1, 0, 0]))


def test_invalid_inputs():
    with pytest.raises(ValueError):
        simulate_run(SourceParams(), LinkParams(), ClockParams(), None, 0.0, 1)
    with pytest.raises(ValueError):
        simulate_run(SourceParams(pair_prob=1.5), LinkParams(), ClockParams(), None, 1e-3, 1)
    with pytest.raises(ValueError):
        simulate_run(SourceParams(), LinkParams(reflectance=-0.1), ClockParams(), None, 1e-3, 1)


def test_ideal_source_exponential_delay():
    src = SourceParams(pair_prob=1.0, fss_omega_rad_per_ps=0.0)
    link = LinkParams(one_way_delay_ps=0, reflectance=0.0)
    s, truth = simulate_run(src, link, IDEAL_CLK, None, 1e6 * 12500e-12, 3)
    c = s.counts()
    assert c[0] == truth.n_pulses == 10**6 and c[1] + c[2] == c[0]
    d = s.channel_times(1).astype(np.int64) - s.channel_times(0).astype(np.int64)
    # X delays beyond one pulse period (p ~ e^-11) would break the pairing by index
    assert np.all(d >= 0)
    assert np.mean(d) == pytest.approx(1140, rel=0.01)


def test_each_x_tag_has_its_xx_ancestor():
    src = SourceParams(pair_prob=1.0, rep_period_ps=10**6)
    s, truth = simulate_run(src, LinkParams(reflectance=0.5), ClockParams(offset_ps=777, jitter_sigma_ps=(0, 0, 0)),
                            None, 0.01, 5)
    t0 = s.channel_times(0).astype(np.int64)
    t1 = s.channel_times(1).astype(np.int64)
    idx = np.searchsorted(t0, t1 - truth.forward_delay_ps - 777, side="right") - 1
    assert np.all(t1 - t0[idx] - truth.forward_delay_ps - 777 >= 0)


def test_reflectance_ratio():
    s, _ = simulate_run(SourceParams(pair_prob=0.01), LinkParams(), IDEAL_CLK, None, 0.5, 9)
    c = s.counts()
    n = c[1] + c[2]
    frac = c[2] / n
    assert abs(frac - 0.70) < 3 * np.sqrt(0.7 * 0.3 / n)


def test_inserted_delay_shifts_exactly():
    src = SourceParams(pair_prob=0.01)
    a, ta = simulate_run(src, LinkParams(), IDEAL_CLK, None, 0.01, 21)
    b, tb = simulate_run(src, LinkParams(inserted_delay_ps=4480), IDEAL_CLK, None, 0.01, 21)
    assert np.array_equal(b.channel_times(0), a.channel_times(0))
    assert np.all(b.channel_times(1) - a.channel_times(1) == 4480)
    assert np.all(b.channel_times(2) - a.channel_times(2) == 8960)
    assert tb.round_trip_ps - ta.round_trip_ps == 8960


def test_round_trip_symmetry_in_ground_truth():
    _, t = simulate_run(SourceParams(), LinkParams(), ClockParams(), None, 1e-3, 1)
    assert t.round_trip_ps - 2 * t.forward_delay_ps == 0
    _, t = simulate_run(SourceParams(), LinkParams(return_extra_delay_ps=50), ClockParams(), None, 1e-3, 1)
    assert t.return_delay_ps - t.forward_delay_ps == 50


def test_same_seed_same_stream():
    args = (SourceParams(pair_prob=0.01), LinkParams(), ClockParams(offset_s=3.5), None, 0.01)
    assert simulate_run(*args, 77)[0] == simulate_run(*args, 77)[0]
    assert not simulate_run(*args, 77)[0] == simulate_run(*args, 78)[0]


def test_large_offset_uses_exact_integer_ps():
    clk = ClockParams(offset_s=918251, offset_ps=669509148370)
    _, t = simulate_run(SourceParams(), LinkParams(), clk, None, 1e-3, 1)
    assert t.offset_total_ps == 918251669509148370


def test_drift_scales_subscriber_time():
    src = SourceParams(pair_prob=0.01)
    a, _ = simulate_run(src, LinkParams(), IDEAL_CLK, None, 0.01, 4)
    b, _ = simulate_run(src, LinkParams(), ClockParams(drift_ppb=1000, jitter_sigma_ps=(0, 0, 0)), None, 0.01, 4)
    t_a, t_b = a.channel_times(1).astype(np.int64), b.channel_times(1).astype(np.int64)
    assert np.allclose(t_b - t_a, np.rint(t_a * 1e-6), atol=1)


def _coincidences(stream):
    # window shorter than the pulse period so neighbouring pulses add no accidentals
    return int(correlate(stream.channel_times(1), stream.channel_times(0), -2000, 10000, 100).counts.sum())


@pytest.fixture(scope="module")
def tomo_set():
    src = SourceParams(pair_prob=0.05, fss_omega_rad_per_ps=0.0)
    link = LinkParams(one_way_delay_ps=0, reflectance=0.0)
    return simulate_tomography_set(src, link, IDEAL_CLK, 0.02, 8)


def test_tomography_set_projections(tomo_set):
    assert tuple(tomo_set) == DEFAULT_SETTINGS
    n = {k: _coincidences(v) for k, v in tomo_set.items()}
    hh, vv, dd = n["HH"], n["VV"], n["DD"]
    assert abs(hh - vv) < 4 * np.sqrt(hh + vv)
    assert n["HV"] < 0.01 * hh
    # |<DD|phi+>|^2 = |<HH|phi+>|^2 = 1/2
    assert abs(dd - hh) < 4 * np.sqrt(dd + hh)


def test_born_rule_normalization():
    src = SourceParams(pair_prob=0.05, fss_omega_rad_per_ps=fss_omega(4.71))
    link = LinkParams(one_way_delay_ps=0, reflectance=0.0)
    for basis in (("H", "V"), ("D", "A"), ("R", "L")):
        totals, pairs = 0, 0
        for x in basis:
            for xx in basis:
                s, truth = simulate_run(src, link, IDEAL_CLK, MeasurementConfig.from_label(x + xx), 0.05, 100)
                totals += _coincidences(s)
                pairs += truth.n_pairs
        # the four outcome probabilities of every pair sum to one
        mean_pairs = pairs / 4
        assert abs(totals - mean_pairs) < 4 * np.sqrt(mean_pairs)


def test_tiny_run_can_be_empty():
    s = simulate_tomography_set(SourceParams(pair_prob=1e-6), LinkParams(), ClockParams(), 0.001, 1)
    assert any(len(v) == 0 or v.counts()[1] == 0 for v in s.values())


def test_hbt_single_emitter_has_no_zero_delay_pairs():
    s = simulate_hbt(0.2, 3, jitter_sigma_ps=0)
    h = correlate(s.channel_times(0), s.channel_times(1), -20000, 20000, 500)
    centre = h.counts[(20000 - 1000) // 500:(20000 + 1000) // 500].sum()
    side = h.counts[(20000 + 12500 - 1000) // 500:(20000 + 12500 + 1000) // 500].sum()
    assert centre == 0 and side > 100
