import math

import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from chronon.qdsim import DEFAULT_SETTINGS, waveplate_unitary
from chronon.tomography import (PHI_PLUS, DensityMatrix, ProjectionCounts, ProjectionSeries, TomoConfig,
                                WaveplateCorrection, apply_waveplate, concurrence, expected_counts, fidelity,
                                linear_inversion, mle_cost, mle_reconstruct, project_coincidences,
                                reconstruct_series, setting_vectors, t_matrix, t_params)


def haar_state(rng):
    v = rng.normal(size=4) + 1j * rng.normal(size=4)
    return v / np.linalg.norm(v)


def test_settings_are_informationally_complete():
    psi = setting_vectors(DEFAULT_SETTINGS)
    ops = np.array([np.outer(p, p.conj()).ravel() for p in psi])
    assert np.linalg.matrix_rank(ops) == 16


@pytest.mark.parametrize("p", [0.0, 0.4, 0.8, 1.0])
def test_werner_analytic_values(p):
    rho = DensityMatrix.werner(p)
    rho.check()
    assert fidelity(rho) == pytest.approx((3 * p + 1) / 4, abs=1e-12)
    assert concurrence(rho) == pytest.approx(max(0.0, (3 * p - 1) / 2), abs=1e-12)


def test_product_state_has_no_concurrence():
    hh = np.array([1, 0, 0, 0])
    assert concurrence(DensityMatrix.from_state(hh)) == pytest.approx(0.0, abs=1e-12)
    assert concurrence(DensityMatrix.from_state(PHI_PLUS)) == pytest.approx(1.0, abs=1e-12)


@settings(max_examples=30, deadline=None)
@given(st.floats(0, math.pi), st.floats(-math.pi, math.pi), st.floats(0, 1))
def test_concurrence_local_unitary_invariant(theta, phi, p):
    rho = DensityMatrix.werner(p)
    u = np.kron(waveplate_unitary(theta, phi), waveplate_unitary(phi, theta))
    rotated = u @ rho.elements @ u.conj().T
    assert concurrence(rotated) == pytest.approx(concurrence(rho), abs=1e-10)


@given(st.floats(0, 1), st.floats(0, 1))
def test_fidelity_is_linear(p, q):
    a, b = DensityMatrix.werner(1.0).elements, DensityMatrix(np.eye(4) / 4).elements
    mix = q * a + (1 - q) * b
    assert fidelity(mix) == pytest.approx(q * fidelity(a) + (1 - q) * fidelity(b), abs=1e-12)


def test_t_matrix_roundtrip():
    rng = np.random.default_rng(0)
    t = rng.normal(size=16)
    t[:4] = np.abs(t[:4]) + 0.1
    assert np.allclose(t_params(t_matrix(t)), t)


def test_cost_gradient_matches_finite_differences():
    rng = np.random.default_rng(1)
    psi = setting_vectors(DEFAULT_SETTINGS)
    counts = rng.poisson(expected_counts(DensityMatrix.werner(0.7), 1000.0)).astype(float)
    t = rng.normal(size=16) * 3
    _, g = mle_cost(t, psi, counts, grad=True)
    for i in range(16):
        e = np.zeros(16)
        e[i] = 1e-6
        num = (mle_cost(t + e, psi, counts) - mle_cost(t - e, psi, counts)) / 2e-6
        assert g[i] == pytest.approx(num, rel=1e-5, abs=1e-6)


def test_noiseless_reconstruction_exact():
    rho = DensityMatrix.werner(0.6)
    est = mle_reconstruct(expected_counts(rho, 1e5))
    est.check()
    assert np.allclose(est.elements, rho.elements, atol=1e-5)


def test_linear_inversion_noiseless():
    rho = DensityMatrix.werner(0.3)
    est = linear_inversion(expected_counts(rho, 500.0))
    assert np.allclose(est / np.trace(est), rho.elements, atol=1e-10)


def test_reconstruction_always_physical():
    rng = np.random.default_rng(2)
    for _ in range(5):
        counts = rng.poisson(3.0, size=16) + 1
        est = mle_reconstruct(counts)
        est.check()


def test_input_forms_agree():
    counts = np.random.default_rng(3).poisson(expected_counts(DensityMatrix.werner(0.9), 2000.0))
    a = mle_reconstruct(counts)
    b = mle_reconstruct(dict(zip(DEFAULT_SETTINGS, counts)))
    c = mle_reconstruct([ProjectionCounts(s, float(n)) for s, n in zip(DEFAULT_SETTINGS, counts)])
    assert np.allclose(a.elements, b.elements, atol=1e-6)
    assert np.allclose(a.elements, c.elements, atol=1e-6)


@pytest.mark.parametrize("counts", [np.zeros(16), np.r_[np.ones(3), np.zeros(13)], np.ones(5)])
def test_insufficient_counts_rejected(counts):
    with pytest.raises(ValueError):
        mle_reconstruct(counts)


def test_haar_states_high_fidelity():
    rng = np.random.default_rng(4)
    for _ in range(10):
        psi = haar_state(rng)
        counts = rng.poisson(expected_counts(DensityMatrix.from_state(psi), 1e5))
        assert fidelity(mle_reconstruct(counts), psi) > 0.99


def test_waveplate_undoes_link_rotation():
    theta, phi = 0.4545, -0.6763
    u = np.kron(waveplate_unitary(theta, phi), np.eye(2))
    rotated = DensityMatrix.from_state(u @ PHI_PLUS)
    assert fidelity(rotated) < 0.9
    fixed = apply_waveplate(rotated, WaveplateCorrection(theta, -phi))
    assert fidelity(fixed) == pytest.approx(1.0, abs=1e-12)
    assert concurrence(fixed) == pytest.approx(concurrence(rotated), abs=1e-10)


def test_waveplate_validates():
    with pytest.raises(ValueError):
        WaveplateCorrection(0.1, 0.2, "photon")
    with pytest.raises(ValueError):
        WaveplateCorrection(float("nan"), 0.0)


def test_missing_settings_listed():
    streams = {s: (np.array([], np.uint64), np.array([], np.uint64)) for s in DEFAULT_SETTINGS[:10]}
    with pytest.raises(ValueError, match="HD"):
        project_coincidences(streams, 0)


def test_projection_from_arrays():
    rng = np.random.default_rng(5)
    streams = {}
    for s in DEFAULT_SETTINGS:
        xx = np.sort(rng.integers(0, 10**9, 200)).astype(np.uint64) * np.uint64(10)
        streams[s] = (xx + np.uint64(40), xx)
    ser = project_coincidences(streams, 0, bin_width_ps=16, window_bins=8, lead_bins=2)
    assert ser.counts.shape == (8, 16)
    assert np.all(ser.counts[4] == 200)  # 40 ps falls in bin [32, 48)
    assert ser.counts.sum() == 200 * 16


def test_invalid_bins_are_masked():
    counts = np.zeros((3, 16))
    counts[1] = expected_counts(DensityMatrix.werner(1.0), 400.0)
    ser = ProjectionSeries(0, 16, DEFAULT_SETTINGS, counts)
    out = reconstruct_series(ser, config=TomoConfig(n_resamples=5, restarts=1))
    assert out.valid.tolist() == [False, True, False]
    assert np.isnan(out.fidelity[0]) and out.fidelity[1] > 0.97
    assert out.best_bin() == 1
    assert len(list(out.rows())) == 3


def test_waveplate_on_simulated_birefringent_link():
    from dataclasses import replace
    from chronon.config import RunConfig
    from chronon.pipeline import tomo_series
    cfg = RunConfig()
    # the link applies the inverse of the (0.4545, -0.6763) correction to the exciton photon
    cfg.link = replace(cfg.link, rotation_theta_rad=0.4545, rotation_phi_rad=0.6763)
    cfg.tomo = replace(cfg.tomo, duration_s=0.004, window_bins=12, n_resamples=0, restarts=1)
    raw = tomo_series(cfg, 1)
    cfg.tomo = replace(cfg.tomo, waveplate_theta_rad=0.4545, waveplate_phi_rad=-0.6763)
    fixed = tomo_series(cfg, 1)
    k = fixed.best_bin()
    assert fixed.fidelity[k] > raw.fidelity[k] + 0.05
    assert fixed.fidelity[k] > 0.9
    assert np.nanmax(np.abs(fixed.concurrence - raw.concurrence)) < 1e-6
