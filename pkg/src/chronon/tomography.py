"""Two-photon polarization tomography by maximum likelihood.

Basis order (HH, HV, VH, VV) with the exciton as the first qubit. Settings are
two-letter labels, first letter exciton, second biexciton, tokens
H, V, D=(H+V)/sqrt2, A=(H-V)/sqrt2, R=(H-iV)/sqrt2, L=(H+iV)/sqrt2.

The density matrix is parametrized as rho = T^dag T / tr(T^dag T) with T lower
triangular (16 real numbers); the Poissonian least-squares cost is minimized
with L-BFGS and random restarts.
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ProcessPoolExecutor
from dataclasses import dataclass, field
from typing import Mapping, Sequence

import numpy as np
from scipy.optimize import least_squares, minimize

from .correlator import correlate
from .qdsim import DEFAULT_SETTINGS, PolarizationState, polarization_vector, waveplate_unitary
from .timetags import TagStream

log = logging.getLogger(__name__)

SIGMA_Y = np.array([[0, -1j], [1j, 0]])
YY = np.kron(SIGMA_Y, SIGMA_Y)
PHI_PLUS = np.array([1, 0, 0, 1], dtype=complex) / math.sqrt(2)

# positions of the 16 real parameters inside the lower-triangular T
_DIAG = [(0, 0), (1, 1), (2, 2), (3, 3)]
_OFF = [(1, 0), (2, 1), (3, 2), (2, 0), (3, 1), (3, 0)]


class ReconstructionError(RuntimeError):
    pass


@dataclass(frozen=True, eq=False)
class DensityMatrix:
    elements: np.ndarray

    def __post_init__(self):
        rho = np.asarray(self.elements, dtype=complex)
        if rho.shape != (4, 4):
            raise ValueError("density matrix must be 4x4")
        object.__setattr__(self, "elements", rho)

    def __array__(self, dtype=None, copy=None):
        return self.elements if dtype is None else self.elements.astype(dtype)

    def check(self, herm_tol=1e-12, trace_tol=1e-10, psd_tol=1e-10) -> None:
        rho = self.elements
        if np.max(np.abs(rho - rho.conj().T)) >= herm_tol:
            raise ValueError("not Hermitian")
        if abs(np.trace(rho) - 1) > trace_tol:
            raise ValueError(f"trace {np.trace(rho).real} != 1")
        if np.linalg.eigvalsh(rho).min() <= -psd_tol:
            raise ValueError("not positive semidefinite")

    def to_json_dict(self) -> dict:
        return {"real": self.elements.real.tolist(), "imag": self.elements.imag.tolist()}

    @classmethod
    def from_state(cls, psi) -> "DensityMatrix":
        psi = _state_vector(psi)
        return cls(np.outer(psi, psi.conj()))

    @classmethod
    def werner(cls, p: float, psi=PHI_PLUS) -> "DensityMatrix":
        psi = _state_vector(psi)
        return cls(p * np.outer(psi, psi.conj()) + (1 - p) * np.eye(4) / 4)


@dataclass
class ProjectionCounts:
    setting: str
    coincidences: float
    accidental_estimate: float = 0.0


@dataclass
class WaveplateCorrection:
    theta_rad: float = 0.0
    phi_rad: float = 0.0
    target_qubit: str = "exciton"

    def __post_init__(self):
        if self.target_qubit not in ("exciton", "biexciton", "both"):
            raise ValueError(f"unknown target qubit {self.target_qubit!r}")
        if not (math.isfinite(self.theta_rad) and math.isfinite(self.phi_rad)):
            raise ValueError("waveplate angles must be finite")


def _state_vector(psi) -> np.ndarray:
    if isinstance(psi, PolarizationState):
        return psi.amplitudes
    return np.asarray(psi, dtype=complex).reshape(4)


def _matrix(rho) -> np.ndarray:
    return rho.elements if isinstance(rho, DensityMatrix) else np.asarray(rho, dtype=complex)


def setting_vectors(settings: Sequence[str] = DEFAULT_SETTINGS) -> np.ndarray:
    """Projector kets, shape (len(settings), 4)."""
    out = []
    for s in settings:
        if len(s) != 2:
            raise ValueError(f"bad setting label {s!r}")
        out.append(np.kron(polarization_vector(s[0]), polarization_vector(s[1])))
    return np.array(out)


def expected_counts(rho, n_total: float, settings: Sequence[str] = DEFAULT_SETTINGS) -> np.ndarray:
    """Noiseless counts ``N <psi_nu|rho|psi_nu>`` for each setting."""
    psi = setting_vectors(settings)
    return n_total * np.real(np.einsum("ni,ij,nj->n", psi.conj(), _matrix(rho), psi))


# --- maximum likelihood -----------------------------------------------------

def t_matrix(t: np.ndarray) -> np.ndarray:
    T = np.zeros((4, 4), dtype=complex)
    for k, (i, j) in enumerate(_DIAG):
        T[i, j] = t[k]
    for k, (i, j) in enumerate(_OFF):
        T[i, j] = t[4 + 2 * k] + 1j * t[5 + 2 * k]
    return T


def t_params(T: np.ndarray) -> np.ndarray:
    t = np.zeros(16)
    for k, (i, j) in enumerate(_DIAG):
        t[k] = T[i, j].real
    for k, (i, j) in enumerate(_OFF):
        t[4 + 2 * k] = T[i, j].real
        t[5 + 2 * k] = T[i, j].imag
    return t


def _lower_factor(m: np.ndarray) -> np.ndarray:
    """Lower-triangular T with T^dag T = m (m positive definite)."""
    rev = m[::-1, ::-1]
    L = np.linalg.cholesky(rev)
    return L.conj().T[::-1, ::-1]


def mle_cost(t: np.ndarray, psi: np.ndarray, counts: np.ndarray, grad: bool = False):
    """Poissonian cost sum (m - n)^2 / (2 m) with m = |T psi|^2, and its gradient."""
    T = t_matrix(t)
    u = psi @ T.T  # rows: T psi_nu
    m = np.maximum(np.sum(np.abs(u) ** 2, axis=1), 1e-12)
    cost = float(np.sum((m - counts) ** 2 / (2 * m)))
    if not grad:
        return cost
    w = (m**2 - counts**2) / (2 * m**2)
    G = np.einsum("n,na,nb->ab", w, u, psi.conj())
    g = np.zeros(16)
    for k, (i, j) in enumerate(_DIAG):
        g[k] = 2 * G[i, j].real
    for k, (i, j) in enumerate(_OFF):
        g[4 + 2 * k] = 2 * G[i, j].real
        g[5 + 2 * k] = 2 * G[i, j].imag
    return cost, g


def linear_inversion(counts, settings: Sequence[str] = DEFAULT_SETTINGS) -> np.ndarray:
    """Unnormalized linear estimate of N * rho (Hermitian, possibly not PSD)."""
    psi = setting_vectors(settings)
    paulis = [np.eye(2), np.array([[0, 1], [1, 0]]), SIGMA_Y, np.diag([1, -1])]
    basis = [np.kron(a, b) for a in paulis for b in paulis]
    A = np.array([[np.real(p.conj() @ s @ p) for s in basis] for p in psi])
    coef, *_ = np.linalg.lstsq(A, np.asarray(counts, float), rcond=None)
    return sum(c * s for c, s in zip(coef, basis))


def mle_reconstruct(counts, settings: Sequence[str] = DEFAULT_SETTINGS, *, restarts: int = 5,
                    seed: int | None = 0, init: np.ndarray | None = None, tol: float = 1e-10) -> DensityMatrix:
    """Maximum-likelihood density matrix from 16 projection counts.

    ``counts`` is a sequence of numbers in ``settings`` order, a mapping
    label -> count, or a sequence of :class:`ProjectionCounts`.
    """
    if isinstance(counts, Mapping):
        n = np.array([float(counts[s]) for s in settings])
    else:
        counts = list(counts)
        if counts and isinstance(counts[0], ProjectionCounts):
            lookup = {c.setting: c.coincidences - c.accidental_estimate for c in counts}
            n = np.array([float(lookup[s]) for s in settings])
        else:
            n = np.asarray(counts, dtype=float)
    if n.shape != (len(settings),):
        raise ValueError(f"expected {len(settings)} counts, got {n.shape}")
    if np.any(n < 0):
        n = np.clip(n, 0, None)
    total = float(n.sum())
    if total <= 0:
        raise ValueError("all-zero counts; nothing to reconstruct")
    if total < len(settings):
        raise ValueError(f"only {total:g} coincidences; need at least {len(settings)}")
    psi = setting_vectors(settings)
    scale = total / len(settings) * 2  # rough N so parameters start O(1)-normalized

    starts = []
    if init is not None:
        starts.append(np.asarray(init, float))
    else:
        m = linear_inversion(n, settings)
        m = 0.5 * (m + m.conj().T)
        vals, vecs = np.linalg.eigh(m)
        vals = np.clip(vals, 1e-3 * max(vals.max(), 1e-12) + 1e-9, None)
        starts.append(t_params(_lower_factor((vecs * vals) @ vecs.conj().T)))
    rng = np.random.default_rng(seed)
    for _ in range(max(0, restarts)):
        t = rng.normal(size=16)
        t[:4] = np.abs(t[:4]) + 0.1
        starts.append(t * math.sqrt(scale / 4))

    best = None
    for t0 in starts:
        r = minimize(mle_cost, t0, args=(psi, n, True), jac=True, method="L-BFGS-B",
                     options={"ftol": tol, "gtol": 1e-10 * total, "maxiter": 5000})
        if best is None or r.fun < best.fun:
            best = r
    T = t_matrix(best.x)
    rho = T.conj().T @ T
    tr = np.trace(rho).real
    if not np.isfinite(tr) or tr <= 0:
        raise ReconstructionError(f"degenerate reconstruction (trace {tr}); optimizer: {best.message}")
    rho = rho / tr
    rho = 0.5 * (rho + rho.conj().T)
    return DensityMatrix(rho)


# --- figures of merit -------------------------------------------------------

def fidelity(rho, target=PHI_PLUS) -> float:
    psi = _state_vector(target)
    return float(np.real(psi.conj() @ _matrix(rho) @ psi))


def concurrence(rho) -> float:
    """Wootters concurrence."""
    r = _matrix(rho)
    w, v = np.linalg.eigh(0.5 * (r + r.conj().T))
    root = (v * np.sqrt(np.clip(w, 0, None))) @ v.conj().T
    # the lambdas are the singular values of sqrt(rho) YY sqrt(rho)*; this
    # avoids square roots of tiny eigenvalues of rho @ rho_tilde
    lam = np.linalg.svd(root @ YY @ root.conj(), compute_uv=False)
    return float(max(0.0, lam[0] - lam[1] - lam[2] - lam[3]))


def apply_waveplate(rho, corr: WaveplateCorrection) -> DensityMatrix:
    """Virtual waveplate U = R(theta) diag(1, e^{i phi}) R(-theta) on the chosen qubit(s)."""
    u = waveplate_unitary(corr.theta_rad, corr.phi_rad)
    eye = np.eye(2)
    full = {"exciton": np.kron(u, eye), "biexciton": np.kron(eye, u), "both": np.kron(u, u)}[corr.target_qubit]
    r = full @ _matrix(rho) @ full.conj().T
    return DensityMatrix(0.5 * (r + r.conj().T))


# --- time-resolved tomography ----------------------------------------------

@dataclass
class ProjectionSeries:
    """Per-time-bin projection counts, ``counts[k, nu]``."""
    tau_start_ps: int
    bin_width_ps: int
    settings: tuple
    counts: np.ndarray
    accidentals: np.ndarray | None = None

    @property
    def centers(self) -> np.ndarray:
        return self.tau_start_ps + self.bin_width_ps * (np.arange(self.counts.shape[0]) + 0.5)

    def bin(self, k: int) -> list[ProjectionCounts]:
        acc = self.accidentals if self.accidentals is not None else np.zeros(len(self.settings))
        return [ProjectionCounts(s, float(c), float(a)) for s, c, a in zip(self.settings, self.counts[k], acc)]


def _pair_times(item, x_channel: int, xx_channel: int):
    if isinstance(item, TagStream):
        return item.channel_times(x_channel), item.channel_times(xx_channel)
    x, xx = item
    return np.asarray(x), np.asarray(xx)


def project_coincidences(streams: Mapping, peak_tau_ps: int, bin_width_ps: int = 16, window_bins: int = 256,
                         lead_bins: int = 16, *, settings: Sequence[str] = DEFAULT_SETTINGS, x_channel: int = 1,
                         xx_channel: int = 0, subtract_background: bool = False,
                         background_offset_ps: int = 6000) -> ProjectionSeries:
    """Histogram ``X - XX`` for every setting on a common time-bin grid.

    The grid starts ``lead_bins`` bins before ``peak_tau_ps``. With
    ``subtract_background`` a flat accidental level, measured in an equal
    window ending ``background_offset_ps`` before the grid, is subtracted.
    """
    missing = [s for s in settings if s not in streams]
    if missing:
        raise ValueError(f"missing settings: {', '.join(missing)}")
    start = int(peak_tau_ps) - lead_bins * bin_width_ps
    end = start + window_bins * bin_width_ps
    counts = np.zeros((window_bins, len(settings)))
    acc = np.zeros(len(settings)) if subtract_background else None
    for i, s in enumerate(settings):
        x, xx = _pair_times(streams[s], x_channel, xx_channel)
        counts[:, i] = correlate(x, xx, start, end, bin_width_ps).counts
        if subtract_background:
            bg = correlate(x, xx, start - background_offset_ps - window_bins * bin_width_ps,
                           start - background_offset_ps, bin_width_ps).counts
            acc[i] = float(np.mean(bg))
    if subtract_background:
        counts = np.clip(counts - acc, 0, None)
    return ProjectionSeries(start, bin_width_ps, tuple(settings), counts, acc)


@dataclass
class TomoConfig:
    bin_width_ps: int = 16
    window_bins: int = 256
    lead_bins: int = 16
    n_resamples: int = 100
    restarts: int = 5
    min_counts: int = 16
    seed: int = 0
    threads: int = 1
    subtract_background: bool = False
    settings: tuple = DEFAULT_SETTINGS
    x_channel: int = 1
    xx_channel: int = 0


@dataclass
class TimeBinSeries:
    bin_width_ps: int
    tau_ps: np.ndarray
    counts: np.ndarray
    valid: np.ndarray
    rho: list
    fidelity: np.ndarray
    fidelity_err: np.ndarray
    concurrence: np.ndarray
    concurrence_err: np.ndarray
    settings: tuple = DEFAULT_SETTINGS
    correction: WaveplateCorrection = field(default_factory=WaveplateCorrection)

    def best_bin(self) -> int:
        f = np.where(self.valid, self.fidelity, -np.inf)
        return int(np.argmax(f))

    def rows(self):
        for k in range(self.tau_ps.size):
            yield (k, float(self.tau_ps[k]), float(self.fidelity[k]), float(self.fidelity_err[k]),
                   float(self.concurrence[k]), float(self.concurrence_err[k]), bool(self.valid[k]),
                   float(self.counts[k].sum()))


def _reconstruct_bin(args):
    counts, corr, settings, restarts, n_resamples, seed = args
    rho = mle_reconstruct(counts, settings, restarts=restarts, seed=seed)
    rho_c = apply_waveplate(rho, corr)
    f, c = fidelity(rho_c), concurrence(rho_c)
    if n_resamples <= 0:
        return rho_c, f, math.nan, c, math.nan
    rng = np.random.default_rng(seed)
    t_init = t_params(_lower_factor(rho.elements * counts.sum() / len(settings) * 4
                                    + 1e-9 * np.eye(4)))
    fs, cs = [], []
    for _ in range(n_resamples):
        sample = rng.poisson(counts)
        if sample.sum() < len(settings):
            continue
        r = apply_waveplate(mle_reconstruct(sample, settings, restarts=0, init=t_init), corr)
        fs.append(fidelity(r))
        cs.append(concurrence(r))
    df = float(np.std(fs, ddof=1)) if len(fs) > 1 else math.nan
    dc = float(np.std(cs, ddof=1)) if len(cs) > 1 else math.nan
    return rho_c, f, df, c, dc


def reconstruct_series(series: ProjectionSeries, corr: WaveplateCorrection | None = None,
                       config: TomoConfig | None = None) -> TimeBinSeries:
    """MLE -> waveplate -> fidelity/concurrence for every time bin."""
    config = config or TomoConfig()
    corr = corr or WaveplateCorrection()
    nb = series.counts.shape[0]
    valid = series.counts.sum(axis=1) >= config.min_counts
    seeds = np.random.SeedSequence(config.seed).generate_state(nb)
    jobs = [(series.counts[k], corr, series.settings, config.restarts, config.n_resamples, int(seeds[k]))
            for k in range(nb) if valid[k]]
    if config.threads > 1 and len(jobs) > 1:
        with ProcessPoolExecutor(config.threads) as pool:
            results = list(pool.map(_reconstruct_bin, jobs, chunksize=max(1, len(jobs) // (4 * config.threads))))
    else:
        results = [_reconstruct_bin(j) for j in jobs]
    rho = [None] * nb
    F = np.full(nb, np.nan)
    dF = np.full(nb, np.nan)
    C = np.full(nb, np.nan)
    dC = np.full(nb, np.nan)
    for k, res in zip(np.nonzero(valid)[0], results):
        rho[k], F[k], dF[k], C[k], dC[k] = res
    return TimeBinSeries(series.bin_width_ps, series.centers, series.counts, valid, rho, F, dF, C, dC,
                         tuple(series.settings), corr)


def tomo_timeseries(streams: Mapping, corr: WaveplateCorrection | None = None, config: TomoConfig | None = None,
                    peak_tau_ps: int = 0) -> TimeBinSeries:
    """Time-bin resolved tomography of the XX-X cascade."""
    config = config or TomoConfig()
    series = project_coincidences(streams, peak_tau_ps, config.bin_width_ps, config.window_bins, config.lead_bins,
                                  settings=config.settings, x_channel=config.x_channel,
                                  xx_channel=config.xx_channel, subtract_background=config.subtract_background)
    return reconstruct_series(series, corr, config)


@dataclass
class Oscillation:
    offset: float
    amplitude: float
    omega_rad_per_ps: float
    phase_rad: float
    omega_err: float

    @property
    def period_ps(self) -> float:
        return 2 * math.pi / self.omega_rad_per_ps

    @property
    def period_err_ps(self) -> float:
        return self.period_ps * self.omega_err / self.omega_rad_per_ps


def fit_fidelity_oscillation(series: TimeBinSeries, omega_guess: float) -> Oscillation:
    """Fit ``F(t) = a + b cos(w t + phi)`` to the valid bins of a series.

    The phase is scanned on a grid before the least-squares polish so the
    fit does not depend on where the first bin falls in the cycle.
    """
    v = series.valid & np.isfinite(series.fidelity)
    if v.sum() < 5:
        raise ValueError("need at least 5 valid bins")
    t = series.tau_ps[v] - series.tau_ps[v][0]
    f = series.fidelity[v]
    err = series.fidelity_err[v]
    w = 1.0 / np.where(np.isfinite(err) & (err > 0), err, np.nanmedian(err) if np.any(err > 0) else 1.0)

    def resid(p):
        return (p[0] + p[1] * np.cos(p[2] * t + p[3]) - f) * w

    best = None
    for phi in np.linspace(0, 2 * math.pi, 8, endpoint=False):
        p0 = [float(np.mean(f)), float(np.ptp(f) / 2), omega_guess, phi]
        r = least_squares(resid, p0, bounds=([-np.inf, 0, 0.5 * omega_guess, -np.inf],
                                             [np.inf, np.inf, 2 * omega_guess, np.inf]))
        if best is None or r.cost < best.cost:
            best = r
    cov = np.linalg.pinv(best.jac.T @ best.jac) * max(1.0, 2 * best.cost / max(1, t.size - 4))
    a, b, om, ph = best.x
    return Oscillation(float(a), float(b), float(om), float(math.remainder(ph, 2 * math.pi)),
                       float(math.sqrt(max(cov[2, 2], 0.0))))
