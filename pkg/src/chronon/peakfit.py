"""Least-squares fits of correlation histograms.

* :func:`fit_cascade` -- rise/decay cascade peak with fine-structure beating,
  used to locate the synchronization peak (its maximum, ``tau_max``).
* :func:`fit_g2` -- pulsed autocorrelation: two-sided exponential peaks under
  a blinking envelope, convolved with a Gaussian instrument response.

Both weight residuals with Poisson variances ``max(counts, 1)``.
"""
from __future__ import annotations

import json
import math
from dataclasses import asdict, dataclass, field

import numpy as np
from scipy.optimize import least_squares

from .correlator import CorrelationHistogram
from .qdsim import fss_omega

CASCADE_PARAMS = ("A", "B", "tau_rise_ps", "tau_decay_ps", "omega_rad_per_ps", "phi_rad", "C", "t0_ps")
G2_PARAMS = ("a0", "a_side", "tau_decay_ps", "blink_amp", "blink_time_ps", "floor")
GOLDEN = (math.sqrt(5) - 1) / 2


class FitError(RuntimeError):
    def __init__(self, message: str, state=None):
        super().__init__(message)
        self.state = state


# --- cascade model ----------------------------------------------------------

def cascade_model(t, A, B, tau_rise, tau_decay, omega, phi, C, t0):
    """Cascade peak; equals the background ``C`` before ``t0``."""
    t = np.asarray(t, dtype=float)
    x = t - t0
    pos = x > 0
    xp = np.where(pos, x, 0.0)
    shape = -np.expm1(-xp / tau_rise) * np.exp(-xp / tau_decay) * (1 + B * np.cos(omega * xp + phi))
    return C + A * np.where(pos, shape, 0.0)


def cascade_jacobian(t, A, B, tau_rise, tau_decay, omega, phi, C, t0):
    """Analytic derivatives of :func:`cascade_model`, shape (n, 8)."""
    t = np.asarray(t, dtype=float)
    x = t - t0
    pos = x > 0
    x = np.where(pos, x, 0.0)
    er = np.exp(-x / tau_rise)
    g = -np.expm1(-x / tau_rise)
    h = np.exp(-x / tau_decay)
    arg = omega * x + phi
    cs, sn = np.cos(arg), np.sin(arg)
    k = 1 + B * cs
    J = np.zeros((t.size, 8))
    J[:, 0] = g * h * k
    J[:, 1] = A * g * h * cs
    J[:, 2] = -A * er * x / tau_rise**2 * h * k
    J[:, 3] = A * g * h * k * x / tau_decay**2
    J[:, 4] = -A * g * h * B * sn * x
    J[:, 5] = -A * g * h * B * sn
    dfdx = A * (er / tau_rise * h * k - g * h * k / tau_decay - g * h * B * omega * sn)
    J[:, 7] = -dfdx
    J[~pos, :] = 0.0
    J[:, 6] = 1.0
    return J


def _golden_max(f, lo: float, hi: float, tol: float = 1e-6) -> float:
    a, b = lo, hi
    c = b - GOLDEN * (b - a)
    d = a + GOLDEN * (b - a)
    fc, fd = f(c), f(d)
    while b - a > tol:
        if fc > fd:
            b, d, fd = d, c, fc
            c = b - GOLDEN * (b - a)
            fc = f(c)
        else:
            a, c, fc = c, d, fd
            d = a + GOLDEN * (b - a)
            fd = f(d)
    return 0.5 * (a + b)


def cascade_argmax(p) -> float:
    """Location of the maximum of the cascade curve over [t0, t0 + 5 tau_decay].

    A coarse grid picks the global bracket (the beating can create several
    local maxima), golden-section search refines inside it.
    """
    A, B, tr, td, w, phi, C, t0 = p
    hi = t0 + 5 * td
    grid = np.linspace(t0, hi, 4001)
    vals = cascade_model(grid, *p)
    i = int(np.argmax(vals))
    lo_b, hi_b = grid[max(i - 1, 0)], grid[min(i + 1, grid.size - 1)]
    return _golden_max(lambda s: float(cascade_model(np.array([s]), *p)[0]), lo_b, hi_b)


@dataclass
class CascadeFit:
    A: float
    B: float
    tau_rise_ps: float
    tau_decay_ps: float
    omega_rad_per_ps: float
    phi_rad: float
    C: float
    t0_local_ps: float
    tau_max_local_ps: float
    origin_ps: int = 0
    errors: dict = field(default_factory=dict)
    tau_max_err_ps: float = float("nan")
    rss: float = float("nan")
    chi2_red: float = float("nan")
    n_bins: int = 0
    at_bound: list = field(default_factory=list)
    nfev: int = 0
    covariance: list | None = None
    fixed: list = field(default_factory=list)

    @property
    def t0_ps(self) -> float:
        return self.origin_ps + self.t0_local_ps

    @property
    def tau_max_ps(self) -> float:
        return self.origin_ps + self.tau_max_local_ps

    def local_params(self) -> np.ndarray:
        return np.array([self.A, self.B, self.tau_rise_ps, self.tau_decay_ps, self.omega_rad_per_ps,
                         self.phi_rad, self.C, self.t0_local_ps])

    def model(self, h: CorrelationHistogram) -> np.ndarray:
        return cascade_model(h.centers - self.origin_ps, *self.local_params())

    def to_dict(self) -> dict:
        d = asdict(self)
        d["t0_ps"] = self.t0_ps
        d["tau_max_ps"] = self.tau_max_ps
        d["model"] = "cascade"
        return d

    @classmethod
    def from_dict(cls, d: dict) -> "CascadeFit":
        keep = {k: v for k, v in d.items() if k in cls.__dataclass_fields__}
        return cls(**keep)


def _poisson_sigma(counts: np.ndarray) -> np.ndarray:
    return np.sqrt(np.maximum(counts, 1.0))


def cascade_initial_guess(h: CorrelationHistogram, omega: float | None = None) -> np.ndarray:
    """Starting point in histogram-local coordinates (origin = tau_start)."""
    y = h.counts.astype(float)
    x = h.centers - h.tau_start_ps
    med = float(np.median(y))
    mad = 1.4826 * float(np.median(np.abs(y - med)))
    thresh = med + 5 * max(mad, math.sqrt(max(med, 1.0)))
    above = np.nonzero(y > thresh)[0]
    t0 = float(x[above[0]] - h.bin_width_ps) if above.size else float(x[int(np.argmax(y))] - 3 * h.bin_width_ps)
    w = fss_omega(4.71) if omega is None else omega
    return np.array([max(y.max() - med, 1.0), 0.1, 3.0 * h.bin_width_ps, 1140.0, w, 0.0, med, t0])


def fit_cascade(h: CorrelationHistogram, init: CascadeFit | np.ndarray | None = None, *,
                omega: float | None = None, phases: int = 4, max_nfev: int = 2000,
                fixed: dict | None = None) -> CascadeFit:
    """Fit the cascade peak and locate its maximum.

    Without ``init`` the fit is restarted from ``phases`` evenly spaced
    starting phases (the beating term is multimodal in phi) and the lowest
    residual wins.

    ``fixed`` maps parameter names (see ``CASCADE_PARAMS``) to values held
    constant. Fixing ``B`` to 0 also fixes ``omega_rad_per_ps`` and
    ``phi_rad``, which are then unidentifiable; this is the right choice
    for polarization-unresolved histograms where the beat averages out.
    """
    fixed = dict(fixed or {})
    unknown = set(fixed) - set(CASCADE_PARAMS)
    if unknown:
        raise ValueError(f"unknown fixed parameters: {sorted(unknown)}")
    if fixed.get("B", None) == 0:
        fixed.setdefault("omega_rad_per_ps", fss_omega(4.71) if omega is None else omega)
        fixed.setdefault("phi_rad", 0.0)
        phases = 1
    if h.n_bins < 10:
        raise ValueError("histogram too short for a cascade fit")
    y = h.counts.astype(float)
    if not np.any(y > 0):
        raise FitError("histogram has no counts")
    sigma = _poisson_sigma(y)
    x = h.centers - h.tau_start_ps
    span = float(h.n_bins * h.bin_width_ps)

    if isinstance(init, CascadeFit):
        p0 = init.local_params().copy()
        p0[7] += init.origin_ps - h.tau_start_ps
        starts = [p0]
    elif init is not None:
        starts = [np.asarray(init, float)]
    else:
        base = cascade_initial_guess(h, omega)
        starts = []
        for k in range(max(1, phases)):
            p = base.copy()
            p[5] = 2 * math.pi * k / max(1, phases)
            starts.append(p)

    lower = np.array([0.0, 0.0, 1e-3, 1.0, 0.0, -np.inf, -np.inf, x[0] - span])
    upper = np.array([np.inf, 1.0, 20 * span, 50 * span, math.pi / h.bin_width_ps, np.inf, np.inf, x[-1]])

    free = np.array([name not in fixed for name in CASCADE_PARAMS])
    fixed_idx = [CASCADE_PARAMS.index(k) for k in fixed]
    template = np.zeros(8)
    template[fixed_idx] = [float(fixed[k]) for k in fixed]

    def full(q):
        p = template.copy()
        p[free] = q
        return p

    def resid(q):
        return (cascade_model(x, *full(q)) - y) / sigma

    def jac_full(p):
        return cascade_jacobian(x, *p) / sigma[:, None]

    def jac(q):
        return jac_full(full(q))[:, free]

    with np.errstate(invalid="ignore"):
        inner_lo = np.where(np.isfinite(lower), lower + 1e-9 * (np.abs(lower) + 1), lower)
        inner_hi = np.where(np.isfinite(upper), upper - 1e-9 * (np.abs(upper) + 1), upper)
    best = None
    for p0 in starts:
        p0 = np.clip(p0, inner_lo, inner_hi)[free]
        r = least_squares(resid, p0, jac=jac, bounds=(lower[free], upper[free]), x_scale="jac", method="trf",
                          xtol=1e-12, ftol=1e-12, gtol=1e-12, max_nfev=max_nfev)
        if best is None or r.cost < best.cost:
            best = r
    if best.status == 0:
        raise FitError("cascade fit did not converge within max_nfev", full(best.x))

    p = full(best.x)
    if p[1] < 0:
        p[1], p[5] = -p[1], p[5] + math.pi
    p[5] = math.remainder(p[5], 2 * math.pi)
    dof = max(1, h.n_bins - int(free.sum()))
    chi2_red = 2 * best.cost / dof
    J = jac_full(p)[:, free]
    cov = np.zeros((8, 8))
    cov[np.ix_(free, free)] = np.linalg.pinv(J.T @ J) * max(1.0, chi2_red)
    err = np.sqrt(np.clip(np.diag(cov), 0, None))
    tmax = cascade_argmax(p)
    grad = np.zeros(8)
    for i in np.nonzero(free)[0]:
        step = 1e-6 * max(abs(p[i]), 1e-3)
        pp, pm = p.copy(), p.copy()
        pp[i] += step
        pm[i] -= step
        grad[i] = (cascade_argmax(pp) - cascade_argmax(pm)) / (2 * step)
    tmax_err = float(math.sqrt(max(grad @ cov @ grad, 0.0)))
    at_bound = [name for name, v, lo, hi, fr in zip(CASCADE_PARAMS, p, lower, upper, free)
                if fr and np.isclose(v, lo, rtol=1e-9, atol=1e-12) or np.isclose(v, hi, rtol=1e-9, atol=1e-12)]
    rss = float(np.sum((cascade_model(x, *p) - y) ** 2))
    return CascadeFit(*p[:7], t0_local_ps=float(p[7]), tau_max_local_ps=float(tmax), origin_ps=h.tau_start_ps,
                      errors=dict(zip(CASCADE_PARAMS, err.tolist())), tau_max_err_ps=tmax_err, rss=rss,
                      chi2_red=float(chi2_red), n_bins=h.n_bins, at_bound=at_bound, nfev=int(best.nfev),
                      covariance=cov.tolist(), fixed=sorted(fixed))


# --- g2 model ---------------------------------------------------------------

@dataclass
class G2Fit:
    peak_amplitudes: dict
    tau_decay_ps: float
    blinking_amplitude: float
    blinking_time_ps: float
    irf_sigma_ps: float
    g2_zero: float
    g2_zero_err: float
    floor: float = 0.0
    rep_period_ps: float = 12500.0
    params: list = field(default_factory=list)
    errors: dict = field(default_factory=dict)
    chi2_red: float = float("nan")
    at_bound: list = field(default_factory=list)

    def model(self, h: CorrelationHistogram) -> np.ndarray:
        return _G2Model(h, self.rep_period_ps, self.irf_sigma_ps)(np.asarray(self.params))

    def to_dict(self) -> dict:
        d = asdict(self)
        d["peak_amplitudes"] = {str(k): v for k, v in self.peak_amplitudes.items()}
        d["model"] = "g2"
        return d


class _G2Model:
    def __init__(self, h: CorrelationHistogram, period: float, irf_sigma: float, oversample: int | None = None):
        self.period = period
        self.irf_sigma = irf_sigma
        bw = h.bin_width_ps
        if oversample is None:
            oversample = max(1, int(math.ceil(4 * bw / max(irf_sigma, 1e-9)))) if irf_sigma > 0 else 1
            oversample = min(oversample, 32)
        self.os = oversample
        sub = bw / oversample
        pad = int(math.ceil(5 * irf_sigma / sub)) if irf_sigma > 0 else 0
        self.pad = pad
        n_fine = h.n_bins * oversample + 2 * pad
        self.t = h.tau_start_ps + (np.arange(n_fine) - pad + 0.5) * sub
        if irf_sigma > 0:
            u = np.arange(-pad, pad + 1) * sub
            k = np.exp(-0.5 * (u / irf_sigma) ** 2)
            self.kernel = k / k.sum()
        else:
            self.kernel = None
        kmax = int(math.ceil(max(abs(self.t[0]), abs(self.t[-1])) / period)) + 2
        self.ks = np.arange(-kmax, kmax + 1)
        self.n_bins = h.n_bins

    def blink(self, t, b, tb):
        return 1 + b * np.exp(-np.abs(t) / tb)

    def __call__(self, p):
        a0, aside, tau, b, tb, floor = p
        amps = np.where(self.ks == 0, a0, aside)
        peaks = np.zeros_like(self.t)
        for k, a in zip(self.ks, amps):
            peaks += a * np.exp(-np.abs(self.t - k * self.period) / tau)
        fine = peaks * self.blink(self.t, b, tb)
        if self.kernel is not None:
            fine = np.convolve(fine, self.kernel, mode="same")
        fine = fine[self.pad: self.pad + self.n_bins * self.os]
        return fine.reshape(self.n_bins, self.os).mean(axis=1) + floor


def irf_sigma_from(value_ps: float = 50.0, mode: str = "sigma") -> float:
    """Interpret the quoted IRF width as a Gaussian sigma or as a FWHM."""
    if mode == "sigma":
        return value_ps
    if mode == "fwhm":
        return value_ps / (2 * math.sqrt(2 * math.log(2)))
    raise ValueError(f"unknown IRF mode {mode!r}")


def fit_g2(h: CorrelationHistogram, rep_period_ps: float = 12500.0, *, irf_sigma_ps: float = 50.0,
           tau_guess_ps: float = 1000.0, far_index: int = 5, max_nfev: int = 500) -> G2Fit:
    """Fit a pulsed autocorrelation and extract g2(0).

    g2(0) is the centre peak amplitude over the mean amplitude of side peaks
    with ``|k| >= far_index`` (outside the blinking bunching envelope).
    """
    half = min(-h.tau_start_ps, h.tau_end_ps)
    if half < 7 * rep_period_ps:
        raise ValueError("histogram must span >= 7 repetition periods on each side of zero")
    y = h.counts.astype(float)
    sigma = _poisson_sigma(y)
    model = _G2Model(h, rep_period_ps, irf_sigma_ps)
    c = h.centers

    def level_at(t):
        i = int(np.argmin(np.abs(c - t)))
        return float(np.mean(y[max(0, i - 1): i + 2]))

    floor0 = float(np.min(y))
    side = [level_at(sgn * k * rep_period_ps) for k in range(far_index, far_index + 2) for sgn in (1, -1)]
    aside0 = max(float(np.mean(side)) - floor0, 1.0)
    a00 = max(level_at(0.0) - floor0, 0.0)
    p0 = np.array([a00, aside0, tau_guess_ps, 0.0, 3 * rep_period_ps, floor0])
    lower = np.array([0.0, 0.0, 1.0, 0.0, 0.1 * rep_period_ps, 0.0])
    upper = np.array([np.inf, np.inf, rep_period_ps, 50.0, 1e3 * rep_period_ps, np.inf])
    p0 = np.clip(p0, lower, upper - 1e-9)

    def resid(p):
        return (model(p) - y) / sigma

    r = least_squares(resid, p0, bounds=(lower, upper), x_scale="jac", method="trf", max_nfev=max_nfev)
    if r.status == 0:
        raise FitError("g2 fit did not converge", r.x)
    p = r.x
    dof = max(1, h.n_bins - p.size)
    chi2_red = 2 * r.cost / dof
    cov = np.linalg.pinv(r.jac.T @ r.jac) * max(1.0, chi2_red)

    ks = [k for k in range(-int(half // rep_period_ps), int(half // rep_period_ps) + 1)]

    def peak_amps(q):
        a0, aside, tau, b, tb, fl = q
        return {k: float((a0 if k == 0 else aside) * model.blink(k * rep_period_ps, b, tb)) for k in ks}

    def g2_of(q):
        amps = peak_amps(q)
        far = [amps[k] for k in ks if abs(k) >= far_index]
        return amps[0] / np.mean(far) if np.mean(far) > 0 else float("nan")

    g2 = g2_of(p)
    grad = np.zeros(p.size)
    for i in range(p.size):
        step = 1e-6 * max(abs(p[i]), 1e-3)
        pp, pm = p.copy(), p.copy()
        pp[i] += step
        pm[i] = max(pm[i] - step, lower[i])
        grad[i] = (g2_of(pp) - g2_of(pm)) / (pp[i] - pm[i])
    g2_err = float(math.sqrt(max(grad @ cov @ grad, 0.0)))
    at_bound = [n for n, v, lo, hi in zip(G2_PARAMS, p, lower, upper) if np.isclose(v, lo) or np.isclose(v, hi)]
    return G2Fit(peak_amplitudes=peak_amps(p), tau_decay_ps=float(p[2]), blinking_amplitude=float(p[3]),
                 blinking_time_ps=float(p[4]), irf_sigma_ps=irf_sigma_ps, g2_zero=float(g2), g2_zero_err=g2_err,
                 floor=float(p[5]), rep_period_ps=rep_period_ps, params=p.tolist(),
                 errors=dict(zip(G2_PARAMS, np.sqrt(np.clip(np.diag(cov), 0, None)).tolist())),
                 chi2_red=float(chi2_red), at_bound=at_bound)


# --- residuals --------------------------------------------------------------

@dataclass
class ResidualReport:
    tau_ps: list
    residuals: list
    normalized: list
    chi2: float
    dof: int
    chi2_red: float
    flagged: bool
    threshold: float

    def to_dict(self) -> dict:
        return asdict(self)

    def to_text(self) -> str:
        lines = [f"# chi2 = {self.chi2:.6g}  dof = {self.dof}  reduced = {self.chi2_red:.6g}"
                 f"  {'FLAGGED' if self.flagged else 'ok'} (threshold {self.threshold})",
                 "tau_ps,residual,normalized"]
        lines += [f"{t:.1f},{r:.6g},{z:.6g}" for t, r, z in zip(self.tau_ps, self.residuals, self.normalized)]
        return "\n".join(lines) + "\n"

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), indent=2)


def residual_report(fit: CascadeFit | G2Fit, h: CorrelationHistogram, *, threshold: float = 2.0) -> ResidualReport:
    """Per-bin residuals and Poisson-weighted reduced chi-square."""
    y = h.counts.astype(float)
    model = fit.model(h)
    res = y - model
    z = res / _poisson_sigma(y)
    n_par = 8 if isinstance(fit, CascadeFit) else len(G2_PARAMS)
    dof = max(1, h.n_bins - n_par)
    chi2 = float(np.sum(z**2))
    return ResidualReport(h.centers.tolist(), res.tolist(), z.tolist(), chi2, dof, chi2 / dof,
                          chi2 / dof > threshold, threshold)
