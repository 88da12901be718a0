"""Monte-Carlo timestamp generator for a quantum-dot XX-X cascade source.

Channel map of :func:`simulate_run`:

* 0 -- biexciton (XX) photon detected at the master node (master clock)
* 1 -- exciton (X) photon transmitted to the subscriber (subscriber clock)
* 2 -- exciton photon reflected back and detected at the master (master clock)

Qubit order in every polarization vector is (exciton, biexciton); the basis
index is ``2 * x + xx`` with H=0, V=1.
"""
from __future__ import annotations

import math
from dataclasses import asdict, dataclass, field
from decimal import Decimal

import numpy as np

from .timetags import TagStream

HBAR_EV_S = 6.582119569e-16
# lead-in so jittered tags near t=0 stay non-negative
EPOCH_PS = 1_000_000

SQRT_HALF = 1 / math.sqrt(2)
POLARIZATIONS = {
    "H": np.array([1, 0], dtype=complex),
    "V": np.array([0, 1], dtype=complex),
    "D": np.array([1, 1], dtype=complex) * SQRT_HALF,
    "A": np.array([1, -1], dtype=complex) * SQRT_HALF,
    "R": np.array([1, -1j], dtype=complex) * SQRT_HALF,
    "L": np.array([1, 1j], dtype=complex) * SQRT_HALF,
}

# James-Kwiat-Munro-White 16-setting set; first letter exciton, second biexciton
DEFAULT_SETTINGS = ("HH", "HV", "VV", "VH", "RH", "RV", "DV", "DH",
                    "DR", "DD", "RD", "HD", "VD", "VL", "HL", "RL")


def fss_omega(splitting_uev: float) -> float:
    """Angular precession frequency in rad/ps for a splitting in micro-eV."""
    return splitting_uev * 1e-6 / HBAR_EV_S * 1e-12


def polarization_vector(token: str) -> np.ndarray:
    try:
        return POLARIZATIONS[token]
    except KeyError:
        raise ValueError(f"unknown polarization token {token!r}; use one of {''.join(POLARIZATIONS)}") from None


def waveplate_unitary(theta: float, phi: float) -> np.ndarray:
    """R(theta) diag(1, e^{i phi}) R(-theta)."""
    c, s = math.cos(theta), math.sin(theta)
    rot = np.array([[c, -s], [s, c]], dtype=complex)
    return rot @ np.diag([1, np.exp(1j * phi)]) @ rot.T


@dataclass
class SourceParams:
    rep_period_ps: float = 12500.0
    pair_prob: float = 0.001
    tau_xx_ps: float = 1380.0
    tau_x_ps: float = 1140.0
    fss_omega_rad_per_ps: float = fss_omega(4.71)
    blink_on_ms: float = 0.0
    blink_off_ms: float = 0.0
    background_rate_hz: float = 0.0

    def validate(self):
        if not 0.0 <= self.pair_prob <= 1.0:
            raise ValueError(f"pair_prob {self.pair_prob} outside [0, 1]")
        for name in ("rep_period_ps", "tau_xx_ps", "tau_x_ps", "blink_on_ms", "blink_off_ms",
                     "background_rate_hz"):
            if getattr(self, name) < 0:
                raise ValueError(f"{name} must be >= 0")
        if self.rep_period_ps <= 0:
            raise ValueError("rep_period_ps must be > 0")


@dataclass
class LinkParams:
    one_way_delay_ps: float = 96_393_880.0
    inserted_delay_ps: float = 0.0
    reflectance: float = 0.70
    transmit_loss_db: float = 0.0
    return_loss_db: float = 0.0
    group_index: float = 1.468
    # direction-dependent extra delay (asymmetric path); 0 for a symmetric link
    forward_extra_delay_ps: float = 0.0
    return_extra_delay_ps: float = 0.0
    # fixed cable/electronics delay per detector channel 0, 1, 2
    detector_delay_ps: tuple[float, float, float] = (0.0, 0.0, 0.0)
    # birefringent rotation acting on the exciton in the link
    rotation_theta_rad: float = 0.0
    rotation_phi_rad: float = 0.0
    # probability that a pair arrives fully depolarized (Werner p = 1 - depolarization)
    depolarization: float = 0.0

    def validate(self):
        if not 0.0 <= self.reflectance <= 1.0:
            raise ValueError(f"reflectance {self.reflectance} outside [0, 1]")
        if not 0.0 <= self.depolarization <= 1.0:
            raise ValueError("depolarization outside [0, 1]")
        if self.transmit_loss_db < 0 or self.return_loss_db < 0:
            raise ValueError("losses must be >= 0 dB")
        if len(self.detector_delay_ps) != 3:
            raise ValueError("detector_delay_ps needs 3 entries")


@dataclass
class ClockParams:
    offset_s: float = 0.0
    offset_ps: float = 0.0
    drift_ppb: float = 0.0
    jitter_sigma_ps: tuple[float, float, float] = (100.0, 100.0, 100.0)

    def validate(self):
        if len(self.jitter_sigma_ps) != 3 or min(self.jitter_sigma_ps) < 0:
            raise ValueError("jitter_sigma_ps needs 3 non-negative entries")

    @property
    def offset_total_ps(self) -> int:
        # decimal keeps 1e-12 s resolution for offsets of days
        return int((Decimal(repr(float(self.offset_s))) * 10**12 + Decimal(repr(float(self.offset_ps))))
                   .to_integral_value())


@dataclass
class PolarizationState:
    amplitudes: np.ndarray

    def __post_init__(self):
        amp = np.asarray(self.amplitudes, dtype=complex).reshape(4)
        norm = np.linalg.norm(amp)
        if not math.isclose(norm, 1.0, rel_tol=1e-9):
            raise ValueError(f"state not normalized (|psi| = {norm})")
        self.amplitudes = amp

    @classmethod
    def phi_plus(cls) -> "PolarizationState":
        return cls(np.array([1, 0, 0, 1]) * SQRT_HALF)

    @classmethod
    def phi_minus(cls) -> "PolarizationState":
        return cls(np.array([1, 0, 0, -1]) * SQRT_HALF)


@dataclass
class MeasurementConfig:
    projection_x: str | None = None
    projection_xx: str | None = None
    label: str = ""

    def __post_init__(self):
        for tok in (self.projection_x, self.projection_xx):
            if tok is not None:
                polarization_vector(tok)
        if not self.label and self.projection_x and self.projection_xx:
            self.label = self.projection_x + self.projection_xx

    @classmethod
    def from_label(cls, label: str) -> "MeasurementConfig":
        if len(label) != 2:
            raise ValueError(f"setting label {label!r} must be two tokens")
        return cls(label[0], label[1], label)


@dataclass
class GroundTruth:
    offset_total_ps: int
    forward_delay_ps: float
    return_delay_ps: float
    inserted_delay_ps: float
    one_way_peak_start_ps: float
    round_trip_peak_start_ps: float
    drift_ppb: float
    n_pulses: int
    n_pairs: int
    tags_per_channel: list[int]
    background_per_channel: list[int]
    params: dict = field(default_factory=dict)

    @property
    def round_trip_ps(self) -> float:
        return self.forward_delay_ps + self.return_delay_ps

    @property
    def offset_s(self) -> Decimal:
        return Decimal(self.offset_total_ps) / 10**12

    def to_dict(self) -> dict:
        d = asdict(self)
        d["offset_s"] = str(self.offset_s)
        d["round_trip_ps"] = self.round_trip_ps
        return d


def _bernoulli_indices(rng: np.random.Generator, n: int, p: float) -> np.ndarray:
    """Sorted indices of successes of n Bernoulli(p) trials via geometric gaps."""
    if p <= 0 or n <= 0:
        return np.empty(0, np.int64)
    if p >= 1:
        return np.arange(n, dtype=np.int64)
    parts = []
    last = -1
    while True:
        m = int(n * p - (last + 1) * p + 6 * math.sqrt(n * p) + 16)
        idx = last + np.cumsum(rng.geometric(p, size=m))
        parts.append(idx[idx < n])
        if idx[-1] >= n:
            break
        last = int(idx[-1])
    return np.concatenate(parts)


def _blink_mask(rng: np.random.Generator, times_ps: np.ndarray, span_ps: float,
                on_ms: float, off_ms: float) -> np.ndarray:
    """True for times falling inside 'on' periods of a telegraph process."""
    if on_ms <= 0 or off_ms <= 0:
        return np.ones(times_ps.size, bool)
    on_ps, off_ps = on_ms * 1e9, off_ms * 1e9
    state_on = rng.random() < on_ps / (on_ps + off_ps)
    edges = [0.0]
    t = 0.0
    s = state_on
    while t < span_ps:
        t += rng.exponential(on_ps if s else off_ps)
        edges.append(t)
        s = not s
    seg = np.searchsorted(np.asarray(edges), times_ps, side="right") - 1
    on = (seg % 2 == 0) if state_on else (seg % 2 == 1)
    return on


def _pair_states(src: SourceParams, link: LinkParams, t_d: np.ndarray) -> np.ndarray:
    """Pure two-photon states (n, 4) after FSS precession and link rotation."""
    psi = np.zeros((t_d.size, 4), dtype=complex)
    psi[:, 0] = SQRT_HALF
    psi[:, 3] = SQRT_HALF * np.exp(1j * src.fss_omega_rad_per_ps * t_d)
    if link.rotation_theta_rad or link.rotation_phi_rad:
        u = np.kron(waveplate_unitary(link.rotation_theta_rad, link.rotation_phi_rad), np.eye(2))
        psi = psi @ u.T
    return psi


def _project(rng, psi: np.ndarray, mixed: np.ndarray, meas: MeasurementConfig):
    """Born-rule pass/fail for the XX (at its polarizer) and X (at the subscriber polarizer)."""
    n = psi.shape[0]
    amp = psi.reshape(n, 2, 2)  # [pair, x, xx]
    if meas.projection_xx is None:
        xx_pass = np.ones(n, bool)
        if meas.projection_x is None:
            return xx_pass, np.ones(n, bool)
        p = polarization_vector(meas.projection_x)
        # marginal over an unmeasured XX
        px = np.sum(np.abs(np.einsum("x,nxy->ny", p.conj(), amp)) ** 2, axis=1)
        px = np.where(mixed, 0.5, px)
        return xx_pass, rng.random(n) < px

    q = polarization_vector(meas.projection_xx)
    q_perp = np.array([-q[1].conj(), q[0].conj()])
    cond_pass = np.einsum("y,nxy->nx", q.conj(), amp)
    p_xx = np.sum(np.abs(cond_pass) ** 2, axis=1)
    p_xx = np.where(mixed, 0.5, p_xx)
    xx_pass = rng.random(n) < p_xx
    if meas.projection_x is None:
        return xx_pass, np.ones(n, bool)
    cond_fail = np.einsum("y,nxy->nx", q_perp.conj(), amp)
    cond = np.where(xx_pass[:, None], cond_pass, cond_fail)
    norm = np.sum(np.abs(cond) ** 2, axis=1)
    p = polarization_vector(meas.projection_x)
    with np.errstate(invalid="ignore", divide="ignore"):
        px = np.abs(cond @ p.conj()) ** 2 / norm
    px = np.where(mixed | (norm <= 0), 0.5, np.nan_to_num(px))
    return xx_pass, rng.random(n) < px


def simulate_run(src: SourceParams, link: LinkParams, clk: ClockParams,
                 meas: MeasurementConfig | None, duration_s: float, seed: int | np.random.SeedSequence):
    """Simulate one acquisition. Returns ``(TagStream, GroundTruth)``."""
    if not duration_s > 0:
        raise ValueError("duration_s must be > 0")
    src.validate(); link.validate(); clk.validate()
    meas = meas or MeasurementConfig()
    rng = np.random.default_rng(seed)
    span_ps = duration_s * 1e12
    n_pulses = int(span_ps / src.rep_period_ps + 1e-9)

    pulses = _bernoulli_indices(rng, n_pulses, src.pair_prob)
    pulse_t = pulses * src.rep_period_ps
    pulse_t = pulse_t[_blink_mask(rng, pulse_t, span_ps, src.blink_on_ms, src.blink_off_ms)]
    n = pulse_t.size

    e_xx = rng.exponential(src.tau_xx_ps, n)
    t_d = rng.exponential(src.tau_x_ps, n)
    mixed = rng.random(n) < link.depolarization
    psi = _pair_states(src, link, t_d)
    xx_pass, x_pass = _project(rng, psi, mixed, meas)

    reflected = rng.random(n) < link.reflectance
    t_trans = 10 ** (-link.transmit_loss_db / 10)
    t_ret = 10 ** (-link.return_loss_db / 10)
    survive = rng.random(n)
    to_ch1 = ~reflected & x_pass & (survive < t_trans)
    to_ch2 = reflected & (survive < t_ret)
    jit = clk.jitter_sigma_ps

    forward = link.one_way_delay_ps + link.inserted_delay_ps + link.forward_extra_delay_ps
    backward = link.one_way_delay_ps + link.inserted_delay_ps + link.return_extra_delay_ps
    det = link.detector_delay_ps
    base = EPOCH_PS + pulse_t + e_xx

    def stamp(t, mask, sigma, delay):
        t = t[mask]
        if sigma > 0:
            t = t + rng.normal(0.0, sigma, t.size)
        return np.rint(t).astype(np.int64) + int(round(delay))

    t0 = stamp(base, xx_pass, jit[0], det[0])
    t1 = stamp(base + t_d, to_ch1, jit[1], forward + det[1])
    t2 = stamp(base + t_d, to_ch2, jit[2], forward + backward + det[2])

    bg_counts = []
    bg = []
    for ch in range(3):
        k = rng.poisson(src.background_rate_hz * duration_s)
        bg_counts.append(int(k))
        bg.append(EPOCH_PS + np.rint(rng.random(k) * span_ps).astype(np.int64))
    t0 = np.concatenate([t0, bg[0]])
    t1 = np.concatenate([t1, bg[1]])
    t2 = np.concatenate([t2, bg[2]])

    offset = clk.offset_total_ps
    if clk.drift_ppb:
        t1 = t1 + np.rint(t1 * (clk.drift_ppb * 1e-9)).astype(np.int64)
    if t1.size and int(t1.min()) + offset < 0:
        raise ValueError("clock offset drives subscriber timestamps negative")
    for arr in (t0, t2):
        if arr.size and arr.min() < 0:
            raise ValueError("negative master timestamp; detector delays too negative")
    times = np.concatenate([t0.astype(np.uint64), (t1.astype(np.uint64) + np.uint64(offset)) if offset >= 0
                            else (t1 + offset).astype(np.uint64), t2.astype(np.uint64)])
    chans = np.concatenate([np.zeros(t0.size, np.uint16), np.ones(t1.size, np.uint16),
                            np.full(t2.size, 2, np.uint16)])
    truth = GroundTruth(
        offset_total_ps=offset,
        forward_delay_ps=forward,
        return_delay_ps=backward,
        inserted_delay_ps=link.inserted_delay_ps,
        one_way_peak_start_ps=offset + forward + det[1] - det[0],
        round_trip_peak_start_ps=forward + backward + det[2] - det[0],
        drift_ppb=clk.drift_ppb,
        n_pulses=n_pulses,
        n_pairs=int(n),
        tags_per_channel=[int(t0.size), int(t1.size), int(t2.size)],
        background_per_channel=bg_counts,
        params={"source": asdict(src), "link": asdict(link), "clock": asdict(clk),
                "measurement": asdict(meas), "duration_s": duration_s},
    )
    stream = TagStream.from_arrays(times, chans, 3, label=meas.label or "sync", duration_s=duration_s)
    return stream, truth


def simulate_tomography_set(src: SourceParams, link: LinkParams, clk: ClockParams, duration_s: float,
                            seed: int, settings=DEFAULT_SETTINGS) -> dict[str, TagStream]:
    """One stream per projection setting, each from an independent child seed."""
    children = np.random.SeedSequence(seed).spawn(len(settings))
    out = {}
    for label, child in zip(settings, children):
        stream, truth = simulate_run(src, link, clk, MeasurementConfig.from_label(label), duration_s, child)
        stream.meta["ground_truth"] = truth.to_dict()
        out[label] = stream
    return out


def simulate_hbt(duration_s: float, seed, *, rep_period_ps: float = 12500.0, emit_prob: float = 0.05,
                 lifetime_ps: float = 1140.0, background_per_pulse: float = 0.0,
                 background_lifetime_ps: float | None = None, coherent_mean: float | None = None,
                 blink_on_ms: float = 0.0, blink_off_ms: float = 0.0,
                 jitter_sigma_ps: float = 20.0, dark_rate_hz: float = 0.0) -> TagStream:
    """Beam-splitter (HBT) measurement of a pulsed emitter, channels 0 and 1.

    The emitter gives at most one photon per pulse with probability
    ``emit_prob``. ``background_per_pulse`` adds Poisson-distributed pulsed
    photons from an uncorrelated emitter (e.g. a spectrally overlapping
    neighbour). ``coherent_mean`` replaces the emitter by an attenuated laser
    with Poisson photon number per pulse.
    """
    if not duration_s > 0:
        raise ValueError("duration_s must be > 0")
    rng = np.random.default_rng(seed)
    span = duration_s * 1e12
    n_pulses = int(span / rep_period_ps + 1e-9)
    if coherent_mean is not None:
        k = rng.poisson(coherent_mean * n_pulses)
        sig_pulses = np.sort(rng.integers(0, n_pulses, k))
    else:
        sig_pulses = _bernoulli_indices(rng, n_pulses, emit_prob)
        sig_pulses = sig_pulses[_blink_mask(rng, sig_pulses * rep_period_ps, span, blink_on_ms, blink_off_ms)]
    t_sig = sig_pulses * rep_period_ps + rng.exponential(lifetime_ps, sig_pulses.size)
    kb = rng.poisson(background_per_pulse * n_pulses) if background_per_pulse > 0 else 0
    bg_pulses = rng.integers(0, n_pulses, kb)
    t_bg = bg_pulses * rep_period_ps + rng.exponential(background_lifetime_ps or lifetime_ps, kb)
    t = np.concatenate([t_sig, t_bg])
    ch = (rng.random(t.size) < 0.5).astype(np.uint16)
    if jitter_sigma_ps > 0:
        t = t + rng.normal(0, jitter_sigma_ps, t.size)
    if dark_rate_hz > 0:
        kd = rng.poisson(dark_rate_hz * duration_s * 2)
        t = np.concatenate([t, rng.random(kd) * span])
        ch = np.concatenate([ch, rng.integers(0, 2, kd).astype(np.uint16)])
    times = (EPOCH_PS + np.rint(t)).astype(np.uint64)
    return TagStream.from_arrays(times, ch, 2, label="hbt", duration_s=duration_s)
