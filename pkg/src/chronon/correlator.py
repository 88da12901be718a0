"""Coincidence histograms between timestamp channels.

``correlate(a, b, ...)`` counts pairs by their difference ``t_a - t_b`` into
bins of width ``bin_width_ps`` tiling ``[tau_start, tau_end)``. The bin width
is also the coincidence window. Two exact kernels are available:

* ``sweep``: two-pointer sweep, cost ~ N_a + N_b + (pairs in range);
* ``edges``: one monotone pointer per bin edge, cost ~ n_bins * (N_a + N_b),
  independent of how many pairs fall in range (used for wide coarse windows).
"""
from __future__ import annotations

import logging
import math
from concurrent.futures import ThreadPoolExecutor
from dataclasses import dataclass, field

import numba
import numpy as np

from .timetags import TagStream

log = logging.getLogger(__name__)


class NoPeakFoundError(RuntimeError):
    def __init__(self, message: str, stages: list):
        super().__init__(message)
        self.stages = stages


class NormalizationError(ValueError):
    pass


@dataclass(frozen=True, eq=False)
class CorrelationHistogram:
    tau_start_ps: int
    bin_width_ps: int
    counts: np.ndarray
    n_a: int
    n_b: int

    @property
    def window_delta_ps(self) -> int:
        return self.bin_width_ps

    @property
    def n_bins(self) -> int:
        return int(self.counts.size)

    @property
    def tau_end_ps(self) -> int:
        return self.tau_start_ps + self.n_bins * self.bin_width_ps

    @property
    def edges(self) -> np.ndarray:
        return self.tau_start_ps + self.bin_width_ps * np.arange(self.n_bins + 1, dtype=np.int64)

    @property
    def centers(self) -> np.ndarray:
        """Bin centers in ps (float, may be half-integer)."""
        return self.tau_start_ps + self.bin_width_ps * (np.arange(self.n_bins) + 0.5)

    def __eq__(self, other):
        if not isinstance(other, CorrelationHistogram):
            return NotImplemented
        return (self.tau_start_ps, self.bin_width_ps, self.n_a, self.n_b) == (
            other.tau_start_ps, other.bin_width_ps, other.n_a, other.n_b
        ) and np.array_equal(self.counts, other.counts)

    __hash__ = None

    def __add__(self, other: "CorrelationHistogram") -> "CorrelationHistogram":
        if (self.tau_start_ps, self.bin_width_ps, self.n_bins) != (
            other.tau_start_ps, other.bin_width_ps, other.n_bins
        ):
            raise ValueError("histograms have different axes")
        return CorrelationHistogram(self.tau_start_ps, self.bin_width_ps, self.counts + other.counts,
                                    self.n_a + other.n_a, self.n_b + other.n_b)


@dataclass
class PeakSearchResult:
    tau_peak_ps: int
    significance: float
    refined_stages: list[tuple[int, int]] = field(default_factory=list)
    histogram: CorrelationHistogram | None = None
    diagnostics: list[dict] = field(default_factory=list)


# --- kernels ---------------------------------------------------------------

@numba.njit(nogil=True, cache=True)
def _sweep_kernel(a, b, tau_start, bw, nbins, self_offset):
    counts = np.zeros(nbins, np.int64)
    tau_end = tau_start + nbins * bw
    nb = b.size
    j_lo = 0
    for i in range(a.size):
        ta = a[i]
        while j_lo < nb and ta - b[j_lo] >= tau_end:
            j_lo += 1
        j = j_lo
        while j < nb:
            d = ta - b[j]
            if d < tau_start:
                break
            if self_offset < 0 or j != i + self_offset:
                counts[(d - tau_start) // bw] += 1
            j += 1
    return counts


@numba.njit(nogil=True, cache=True)
def _edges_kernel(a, b, tau_start, bw, nbins):
    counts = np.zeros(nbins, np.int64)
    na = a.size
    ptr = np.empty(nbins + 1, np.int64)
    if b.size == 0:
        return counts
    for k in range(nbins + 1):
        ptr[k] = np.searchsorted(a, b[0] + tau_start + k * bw)
    for j in range(b.size):
        tb = b[j]
        for k in range(nbins + 1):
            target = tb + tau_start + k * bw
            p = ptr[k]
            while p < na and a[p] < target:
                p += 1
            ptr[k] = p
        for k in range(nbins):
            counts[k] += ptr[k + 1] - ptr[k]
    return counts


def _channel_array(x) -> np.ndarray:
    if isinstance(x, TagStream):
        if x.channel_count != 1 and np.unique(x.channels).size > 1:
            raise ValueError("pass a single-channel stream or a timestamp array")
        x = x.times
    x = np.asarray(x)
    if x.ndim != 1:
        raise ValueError("timestamps must be 1-d")
    return x


def _rebase(a: np.ndarray, b: np.ndarray) -> tuple[np.ndarray, np.ndarray]:
    """Shift both arrays to a common origin and convert to int64 exactly."""
    if a.dtype.kind == "i" and b.dtype.kind == "i":
        return a.astype(np.int64, copy=False), b.astype(np.int64, copy=False)
    firsts = [int(x[0]) for x in (a, b) if x.size]
    lasts = [int(x[-1]) for x in (a, b) if x.size]
    if not firsts:
        return a.astype(np.int64), b.astype(np.int64)
    base = min(firsts)
    if max(lasts) - base >= 2**62:
        raise OverflowError("combined stream span exceeds 2**62 ps; split the acquisition")
    base_u = np.uint64(base)
    return (a.astype(np.uint64) - base_u).astype(np.int64), (b.astype(np.uint64) - base_u).astype(np.int64)


def _choose_method(na: int, nb: int, span: float, range_ps: int, nbins: int) -> str:
    pairs = na * nb * range_ps / max(span, 1.0)
    return "sweep" if pairs <= nbins * (na + nb) else "edges"


def correlate(a, b, tau_start_ps: int, tau_end_ps: int, bin_width_ps: int, *,
              method: str = "auto", threads: int = 1, _exclude_self: bool = False) -> CorrelationHistogram:
    """Histogram of ``t_a - t_b`` over ``[tau_start_ps, tau_end_ps)``.

    ``a`` and ``b`` are sorted timestamp arrays (or single-channel streams).
    If the range is not a multiple of the bin width the last bin extends past
    ``tau_end_ps``.
    """
    tau_start_ps, tau_end_ps, bin_width_ps = int(tau_start_ps), int(tau_end_ps), int(bin_width_ps)
    if tau_end_ps <= tau_start_ps:
        raise ValueError(f"empty tau range [{tau_start_ps}, {tau_end_ps})")
    if bin_width_ps < 1:
        raise ValueError("bin width must be >= 1 ps")
    a, b = _channel_array(a), _channel_array(b)
    nbins = -(-(tau_end_ps - tau_start_ps) // bin_width_ps)
    n_a, n_b = int(a.size), int(b.size)
    if n_a == 0 or n_b == 0:
        return CorrelationHistogram(tau_start_ps, bin_width_ps, np.zeros(nbins, np.int64), n_a, n_b)
    ai, bi = _rebase(a, b)
    if method == "auto":
        span = float(max(ai[-1], bi[-1]) - min(ai[0], bi[0]))
        method = _choose_method(n_a, n_b, span, nbins * bin_width_ps, nbins)
    threads = max(1, int(threads))

    if method == "sweep":
        bounds = np.linspace(0, n_a, threads + 1).astype(int)

        def run(k):
            lo, hi = bounds[k], bounds[k + 1]
            return _sweep_kernel(ai[lo:hi], bi, tau_start_ps, bin_width_ps, nbins,
                                 lo if _exclude_self else -1)
    elif method == "edges":
        bounds = np.linspace(0, n_b, threads + 1).astype(int)

        def run(k):
            lo, hi = bounds[k], bounds[k + 1]
            return _edges_kernel(ai, bi[lo:hi], tau_start_ps, bin_width_ps, nbins)
    else:
        raise ValueError(f"unknown method {method!r}")

    if threads == 1:
        counts = run(0)
    else:
        with ThreadPoolExecutor(threads) as pool:
            counts = sum(pool.map(run, range(threads)))
    if method == "edges" and _exclude_self and tau_start_ps <= 0 < tau_start_ps + nbins * bin_width_ps:
        counts[(0 - tau_start_ps) // bin_width_ps] -= n_a
    return CorrelationHistogram(tau_start_ps, bin_width_ps, counts, n_a, n_b)


def autocorrelate(a, tau_start_ps: int, tau_end_ps: int, bin_width_ps: int, b=None, **kw) -> CorrelationHistogram:
    """HBT-style autocorrelation.

    With ``b`` given (the second detector of a beam splitter) this is a plain
    cross-correlation. With a single channel the i == j self-pairs are
    excluded.
    """
    if b is not None:
        return correlate(a, b, tau_start_ps, tau_end_ps, bin_width_ps, **kw)
    return correlate(a, a, tau_start_ps, tau_end_ps, bin_width_ps, _exclude_self=True, **kw)


def g2_normalize(h: CorrelationHistogram) -> np.ndarray:
    """Counts divided by sqrt(N_A * N_B)."""
    if h.n_a <= 0 or h.n_b <= 0:
        raise NormalizationError(f"cannot normalize with n_a={h.n_a}, n_b={h.n_b}")
    return h.counts / math.sqrt(h.n_a * h.n_b)


def peak_significance(counts: np.ndarray, exclude: int = 3) -> tuple[int, float, float, float]:
    """Return (argmax, significance, background median, background sigma).

    Background is the median/MAD of all bins more than ``exclude`` bins away
    from the maximum, after removing a linear trend (finite acquisitions give
    accidentals a triangular profile over windows comparable to the run
    length). Sigma is floored at the Poisson value sqrt(background) so sparse
    all-zero backgrounds do not divide by zero.
    """
    counts = np.asarray(counts, dtype=float)
    k = int(np.argmax(counts))
    mask = np.ones(counts.size, bool)
    mask[max(0, k - exclude): k + exclude + 1] = False
    idx = np.nonzero(mask)[0]
    if idx.size == 0:
        return k, 0.0, float(np.median(counts)), 1.0
    bg = counts[idx]
    if idx.size >= 8:
        slope, icpt = np.polyfit(idx.astype(float), bg, 1)
        trend = slope * idx + icpt
        level = slope * k + icpt
    else:
        trend = np.zeros(idx.size)
        level = 0.0
    resid = bg - trend
    med = float(np.median(resid))
    mad = float(np.median(np.abs(resid - med)))
    level += med
    sigma = max(1.4826 * mad, math.sqrt(max(level, 1.0)))
    return k, max(0.0, (counts[k] - level) / sigma), float(level), sigma


def _window_complete(a: np.ndarray, b: np.ndarray, lo: int, hi: int,
                     span_ps: float | None) -> tuple[np.ndarray, np.ndarray]:
    """Trim so every kept b-tag sees a complete [lo, hi) window of a-tags.

    Accidental coincidences are then flat in tau instead of following the
    overlap profile of two finite acquisitions. ``span_ps`` additionally
    caps the b-side to that much data.
    """
    if a.size == 0 or b.size == 0:
        return a, b
    ai, bi = _rebase(a, b)
    b_lo = int(ai[0]) - lo
    b_hi = int(ai[-1]) - hi + 1
    j0 = int(np.searchsorted(bi, max(b_lo, int(bi[0]))))
    j1 = int(np.searchsorted(bi, b_hi))
    if span_ps is not None and j1 > j0:
        j1 = min(j1, int(np.searchsorted(bi, int(bi[j0]) + int(span_ps))))
    if j1 <= j0:
        return a[:0], b[:0]
    i0 = int(np.searchsorted(ai, int(bi[j0]) + lo))
    i1 = int(np.searchsorted(ai, int(bi[j1 - 1]) + hi))
    return a[i0:i1], b[j0:j1]


def find_peak(a, b, coarse_window_ps: tuple[int, int], target_bin_ps: int = 16, *,
              coarse_bin_ps: int = 10**9, factor: int = 100, half_window_bins: int = 50,
              min_half_window_ps: int = 20_000, threshold: float = 5.0,
              coarse_span_ps: float | None = 5e12, coarse_span_above_ps: int = 10**6,
              threads: int = 1) -> PeakSearchResult:
    """Multi-resolution search for the correlation maximum inside a wide window.

    Stage bin widths are ``coarse_bin_ps / factor**k`` until the next would be
    at or below ``target_bin_ps``, which is used for the final stage. Every
    stage after the first re-centres a window of half width
    ``max(half_window_bins * w_k, w_{k-1}, min_half_window_ps)`` on the running
    maximum. Each stage only uses b-tags whose whole window lies inside the
    a-stream, so accidentals are flat. Stages with bin width >=
    ``coarse_span_above_ps`` further restrict b to its first
    ``coarse_span_ps``, which keeps the coarse stages cheap without affecting
    where the peak is.
    """
    a, b = _channel_array(a), _channel_array(b)
    lo, hi = int(coarse_window_ps[0]), int(coarse_window_ps[1])
    if hi <= lo:
        raise ValueError("empty coarse window")
    widths = []
    w = int(max(coarse_bin_ps, target_bin_ps))
    while w > target_bin_ps:
        widths.append(w)
        w //= factor
    widths.append(int(target_bin_ps))

    stages: list[tuple[int, int]] = []
    diags: list[dict] = []
    center = None
    h = None
    sig = 0.0
    for idx, w in enumerate(widths):
        if center is None:
            start, end = lo, hi
        else:
            half = max(half_window_bins * w, widths[idx - 1], min_half_window_ps)
            start, end = center - half, center + half
        nbins = -(-(end - start) // w)
        limit = coarse_span_ps if w >= coarse_span_above_ps else None
        aa, bb = _window_complete(a, b, start, start + nbins * w, limit)
        h = correlate(aa, bb, start, end, w, threads=threads)
        k, sig, med, sigma = peak_significance(h.counts)
        center = int(h.tau_start_ps + k * w + w // 2)
        stages.append((w, center))
        diags.append({"bin_width_ps": w, "window": (start, end), "tau_ps": center,
                      "significance": sig, "peak_counts": int(h.counts[k]), "background": med,
                      "background_sigma": sigma})
        log.debug("find_peak stage %d: w=%d tau=%d sig=%.1f", idx, w, center, sig)
        if sig < threshold:
            raise NoPeakFoundError(
                f"no correlation peak at stage {idx} (bin {w} ps): significance {sig:.2f} < {threshold}", diags
            )
    return PeakSearchResult(center, sig, stages, h, diags)
