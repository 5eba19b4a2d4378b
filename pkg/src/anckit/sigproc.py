"""Frequency grids, FIR evaluation, performance weighting and spectral functionals.

All frequency responses in this package use the forward-transform convention

    H(e^{jW}) = sum_n h(n) e^{-j n W}

for plants, internal models and controllers alike.
"""

from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field

import numpy as np

from anckit.errors import ConfigurationError

log = logging.getLogger(__name__)

# bins evaluated per block in evaluate_fir; bounds the temporary (block x N) matrix
_EVAL_BLOCK = 2048


@dataclass(frozen=True)
class FrequencyGrid:
    """Normalized angular frequencies ``bins`` (rad/sample) at ``sample_rate`` Hz."""

    sample_rate: float
    bins: np.ndarray = field(repr=False)

    def __post_init__(self):
        bins = np.asarray(self.bins, dtype=float)
        if bins.ndim != 1 or bins.size == 0:
            raise ConfigurationError("frequency grid needs at least one bin")
        if not np.all(np.isfinite(bins)) or np.any(bins < 0) or np.any(bins > np.pi):
            raise ConfigurationError("grid bins must lie in [0, pi]")
        if np.any(np.diff(bins) <= 0):
            raise ConfigurationError("grid bins must be strictly increasing")
        if not (self.sample_rate > 0 and math.isfinite(self.sample_rate)):
            raise ConfigurationError(f"invalid sample rate {self.sample_rate!r}")
        bins.setflags(write=False)
        object.__setattr__(self, "bins", bins)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    @classmethod
    def linear(cls, sample_rate: float, num_bins: int, include_dc: bool = False,
               include_nyquist: bool = False) -> "FrequencyGrid":
        """Linearly spaced grid over (0, pi); endpoints only on request."""
        if num_bins < 1:
            raise ConfigurationError("num_bins must be >= 1")
        total = num_bins + (not include_dc) + (not include_nyquist)
        full = np.linspace(0.0, np.pi, total)
        start = 0 if include_dc else 1
        return cls(sample_rate, full[start:start + num_bins])

    @property
    def num_bins(self) -> int:
        return self.bins.size

    @property
    def frequencies(self) -> np.ndarray:
        """Physical bin frequencies in Hz."""
        return self.bins * self.sample_rate / (2 * np.pi)

    def __eq__(self, other):
        if not isinstance(other, FrequencyGrid):
            return NotImplemented
        return (self.sample_rate == other.sample_rate
                and self.bins.shape == other.bins.shape
                and bool(np.all(self.bins == other.bins)))

    def __hash__(self):
        return hash((self.sample_rate, self.bins.tobytes()))

    def to_dict(self) -> dict:
        return {"fs": self.sample_rate, "K": self.num_bins,
                "bins": [float(b) for b in self.bins]}

    @classmethod
    def from_dict(cls, d: dict) -> "FrequencyGrid":
        grid = cls(float(d["fs"]), np.asarray(d["bins"], dtype=float))
        if "K" in d and int(d["K"]) != grid.num_bins:
            raise ConfigurationError(
                f"grid declares K={d['K']} but lists {grid.num_bins} bins")
        return grid


@dataclass(frozen=True)
class FirFilter:
    coefficients: np.ndarray
    sample_rate: float

    def __post_init__(self):
        c = np.array(self.coefficients, dtype=float).ravel()
        if c.size < 1:
            raise ConfigurationError("FIR filter needs at least one coefficient")
        if not np.all(np.isfinite(c)):
            raise ConfigurationError("FIR coefficients must be finite")
        c.setflags(write=False)
        object.__setattr__(self, "coefficients", c)
        object.__setattr__(self, "sample_rate", float(self.sample_rate))

    def __len__(self):
        return self.coefficients.size


@dataclass(frozen=True)
class PerformanceWeight:
    """Per-bin weight magnitudes |W_k| (linear)."""

    magnitudes: np.ndarray

    def __post_init__(self):
        m = np.array(self.magnitudes, dtype=float).ravel()
        if not np.all(np.isfinite(m)) or np.any(m < 0):
            raise ConfigurationError("weight magnitudes must be finite and >= 0")
        m.setflags(write=False)
        object.__setattr__(self, "magnitudes", m)


def dft_matrix(bins: np.ndarray, num_taps: int) -> np.ndarray:
    """Matrix Z with Z[k, n] = exp(-j n bins[k]); Q = Z @ w."""
    n = np.arange(num_taps)
    return np.exp(-1j * np.outer(bins, n))


def evaluate_coefficients(coefficients: np.ndarray, bins: np.ndarray) -> np.ndarray:
    coefficients = np.asarray(coefficients, dtype=float)
    out = np.empty(len(bins), dtype=complex)
    for start in range(0, len(bins), _EVAL_BLOCK):
        stop = start + _EVAL_BLOCK
        out[start:stop] = dft_matrix(bins[start:stop], coefficients.size) @ coefficients
    return out


def evaluate_fir(filt: FirFilter, grid: FrequencyGrid) -> np.ndarray:
    """Frequency response of ``filt`` at every grid bin."""
    if filt.sample_rate != grid.sample_rate:
        raise ConfigurationError(
            f"sample rate mismatch: filter {filt.sample_rate} Hz, grid {grid.sample_rate} Hz")
    return evaluate_coefficients(filt.coefficients, grid.bins)


def butterworth_magnitude(freqs, order: int, peak_gain_db: float, f_lo: float,
                          f_hi: float) -> np.ndarray:
    """Analog-prototype Butterworth bandpass magnitude, 0 dB at ``f_lo`` and ``f_hi``."""
    if order < 2 or order % 2:
        raise ConfigurationError(f"Butterworth order must be even and >= 2, got {order}")
    if not 0 < f_lo < f_hi:
        raise ConfigurationError("need 0 < f_lo < f_hi")
    peak = 10.0 ** (peak_gain_db / 20.0)
    if peak <= 1.0:
        raise ConfigurationError("peak gain must exceed 0 dB to place 0 dB crossovers")
    f0 = math.sqrt(f_lo * f_hi)
    bandwidth = (f_hi - f_lo) / (peak ** 2 - 1.0) ** (1.0 / order)
    f = np.asarray(freqs, dtype=float)
    with np.errstate(divide="ignore"):
        x = (f * f - f0 * f0) / (f * bandwidth)
    mag = peak / np.sqrt(1.0 + x ** order)
    return np.where(f > 0, mag, 0.0)


def butterworth_bandpass_weight(grid: FrequencyGrid, order: int = 8,
                                peak_gain_db: float = 31.0, f_lo: float = 40.0,
                                f_hi: float = 1000.0) -> PerformanceWeight:
    if f_hi >= grid.sample_rate / 2:
        raise ConfigurationError(
            f"f_hi={f_hi} Hz must lie below Nyquist ({grid.sample_rate / 2} Hz)")
    return PerformanceWeight(
        butterworth_magnitude(grid.frequencies, order, peak_gain_db, f_lo, f_hi))


def full_circle_response(coefficients: np.ndarray, num_points: int) -> np.ndarray:
    """Response on ``num_points`` uniformly spaced points of the whole unit circle."""
    coefficients = np.asarray(coefficients, dtype=float)
    if num_points < coefficients.size:
        # fold so the DFT samples the true polynomial
        folded = np.zeros(num_points)
        np.add.at(folded, np.arange(coefficients.size) % num_points, coefficients)
        coefficients = folded
    return np.fft.fft(coefficients, num_points)


def nominal_sensitivity_full_circle(q: np.ndarray, g_hat: np.ndarray,
                                    num_points: int | None = None) -> np.ndarray:
    """Samples of 1 - Q G_hat on the whole unit circle (time-domain exact product)."""
    s = -np.convolve(q, g_hat)
    s[0] += 1.0
    if num_points is None:
        num_points = 8 * int(2 ** math.ceil(math.log2(max(s.size, 2))))
    return full_circle_response(s, num_points)


def waterbed_functional(sensitivity, onesided: bool = False) -> float:
    """Mean of ln|S| over the unit circle.

    ``sensitivity`` holds uniformly spaced samples of the whole circle, or with
    ``onesided=True`` the rfft-style half [0, pi] (both endpoints included),
    which is mirrored by conjugate symmetry.
    """
    s = np.asarray(sensitivity, dtype=complex)
    if onesided:
        s = np.concatenate([s, np.conj(s[-2:0:-1])])
    mag = np.abs(s)
    if np.any(mag == 0):
        log.warning("sensitivity vanishes on the unit circle; waterbed functional is -inf")
        return float("-inf")
    return float(np.mean(np.log(mag)))


def _cumulative_linear_integral(x, y, xq):
    """Integral from x[0] to xq of the piecewise-linear interpolant of (x, y)."""
    dx = np.diff(x)
    slopes = np.diff(y) / dx
    nodes = np.concatenate([[0.0], np.cumsum(0.5 * (y[1:] + y[:-1]) * dx)])
    i = np.clip(np.searchsorted(x, xq, side="right") - 1, 0, x.size - 2)
    t = xq - x[i]
    return nodes[i] + t * y[i] + 0.5 * t * t * slopes[i]


def octave_smooth(magnitude_db, grid: FrequencyGrid, fraction: float = 6.0) -> np.ndarray:
    """1/``fraction``-octave smoothing of a dB curve.

    Each bin becomes the average over log-frequency of the piecewise-linear (in
    log2 f) interpolant across +-1/(2*fraction) octave; windows are truncated at
    the grid ends. Bins at 0 Hz are passed through.
    """
    if fraction <= 0:
        raise ConfigurationError("smoothing fraction must be positive")
    y = np.asarray(magnitude_db, dtype=float)
    f = grid.frequencies
    out = y.copy()
    pos = f > 0
    if np.count_nonzero(pos) < 2:
        return out
    x = np.log2(f[pos])
    yp = y[pos]
    half = 0.5 / fraction
    lo = np.maximum(x - half, x[0])
    hi = np.minimum(x + half, x[-1])
    area = _cumulative_linear_integral(x, yp, hi) - _cumulative_linear_integral(x, yp, lo)
    out[pos] = area / (hi - lo)
    return out


def to_db(values) -> np.ndarray:
    with np.errstate(divide="ignore"):
        return 20.0 * np.log10(np.abs(values))
