import numpy as np
import pytest
from hypothesis import given
from hypothesis import strategies as st
from hypothesis.extra.numpy import arrays

from anckit.errors import ConfigurationError
from anckit.sigproc import (FirFilter, FrequencyGrid, PerformanceWeight,
                            butterworth_bandpass_weight, butterworth_magnitude,
                            dft_matrix, evaluate_coefficients, evaluate_fir,
                            full_circle_response, nominal_sensitivity_full_circle,
                            octave_smooth, to_db, waterbed_functional)

coeffs = arrays(float, st.integers(1, 40), elements=st.floats(-5, 5))


def test_linear_grid_excludes_endpoints_by_default():
    g = FrequencyGrid.linear(48000.0, 4)
    assert g.num_bins == 4
    assert 0 < g.bins[0] and g.bins[-1] < np.pi
    np.testing.assert_allclose(np.diff(g.bins), np.pi / 5)
    full = FrequencyGrid.linear(48000.0, 3, include_dc=True, include_nyquist=True)
    np.testing.assert_allclose(full.bins, [0, np.pi / 2, np.pi])
    np.testing.assert_allclose(full.frequencies, [0, 12000, 24000])


@pytest.mark.parametrize("bins", [[], [0.2, 0.1], [-0.1], [4.0], [np.nan]])
def test_grid_rejects_bad_bins(bins):
    with pytest.raises(ConfigurationError):
        FrequencyGrid(48000.0, np.array(bins, dtype=float))


def test_grid_roundtrip_and_equality():
    g = FrequencyGrid.linear(16000.0, 7)
    h = FrequencyGrid.from_dict(g.to_dict())
    assert g == h and hash(g) == hash(h)
    bad = g.to_dict() | {"K": 3}
    with pytest.raises(ConfigurationError):
        FrequencyGrid.from_dict(bad)


@given(coeffs, st.floats(0, np.pi))
def test_evaluation_matches_polyval(c, w):
    z = np.exp(-1j * w)
    expected = np.polyval(c[::-1], z)
    got = evaluate_coefficients(c, np.array([w]))[0]
    assert abs(got - expected) <= 1e-9 * (1 + np.sum(np.abs(c)))


def test_dft_matrix_and_fir_rate_check():
    bins = np.array([0.1, 1.0])
    Z = dft_matrix(bins, 3)
    np.testing.assert_allclose(Z[:, 2], np.exp(-2j * bins))
    g = FrequencyGrid(8000.0, bins)
    f = FirFilter([1.0, 2.0], 8000.0)
    np.testing.assert_allclose(evaluate_fir(f, g), 1 + 2 * np.exp(-1j * bins))
    with pytest.raises(ConfigurationError):
        evaluate_fir(FirFilter([1.0], 16000.0), g)
    with pytest.raises(ConfigurationError):
        FirFilter([], 8000.0)


def test_weight_rejects_negative():
    with pytest.raises(ConfigurationError):
        PerformanceWeight([1.0, -1.0])


def test_butterworth_crossovers_and_peak():
    f = np.array([40.0, 1000.0, np.sqrt(40.0 * 1000.0), 0.0])
    mag = butterworth_magnitude(f, 8, 31.0, 40.0, 1000.0)
    np.testing.assert_allclose(mag[:2], 1.0, rtol=1e-12)
    np.testing.assert_allclose(20 * np.log10(mag[2]), 31.0, rtol=1e-12)
    assert mag[3] == 0
    with pytest.raises(ConfigurationError):
        butterworth_magnitude(f, 3, 31.0, 40.0, 1000.0)
    with pytest.raises(ConfigurationError):
        butterworth_bandpass_weight(FrequencyGrid.linear(1000.0, 8))


@given(coeffs, st.integers(1, 64))
def test_full_circle_folding(c, n):
    got = full_circle_response(c, n)
    z = np.exp(-2j * np.pi * np.arange(n) / n)
    np.testing.assert_allclose(got, np.polyval(c[::-1], z), atol=1e-9 * (1 + np.abs(c).sum()))


@given(arrays(float, st.integers(1, 12), elements=st.floats(-0.3, 0.3)))
def test_waterbed_for_minimum_phase_sensitivity(q):
    # with g_hat a pure delay, S = 1 - z^-1 Q(z); small taps keep S minimum phase,
    # so the mean of ln|S| over the circle is ln|s_0| = 0
    q = q / max(1.0, 1.1 * np.abs(q).sum())
    S = nominal_sensitivity_full_circle(q, np.array([0.0, 1.0]), num_points=4096)
    assert abs(waterbed_functional(S)) < 1e-9


def test_waterbed_onesided_matches_full():
    s = np.array([1.0, -2.5, 0.7])
    full = full_circle_response(s, 64)
    half = np.fft.rfft(s, 64)
    assert abs(waterbed_functional(full) - waterbed_functional(half, onesided=True)) < 1e-12
    # nonminimum phase: ln of the largest-root magnitude appears
    assert waterbed_functional(full) > 0


def test_octave_smoothing_preserves_linear_in_log_frequency():
    g = FrequencyGrid.linear(48000.0, 512)
    y = 3.0 * np.log2(g.frequencies) - 7.0
    sm = octave_smooth(y, g, 6.0)
    interior = (g.frequencies > g.frequencies[0] * 2 ** (1 / 12)) & \
        (g.frequencies < g.frequencies[-1] / 2 ** (1 / 12))
    np.testing.assert_allclose(sm[interior], y[interior], atol=1e-9)
    const = octave_smooth(np.full(512, 4.0), g)
    np.testing.assert_allclose(const, 4.0)
    with pytest.raises(ConfigurationError):
        octave_smooth(y, g, 0)


def test_to_db():
    np.testing.assert_allclose(to_db([10.0, -1.0, 0.1j]), [20.0, 0.0, -20.0])
