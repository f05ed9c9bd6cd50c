import numpy as np
import pytest

from ecgrecon.dsp import (FilterSpec, bandpass_filter, baseline_remove,
                          clean_signal, design_bandpass, detect_r_peaks,
                          notch_filter, resample_to_100hz)
from ecgrecon.errors import FilterSpecError, UnsupportedRateError


def _rms(x):
    return np.sqrt(np.mean(np.square(x)))


def _tone(freq, fs, seconds):
    t = np.arange(int(seconds * fs)) / fs
    return np.sin(2 * np.pi * freq * t)


def _gain_db(filt, freq, fs, seconds=10.0, settle=1.0):
    x = _tone(freq, fs, seconds)
    y = filt(x, fs)
    s = int(settle * fs)
    return 20 * np.log10(_rms(y[s:-s]) / _rms(x[s:-s]))


def test_notch_attenuates_50hz():
    assert _gain_db(notch_filter, 50.0, 200.0) <= -20.0


def test_notch_passes_5hz():
    assert abs(_gain_db(notch_filter, 5.0, 200.0)) <= 0.5


def test_notch_zero_in_zero_out():
    out = notch_filter(np.zeros(1000), 200.0)
    np.testing.assert_allclose(out, 0.0, atol=1e-12)


def test_notch_rejects_nyquist_spec():
    with pytest.raises(FilterSpecError):
        notch_filter(np.zeros(100), 100.0)  # 50 Hz == Nyquist


def test_bandpass_passes_10hz():
    assert abs(_gain_db(bandpass_filter, 10.0, 100.0)) <= 0.5


def test_bandpass_rejects_dc():
    out = bandpass_filter(np.ones(2000), 100.0)
    assert np.abs(out[500:1500]).max() < 1e-3


def test_bandpass_attenuates_49hz():
    assert _gain_db(bandpass_filter, 49.0, 100.0) <= -20.0


def test_bandpass_attenuates_005hz():
    x = _tone(0.05, 100.0, 80.0)
    y = bandpass_filter(x, 100.0)
    s = 2000
    db = 20 * np.log10(_rms(y[s:-s]) / _rms(x[s:-s]))
    assert db <= -20.0


def test_bandpass_no_fallback_needed_at_100hz():
    _, high, fell_back = design_bandpass(100.0)
    assert high == 45.0 and not fell_back


def test_filters_length_preserving_and_linear():
    rng = np.random.default_rng(0)
    x, y = rng.normal(size=1000), rng.normal(size=1000)
    for filt in (notch_filter, bandpass_filter):
        fx, fy = filt(x, 200.0), filt(y, 200.0)
        combo = filt(2.0 * x + 3.0 * y, 200.0)
        assert len(fx) == len(x)
        np.testing.assert_allclose(combo, 2.0 * fx + 3.0 * fy, rtol=1e-9, atol=1e-9)


def test_zero_phase_no_lag():
    fs = 100.0
    x = _tone(10.0, fs, 10.0)
    y = bandpass_filter(x, fs)
    s = slice(200, 800)
    lags = np.arange(-4, 5)  # under half the 10-sample period, avoids aliases
    corr = [np.dot(x[s], np.roll(y, l)[s]) for l in lags]
    assert lags[int(np.argmax(corr))] == 0


def test_baseline_constant_cancels():
    out = baseline_remove(np.full(500, 1.0), 100.0)
    np.testing.assert_allclose(out, 0.0, atol=1e-9)


def test_baseline_offset_invariance():
    rng = np.random.default_rng(1)
    x = rng.normal(size=500)
    a = baseline_remove(x, 100.0)
    b = baseline_remove(x + 3.25, 100.0)
    np.testing.assert_allclose(a, b, atol=1e-9)


def test_baseline_kills_slow_wander_keeps_impulses():
    fs = 100.0
    t = np.arange(3000) / fs
    wander = 1.0 * np.sin(2 * np.pi * 0.1 * t)
    impulses = np.zeros_like(t)
    peak_idx = np.arange(100, 2900, 90)
    impulses[peak_idx] = 1.5
    out = baseline_remove(wander + impulses, fs)
    residual = out.copy()
    residual[peak_idx] = 0.0
    # ignore a couple of samples around each impulse
    for i in peak_idx:
        residual[max(0, i - 2):i + 3] = 0.0
    atten_db = 20 * np.log10(_rms(residual[200:-200]) / _rms(wander[200:-200]))
    assert atten_db <= -10.0
    recovered = out[peak_idx]
    np.testing.assert_allclose(recovered, 1.5, rtol=0.1)


def test_resample_identity_at_100hz():
    x = np.random.default_rng(2).normal(size=500)
    np.testing.assert_array_equal(resample_to_100hz(x, 100.0), x)


def test_resample_length_1000hz():
    assert len(resample_to_100hz(np.zeros(1000), 1000.0)) == 100


def test_resample_preserves_5hz_amplitude():
    x = _tone(5.0, 1000.0, 10.0)
    y = resample_to_100hz(x, 1000.0)
    s = 100
    db = 20 * np.log10(_rms(y[s:-s]) / _rms(x[1000:-1000]))
    assert abs(db) <= 0.5


def test_resample_rejects_non_integer_ratio():
    with pytest.raises(UnsupportedRateError):
        resample_to_100hz(np.zeros(100), 250.0)


def _qrs_train(fs, peak_idx, n, width=0.012, amp=1.0, noise=0.0, seed=0):
    t = np.arange(n) / fs
    x = np.zeros(n)
    for p in peak_idx:
        x += amp * np.exp(-0.5 * ((t - p / fs) / width) ** 2)
    if noise:
        x += np.random.default_rng(seed).normal(0, noise, size=n)
    return x


def test_rpeaks_within_3_samples():
    fs = 100.0
    truth = [100, 200, 300]
    x = _qrs_train(fs, truth, 400)
    peaks = detect_r_peaks(x, fs)
    assert len(peaks) == 3
    for p, want in zip(peaks, truth):
        assert abs(p - want) <= 3


def test_rpeaks_empty_for_flat():
    assert detect_r_peaks(np.zeros(500), 100.0) == []


def test_rpeaks_single_beat():
    x = _qrs_train(100.0, [150], 300)
    peaks = detect_r_peaks(x, 100.0)
    assert len(peaks) == 1
    assert 147 <= peaks[0] <= 153


def test_rpeaks_strictly_increasing_with_refractory():
    fs = 100.0
    truth = list(range(80, 2900, 70))
    x = _qrs_train(fs, truth, 3000, noise=0.02, seed=4)
    peaks = detect_r_peaks(x, fs)
    diffs = np.diff(peaks)
    assert np.all(diffs >= 0.2 * fs)
    assert np.all(diffs > 0)


def test_rpeaks_sensitivity_under_noise():
    fs = 100.0
    hits = total = 0
    for seed in range(5):
        truth = list(range(100, 5900, 80))
        x = _qrs_train(fs, truth, 6000, noise=0.02, seed=seed)
        peaks = np.array(detect_r_peaks(x, fs))
        total += len(truth)
        for want in truth:
            if len(peaks) and np.min(np.abs(peaks - want)) <= 3:
                hits += 1
    assert hits / total >= 0.99


def test_clean_signal_chain_runs():
    rng = np.random.default_rng(5)
    x = _qrs_train(100.0, [100, 200, 300], 400) + 0.3 + rng.normal(0, 0.02, 400)
    y = clean_signal(x, 100.0)
    assert len(y) == 400
    assert abs(np.mean(y)) < 0.05


def test_filterspec_serialization_round_trip():
    spec = FilterSpec(notch_freq=60.0, bandpass_high=40.0)
    assert FilterSpec.from_dict(spec.to_dict()) == spec
