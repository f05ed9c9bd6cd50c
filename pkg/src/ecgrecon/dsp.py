"""Signal cleaning: notch, band-pass, median baseline removal, 100 Hz
resampling, and R-peak detection.

All IIR stages are applied forward-backward (zero phase) and preserve
length. Filters are pure functions; nothing is cached between calls.
"""

from __future__ import annotations

from dataclasses import dataclass, asdict

import numpy as np
from scipy import ndimage, signal

from .errors import FilterSpecError, UnsupportedRateError

TARGET_FS = 100.0


@dataclass
class FilterSpec:
    notch_freq: float = 50.0
    notch_q: float = 30.0
    bandpass_low: float = 0.5
    bandpass_high: float = 45.0
    bandpass_order: int = 4
    median_win_short: float = 0.2   # seconds
    median_win_long: float = 0.6    # seconds

    def to_dict(self):
        return asdict(self)

    @classmethod
    def from_dict(cls, d):
        return cls(**{k: d[k] for k in asdict(cls()) if k in d})


def _validate_band(spec, fs):
    if not (0.0 < spec.bandpass_low < spec.bandpass_high < fs / 2.0):
        raise FilterSpecError(
            f"band edges ({spec.bandpass_low}, {spec.bandpass_high}) invalid for fs={fs}")


def notch_filter(x, fs, spec=None):
    """Zero-phase biquad notch at spec.notch_freq."""
    spec = spec or FilterSpec()
    if spec.notch_freq >= fs / 2.0:
        raise FilterSpecError(f"notch {spec.notch_freq} Hz >= Nyquist for fs={fs}")
    b, a = signal.iirnotch(spec.notch_freq, spec.notch_q, fs=fs)
    return signal.filtfilt(b, a, np.asarray(x, dtype=np.float64))


def _sos_stable(sos):
    poles = np.concatenate([np.roots(section[3:]) for section in sos])
    return bool(np.all(np.abs(poles) < 1.0))


def design_bandpass(fs, spec=None):
    """Butterworth SOS design; returns (sos, effective_high, fell_back).

    At fs=100 the 45 Hz edge sits at 0.9*Nyquist; the realized filter is
    checked for pole stability and only falls back to a 40 Hz edge if
    unstable. The fallback flag is surfaced for the run manifest.
    """
    spec = spec or FilterSpec()
    _validate_band(spec, fs)
    high = spec.bandpass_high
    sos = signal.butter(spec.bandpass_order, [spec.bandpass_low, high],
                        btype="bandpass", output="sos", fs=fs)
    if _sos_stable(sos):
        return sos, high, False
    high = 40.0
    sos = signal.butter(spec.bandpass_order, [spec.bandpass_low, high],
                        btype="bandpass", output="sos", fs=fs)
    return sos, high, True


def bandpass_filter(x, fs, spec=None):
    """Zero-phase Butterworth band-pass (cascaded second-order sections)."""
    sos, _, _ = design_bandpass(fs, spec)
    return signal.sosfiltfilt(sos, np.asarray(x, dtype=np.float64))


def _odd_window(seconds, fs):
    n = max(1, int(round(seconds * fs)))
    return n if n % 2 == 1 else n + 1


def baseline_remove(x, fs, spec=None):
    """Two-stage median baseline estimate subtracted from the signal.

    output = x - median_long(median_short(x)), reflection padding at edges.
    """
    spec = spec or FilterSpec()
    x = np.asarray(x, dtype=np.float64)
    w1 = _odd_window(spec.median_win_short, fs)
    w2 = _odd_window(spec.median_win_long, fs)
    baseline = ndimage.median_filter(x, size=w1, mode="reflect")
    baseline = ndimage.median_filter(baseline, size=w2, mode="reflect")
    return x - baseline


def clean_signal(x, fs, spec=None):
    """Full cleaning chain: notch -> band-pass -> baseline removal."""
    spec = spec or FilterSpec()
    y = notch_filter(x, fs, spec) if spec.notch_freq < fs / 2.0 else np.asarray(x, float)
    y = bandpass_filter(y, fs, spec)
    return baseline_remove(y, fs, spec)


def resample_to_100hz(x, fs_in):
    """Anti-alias (45 Hz low-pass) then decimate by the integer factor."""
    x = np.asarray(x, dtype=np.float64)
    if fs_in == TARGET_FS:
        return x.copy()
    factor = fs_in / TARGET_FS
    if factor < 1 or abs(factor - round(factor)) > 1e-9:
        raise UnsupportedRateError(f"fs_in={fs_in} is not an integer multiple of 100 Hz")
    factor = int(round(factor))
    sos = signal.butter(8, 45.0, btype="low", output="sos", fs=fs_in)
    y = signal.sosfiltfilt(sos, x)
    out = y[::factor]
    n_out = int(np.floor(len(x) * TARGET_FS / fs_in))
    return out[:n_out]


def detect_r_peaks(lead_ii, fs):
    """Pan-Tompkins-style R-peak detection on lead II.

    band-pass 5-15 Hz -> differentiate -> square -> 0.15 s moving-window
    integration -> adaptive threshold at 0.5x running peak average, with a
    0.2 s refractory interval. Indices refer to the input signal.
    """
    x = np.asarray(lead_ii, dtype=np.float64)
    if len(x) < 2 * fs:
        raise ValueError(f"need at least 2 s of signal, got {len(x) / fs:.2f} s")
    if not np.any(x):
        return []
    sos = signal.butter(2, [5.0, 15.0], btype="bandpass", output="sos", fs=fs)
    bp = signal.sosfiltfilt(sos, x)
    deriv = np.gradient(bp)
    sq = deriv * deriv
    win = max(1, int(round(0.15 * fs)))
    integ = np.convolve(sq, np.ones(win) / win, mode="same")

    refractory = int(np.ceil(0.2 * fs))
    cand, _ = signal.find_peaks(integ, distance=refractory)
    if len(cand) == 0:
        return []
    spki = float(np.max(integ[:int(2 * fs)]))
    if spki <= 0:
        return []
    peaks = []
    half = max(1, int(round(0.1 * fs)))
    for c in cand:
        if integ[c] < 0.5 * spki:
            continue
        lo, hi = max(0, c - half), min(len(x), c + half + 1)
        r = lo + int(np.argmax(x[lo:hi]))
        if peaks and r - peaks[-1] < refractory:
            continue
        peaks.append(r)
        spki = 0.125 * integ[c] + 0.875 * spki
    return peaks
