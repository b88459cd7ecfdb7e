"""Intrusive, audiogram-aware music quality index.

The index compares a processed signal with a NAL-R amplified reference
through a gammatone filterbank. It is modelled on HAAQI but is not a port
of it: a faithful HAAQI can be dropped in by implementing
:class:`QualityMetric`.

Outline of :func:`score`:

1. resample both signals to ``internal_rate``, trim to a common length and
   align them by cross-correlation;
2. split both into ``n_bands`` ERB-spaced gammatone bands;
3. match each processed band to the reference with a least-squares gain,
   so that a static linear equalisation (such as the prescription carried
   by the reference) is not counted as a distortion;
4. attenuate every band by the listener's threshold at its centre
   frequency and express levels in dB above threshold;
5. envelope fidelity: per frame, correlate the cepstrally smoothed
   across-band log-envelope profiles and average over audible frames;
6. spectral fidelity: one minus the normalised distance between the
   long-term audible band-energy profiles;
7. combine the two with ``envelope_weight`` and ``spectrum_weight``.
"""
from __future__ import annotations

import math
from dataclasses import dataclass
from typing import Protocol

import numpy as np
from scipy.fft import dct, irfft, next_fast_len, rfft
from scipy.signal import butter, firwin, gammatone, lfilter, resample_poly, sosfilt

from .listener import AUDIOGRAM_FREQUENCIES, Audiogram, Listener
from .prescription import amplify_ear
from .signal_io import AudioBuffer, peak, resample

# Glasberg & Moore ERB scale.
_EAR_Q = 9.26449
_MIN_BW = 24.7


class MetricError(ValueError):
    """Raised for inputs the metric cannot compare."""


@dataclass(frozen=True)
class MetricConfig:
    """Settings of the quality index.

    Attributes:
        internal_rate: rate both signals are converted to, in Hz.
        n_bands: number of gammatone bands.
        band_range: lowest and highest band centre frequency in Hz.
        frame_ms: envelope frame length.
        env_cutoff_hz: envelope lowpass cutoff.
        envelope_weight, spectrum_weight: mixing weights, summing to 1.
        n_cepstral: cepstral coefficients kept when smoothing profiles.
        level_db: level in dB HL-equivalent of a band at RMS 1.0.
        silence_db: frames whose reference sensation level summed across
            bands is at or below this are ignored.
        align_ms: maximum lag searched when aligning the signals.
        max_mismatch_s: largest tolerated duration difference.
    """

    internal_rate: int = 24000
    n_bands: int = 32
    band_range: tuple[float, float] = (80.0, 8000.0)
    frame_ms: float = 8.0
    env_cutoff_hz: float = 32.0
    envelope_weight: float = 0.8
    spectrum_weight: float = 0.2
    n_cepstral: int = 6
    level_db: float = 100.0
    silence_db: float = 2.5
    align_ms: float = 100.0
    max_mismatch_s: float = 0.5

    def __post_init__(self):
        if self.n_bands < 8:
            raise ValueError("n_bands must be at least 8")
        if not math.isclose(self.envelope_weight + self.spectrum_weight, 1.0):
            raise ValueError("metric weights must sum to 1")
        low, high = self.band_range
        if not 0 < low < high < self.internal_rate / 2:
            raise ValueError(f"band_range {self.band_range} must lie below Nyquist")
        if not 2 <= self.n_cepstral <= self.n_bands:
            raise ValueError("n_cepstral must be between 2 and n_bands")
        if self.env_cutoff_hz >= 500.0 / self.frame_ms:
            raise ValueError("env_cutoff_hz must lie below half the frame rate")

    @property
    def frame_length(self) -> int:
        return max(1, int(round(self.frame_ms * self.internal_rate / 1000)))


DEFAULT_CONFIG = MetricConfig()


class QualityMetric(Protocol):
    def __call__(
        self, processed: AudioBuffer, reference: AudioBuffer, audiogram: Audiogram,
        cfg: MetricConfig = DEFAULT_CONFIG,
    ) -> float: ...


def erb_centre_frequencies(low: float, high: float, n_bands: int) -> np.ndarray:
    """Centre frequencies equally spaced on the ERB-number scale."""
    def to_erb(f):
        return _EAR_Q * np.log(1 + f / (_EAR_Q * _MIN_BW))

    def from_erb(e):
        return (np.exp(e / _EAR_Q) - 1) * _EAR_Q * _MIN_BW

    return from_erb(np.linspace(to_erb(low), to_erb(high), n_bands))


def band_thresholds(audiogram: Audiogram, centres: np.ndarray) -> np.ndarray:
    """Audiogram interpolated over log frequency, held flat outside 250-8000 Hz."""
    log_f = np.log(np.asarray(AUDIOGRAM_FREQUENCIES, dtype=float))
    return np.interp(np.log(centres), log_f, audiogram.as_array())


# Decimation factors tried for low bands; a band runs at the lowest rate
# whose Nyquist clears its centre frequency by BAND_HEADROOM_ERB bandwidths.
_DECIMATIONS = (6, 4, 3, 2, 1)
BAND_HEADROOM_ERB = 6.0

# Anti-alias filter for band decimation: taps per unit of decimation.
# Bands are placed well below the decimated Nyquist, so a short filter does.
_DECIMATION_TAPS = 10

# Keeps recursive filter states out of the denormal range during silence.
_DENORMAL_GUARD = 1e-25

_FILTERBANK_CACHE: dict = {}


def _erb_bandwidth(f):
    return _MIN_BW + f / _EAR_Q


@dataclass(frozen=True, eq=False)
class _Filterbank:
    centres: np.ndarray
    # decimation factor -> anti-alias FIR
    decimators: dict
    # (decimation factor, [(band index, b, a), ...]) groups
    groups: tuple
    envelope_sos: np.ndarray


def _filterbank(cfg: MetricConfig) -> _Filterbank:
    key = (cfg.internal_rate, cfg.n_bands, cfg.band_range, cfg.env_cutoff_hz, cfg.frame_ms)
    if key not in _FILTERBANK_CACHE:
        rate, frame = cfg.internal_rate, cfg.frame_length
        centres = erb_centre_frequencies(*cfg.band_range, cfg.n_bands)
        factors = [d for d in _DECIMATIONS if rate % d == 0 and frame % d == 0]
        grouped: dict[int, list] = {d: [] for d in factors}
        for index, fc in enumerate(centres):
            for d in factors:
                if fc + BAND_HEADROOM_ERB * _erb_bandwidth(fc) < 0.45 * rate / d or d == 1:
                    b, a = gammatone(fc, "iir", fs=rate // d)
                    grouped[d].append((index, b, a))
                    break
        groups = tuple((d, tuple(bands)) for d, bands in grouped.items() if bands)
        decimators = {
            d: firwin(_DECIMATION_TAPS * d + 1, 1.0 / d, window=("kaiser", 5.0))
            for d, _ in groups if d > 1
        }
        envelope = butter(2, cfg.env_cutoff_hz, fs=rate / frame, output="sos")
        _FILTERBANK_CACHE[key] = _Filterbank(centres, decimators, groups, envelope)
    return _FILTERBANK_CACHE[key]


def _align(reference: np.ndarray, processed: np.ndarray, max_lag: int):
    """Shift ``processed`` by the lag in ``[-max_lag, max_lag]`` that best matches ``reference``."""
    n = len(reference)
    size = next_fast_len(n + max_lag + 1, real=True)
    circular = irfft(rfft(processed, size) * np.conj(rfft(reference, size)), size)
    lags = np.arange(-max_lag, max_lag + 1)
    lag = int(lags[np.argmax(circular[lags % size])])
    if lag > 0:
        return reference[: n - lag], processed[lag:]
    if lag < 0:
        return reference[-lag:], processed[: n + lag]
    return reference, processed


def _band_analysis(reference: np.ndarray, processed: np.ndarray, cfg: MetricConfig):
    """Per-band statistics of both signals.

    Returns long-term band powers of reference and processed, their band
    cross-power, and the envelopes (rectified, frame-averaged, then
    lowpassed at ``env_cutoff_hz``), each band on its own row.
    """
    bank = _filterbank(cfg)
    n_frames = len(reference) // cfg.frame_length
    n = n_frames * cfg.frame_length
    full = np.stack([reference[:n], processed[:n]])

    ref_power = np.zeros(cfg.n_bands)
    proc_power = np.zeros(cfg.n_bands)
    cross = np.zeros(cfg.n_bands)
    envelopes = np.zeros((cfg.n_bands, 2, n_frames))
    for factor, bands in bank.groups:
        if factor == 1:
            both = full
        else:
            both = resample_poly(full, 1, factor, axis=1, window=bank.decimators[factor])
        both = both + _DENORMAL_GUARD * (1 - 2 * (np.arange(both.shape[1]) % 2))
        frame = cfg.frame_length // factor
        for index, b, a in bands:
            out = lfilter(b, a, both, axis=1)
            ref_power[index] = np.dot(out[0], out[0]) / out.shape[1]
            proc_power[index] = np.dot(out[1], out[1]) / out.shape[1]
            cross[index] = np.dot(out[0], out[1]) / out.shape[1]
            envelopes[index] = np.abs(out).reshape(2, n_frames, frame).mean(axis=-1)
    envelopes = np.maximum(sosfilt(bank.envelope_sos, envelopes, axis=-1), 0.0)
    return ref_power, proc_power, cross, envelopes[:, 0], envelopes[:, 1]


def _cepstral_correlation(ref_db: np.ndarray, proc_db: np.ndarray, cfg: MetricConfig):
    """Mean across-band correlation of smoothed profiles over audible frames."""
    ref_cep = dct(ref_db, type=2, norm="ortho", axis=0)[1 : cfg.n_cepstral]
    proc_cep = dct(proc_db, type=2, norm="ortho", axis=0)[1 : cfg.n_cepstral]
    ref_norm = np.linalg.norm(ref_cep, axis=0)
    proc_norm = np.linalg.norm(proc_cep, axis=0)
    active = (ref_db.sum(axis=0) > cfg.silence_db) & (ref_norm > 1e-9)
    if not np.any(active):
        return 0.0
    dots = np.sum(ref_cep[:, active] * proc_cep[:, active], axis=0)
    denom = ref_norm[active] * proc_norm[active]
    corr = np.divide(dots, denom, out=np.zeros_like(dots), where=denom > 0)
    return float(np.mean(corr))


def _spectral_fidelity(ref_power: np.ndarray, proc_power: np.ndarray) -> float:
    ref_audible = np.maximum(ref_power - 1.0, 0.0)
    proc_audible = np.maximum(proc_power - 1.0, 0.0)
    total = np.sum(ref_audible + proc_audible)
    if total <= 0:
        return 0.0
    return float(1.0 - np.sum(np.abs(ref_audible - proc_audible)) / total)


def _mono(buffer: AudioBuffer, name: str) -> np.ndarray:
    if buffer.channels != 1:
        raise MetricError(f"{name} must be mono, got {buffer.channels} channels")
    if buffer.length == 0:
        raise MetricError(f"{name} is empty")
    return buffer.samples[0]


def score(
    processed: AudioBuffer,
    reference: AudioBuffer,
    audiogram: Audiogram,
    cfg: MetricConfig = DEFAULT_CONFIG,
) -> float:
    """Quality of ``processed`` against ``reference`` for one ear, in [0, 1].

    Silent or otherwise degenerate inputs score 0 rather than NaN.

    Raises:
        MetricError: non-mono or empty input, or durations that differ by
            more than ``cfg.max_mismatch_s``.
    """
    _mono(processed, "processed")
    _mono(reference, "reference")
    if abs(float(processed.duration - reference.duration)) > cfg.max_mismatch_s:
        raise MetricError(
            f"durations differ by more than {cfg.max_mismatch_s} s: "
            f"{float(processed.duration):.3f} vs {float(reference.duration):.3f}"
        )
    proc = resample(processed, cfg.internal_rate).samples[0].astype(np.float64)
    ref = resample(reference, cfg.internal_rate).samples[0].astype(np.float64)
    n = min(len(proc), len(ref))
    proc, ref = proc[:n], ref[:n]
    if not np.any(proc) or not np.any(ref):
        return 0.0

    max_lag = int(round(cfg.align_ms * cfg.internal_rate / 1000))
    ref, proc = _align(ref, proc, max_lag)
    if len(ref) < cfg.frame_length:
        return 0.0

    centres = _filterbank(cfg).centres
    ref_power, proc_power, cross, ref_env, proc_env = _band_analysis(ref, proc, cfg)

    # least-squares gain per band
    gain = np.divide(cross, proc_power, out=np.zeros_like(cross), where=proc_power > 0)

    # amplitude scale into threshold units: 1.0 = the listener's threshold
    to_threshold = 10 ** ((cfg.level_db - band_thresholds(audiogram, centres)) / 20)
    ref_scale = to_threshold[:, None]
    proc_scale = (np.abs(gain) * to_threshold)[:, None]

    ref_db = 10 * np.log10(1.0 + (ref_env * ref_scale) ** 2)
    proc_db = 10 * np.log10(1.0 + (proc_env * proc_scale) ** 2)
    envelope = _cepstral_correlation(ref_db, proc_db, cfg)

    spectrum = _spectral_fidelity(
        ref_power * to_threshold**2, proc_power * (gain * to_threshold) ** 2
    )
    value = cfg.envelope_weight * envelope + cfg.spectrum_weight * spectrum
    return float(min(max(value, 0.0), 1.0))


def make_reference(
    clean: AudioBuffer, audiogram: Audiogram, cfg: MetricConfig = DEFAULT_CONFIG
) -> AudioBuffer:
    """NAL-R amplified copy of a mono clean signal at the metric's rate."""
    if clean.channels != 1:
        raise MetricError("make_reference expects a mono signal")
    if clean.length == 0 or peak(clean) == 0:
        raise MetricError("cannot build a reference from a silent signal")
    return resample(amplify_ear(clean, audiogram), cfg.internal_rate)


def score_stereo(
    processed: AudioBuffer,
    clean: AudioBuffer,
    listener: Listener,
    cfg: MetricConfig = DEFAULT_CONFIG,
) -> tuple[float, float]:
    """Left- and right-ear scores against the listener's own references.

    A silent clean channel cannot serve as a reference; that ear scores 0.
    """
    if processed.channels != 2 or clean.channels != 2:
        raise MetricError("score_stereo needs stereo processed and clean signals")
    scores = []
    for ch in range(2):
        audiogram = listener.ear(ch)
        clean_ch = clean.channel(ch)
        if peak(clean_ch) == 0:
            scores.append(0.0)
            continue
        reference = make_reference(clean_ch, audiogram, cfg)
        scores.append(score(processed.channel(ch), reference, audiogram, cfg))
    return scores[0], scores[1]


def score_stems(est, truth, listener: Listener, cfg: MetricConfig = DEFAULT_CONFIG) -> list[float]:
    """Eight scores in V-L, V-R, D-L, D-R, B-L, B-R, O-L, O-R order."""
    if est.length != truth.length:
        raise MetricError("estimated and true stems differ in length")
    out = []
    for est_stem, true_stem in zip(est.stems(), truth.stems()):
        out.extend(score_stereo(est_stem, true_stem, listener, cfg))
    return out
