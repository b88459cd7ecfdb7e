"""Audio container, WAV I/O and the shared DSP primitives.

Every other module passes audio around as an :class:`AudioBuffer`: a
``(channels, samples)`` float32 array plus an integer sample rate.
Channel 0 is the left channel and channel 1 the right one.
"""
from __future__ import annotations

import logging
import math
import warnings
import wave
from dataclasses import dataclass
from fractions import Fraction
from pathlib import Path

import numpy as np
from scipy.io import wavfile
from scipy.signal import firwin, kaiser_beta, resample_poly

logger = logging.getLogger(__name__)

SILENCE_DB = -math.inf

ENCODINGS = ("pcm16", "pcm24", "float32")

# Taps per polyphase branch of the resampling filter.
RESAMPLE_TAPS_PER_PHASE = 64
RESAMPLE_STOPBAND_DB = 80.0
# Cutoff as a fraction of the lower Nyquist frequency.
RESAMPLE_CUTOFF = 0.92


class AudioError(ValueError):
    """Raised for invalid audio data or unsupported files."""


class UnsupportedEncodingError(AudioError):
    """Raised when a WAV file uses an encoding or layout we do not read."""


@dataclass(frozen=True, eq=False)
class AudioBuffer:
    """Multichannel sampled audio.

    Attributes:
        samples: float32 array of shape ``(channels, length)``, nominal full
            scale +-1.0. A 1-D input is promoted to a single channel.
        sample_rate: sampling rate in Hz.
    """

    samples: np.ndarray
    sample_rate: int

    def __post_init__(self):
        data = np.asarray(self.samples, dtype=np.float32)
        if data.ndim == 1:
            data = data[np.newaxis, :]
        if data.ndim != 2 or data.shape[0] < 1:
            raise AudioError(f"samples must be (channels, length), got {data.shape}")
        if int(self.sample_rate) != self.sample_rate or self.sample_rate <= 0:
            raise AudioError(f"sample_rate must be a positive integer, got {self.sample_rate}")
        if not np.isfinite(data).all():
            raise AudioError("samples contain NaN or infinity")
        data = data.copy() if data is self.samples else data
        data.setflags(write=False)
        object.__setattr__(self, "samples", data)
        object.__setattr__(self, "sample_rate", int(self.sample_rate))

    @classmethod
    def from_channels(cls, channels, sample_rate: int) -> AudioBuffer:
        """Build a buffer from a sequence of equal-length 1-D channels."""
        lengths = {len(c) for c in channels}
        if len(lengths) != 1:
            raise AudioError(f"channels have unequal lengths: {sorted(lengths)}")
        return cls(np.stack([np.asarray(c, dtype=np.float32) for c in channels]), sample_rate)

    @classmethod
    def silence(cls, channels: int, length: int, sample_rate: int) -> AudioBuffer:
        return cls(np.zeros((channels, length), dtype=np.float32), sample_rate)

    @property
    def channels(self) -> int:
        return self.samples.shape[0]

    @property
    def length(self) -> int:
        return self.samples.shape[1]

    @property
    def duration(self) -> Fraction:
        """Duration in seconds as an exact rational."""
        return Fraction(self.length, self.sample_rate)

    def channel(self, index: int) -> AudioBuffer:
        return AudioBuffer(self.samples[index], self.sample_rate)

    def with_samples(self, samples: np.ndarray) -> AudioBuffer:
        """Same sample rate, new sample data."""
        return AudioBuffer(samples, self.sample_rate)

    def scaled(self, gain: float) -> AudioBuffer:
        return AudioBuffer(self.samples.astype(np.float64) * gain, self.sample_rate)

    def __repr__(self) -> str:
        return (
            f"AudioBuffer(channels={self.channels}, length={self.length}, "
            f"sample_rate={self.sample_rate})"
        )


def read_wav(path) -> AudioBuffer:
    """Read a mono or stereo RIFF/WAVE file.

    PCM 16/24-bit and 32-bit float are accepted. Integer samples are scaled
    so that digital full scale maps to +-1.0.

    Raises:
        FileNotFoundError: if ``path`` does not exist.
        UnsupportedEncodingError: for other sample formats or more than two
            channels.
        AudioError: if the data chunk is truncated or the file is not WAV.
    """
    path = Path(path)
    if not path.is_file():
        raise FileNotFoundError(f"no such audio file: {path}")
    with warnings.catch_warnings():
        warnings.simplefilter("error", wavfile.WavFileWarning)
        try:
            rate, data = wavfile.read(path)
        except wavfile.WavFileWarning as err:
            raise AudioError(f"{path}: truncated or malformed data chunk ({err})") from err
        except ValueError as err:
            msg = str(err)
            if "not understood" in msg or "Unknown wave file format" in msg:
                raise UnsupportedEncodingError(f"{path}: {msg}") from err
            raise AudioError(f"{path}: {msg}") from err

    if data.dtype == np.int16:
        scaled = data.astype(np.float32) / 32768.0
    elif data.dtype == np.int32 and _wav_bits(path) == 24:
        # scipy left-justifies 24-bit samples into int32
        scaled = (data.astype(np.float64) / 2.0**31).astype(np.float32)
    elif data.dtype == np.float32:
        scaled = data
    else:
        raise UnsupportedEncodingError(f"{path}: unsupported sample format {data.dtype}")

    scaled = scaled.reshape(len(scaled), -1).T
    if scaled.shape[0] > 2:
        raise UnsupportedEncodingError(f"{path}: {scaled.shape[0]} channels (1-2 supported)")
    return AudioBuffer(scaled, rate)


def _wav_bits(path: Path) -> int:
    with open(path, "rb") as fh:
        header = fh.read(4096)
    pos = header.find(b"fmt ")
    if pos < 0:
        raise AudioError(f"{path}: missing fmt chunk")
    return int.from_bytes(header[pos + 22 : pos + 24], "little")


def write_wav(buffer: AudioBuffer, path, encoding: str = "float32") -> None:
    """Write ``buffer`` to ``path``.

    Float32 output round-trips bit-exactly. PCM encodings round to the
    nearest code and saturate at full scale.
    """
    if encoding not in ENCODINGS:
        raise UnsupportedEncodingError(f"encoding must be one of {ENCODINGS}, got {encoding!r}")
    if buffer.length == 0:
        raise AudioError("cannot write a zero-length buffer")
    frames = buffer.samples.T
    path = Path(path)
    if encoding == "float32":
        wavfile.write(path, buffer.sample_rate, np.ascontiguousarray(frames))
    elif encoding == "pcm16":
        codes = np.clip(np.rint(frames.astype(np.float64) * 32768.0), -32768, 32767)
        wavfile.write(path, buffer.sample_rate, codes.astype(np.int16))
    else:
        codes = np.clip(np.rint(frames.astype(np.float64) * 2.0**23), -(2**23), 2**23 - 1)
        raw = np.ascontiguousarray(codes.astype("<i4")).view(np.uint8).reshape(-1, 4)[:, :3]
        with wave.open(str(path), "wb") as wf:
            wf.setnchannels(buffer.channels)
            wf.setsampwidth(3)
            wf.setframerate(buffer.sample_rate)
            wf.writeframes(raw.tobytes())


def resample(buffer: AudioBuffer, target_rate: int) -> AudioBuffer:
    """Band-limited sample-rate conversion.

    Polyphase filtering with a Kaiser-windowed sinc of
    ``RESAMPLE_TAPS_PER_PHASE`` taps per phase. Output length is
    ``ceil(length * target_rate / sample_rate)``.
    """
    if target_rate <= 0 or int(target_rate) != target_rate:
        raise AudioError(f"target_rate must be a positive integer, got {target_rate}")
    target_rate = int(target_rate)
    if target_rate == buffer.sample_rate:
        return buffer
    ratio = Fraction(target_rate, buffer.sample_rate)
    up, down = ratio.numerator, ratio.denominator
    taps = _resample_filter(up, down)
    out = resample_poly(buffer.samples.astype(np.float64), up, down, axis=1, window=taps)
    return AudioBuffer(out, target_rate)


_FILTER_CACHE: dict[tuple[int, int], np.ndarray] = {}


def _resample_filter(up: int, down: int) -> np.ndarray:
    key = (up, down)
    if key not in _FILTER_CACHE:
        # taps per phase counted at the lower of the two rates
        n_taps = RESAMPLE_TAPS_PER_PHASE * max(up, down) + 1
        cutoff = RESAMPLE_CUTOFF / max(up, down)
        beta = kaiser_beta(RESAMPLE_STOPBAND_DB)
        # resample_poly applies the upsampling gain itself
        _FILTER_CACHE[key] = firwin(n_taps, cutoff, window=("kaiser", beta))
    return _FILTER_CACHE[key]


def _next_pow2(n: int) -> int:
    return 1 << max(0, int(n - 1).bit_length())


def convolve(signal, ir) -> np.ndarray:
    """Full linear convolution by overlap-add.

    The transform block is the next power of two at or above four times the
    impulse-response length, so each block carries
    ``block - len(ir) + 1`` new input samples.

    Args:
        signal: single-channel :class:`AudioBuffer` or 1-D array.
        ir: 1-D impulse response.

    Returns:
        float32 array of length ``len(signal) + len(ir) - 1``.
    """
    if isinstance(signal, AudioBuffer):
        if signal.channels != 1:
            raise AudioError("convolve expects a single-channel signal")
        x = signal.samples[0]
    else:
        x = np.asarray(signal)
    x = x.astype(np.float64).ravel()
    h = np.asarray(ir, dtype=np.float64).ravel()
    if x.size == 0 or h.size == 0:
        raise AudioError("convolve needs non-empty signal and impulse response")

    block = _next_pow2(4 * h.size)
    hop = block - h.size + 1
    n_blocks = -(-x.size // hop)
    blocks = np.zeros((n_blocks, hop))
    blocks.flat[: x.size] = x
    spectrum = np.fft.rfft(h, block)
    filtered = np.fft.irfft(np.fft.rfft(blocks, block, axis=1) * spectrum, block, axis=1)
    # block heads tile the output; each tail (len(ir) - 1 < hop) spills into the next hop
    out = np.zeros((n_blocks + 1) * hop)
    out[: n_blocks * hop] += filtered[:, :hop].ravel()
    tails = np.zeros((n_blocks, hop))
    tails[:, : block - hop] = filtered[:, hop:]
    out[hop:] += tails.ravel()
    return out[: x.size + h.size - 1].astype(np.float32)


def rms(buffer: AudioBuffer) -> float:
    """Root-mean-square over all channels, linear."""
    if buffer.length == 0:
        raise AudioError("rms of an empty buffer")
    data = buffer.samples.astype(np.float64)
    return float(np.sqrt(np.mean(data * data)))


def rms_db(buffer: AudioBuffer) -> float:
    """RMS level in dBFS; digital silence gives ``-inf``."""
    value = rms(buffer)
    return 20.0 * math.log10(value) if value > 0 else SILENCE_DB


def peak(buffer: AudioBuffer) -> float:
    if buffer.length == 0:
        raise AudioError("peak of an empty buffer")
    return float(np.max(np.abs(buffer.samples)))


def peak_db(buffer: AudioBuffer) -> float:
    """Peak level in dBFS; digital silence gives ``-inf``."""
    value = peak(buffer)
    return 20.0 * math.log10(value) if value > 0 else SILENCE_DB
