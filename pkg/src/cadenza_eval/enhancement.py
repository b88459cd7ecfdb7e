"""Music enhancers: VDBO demix/remix and the car-task level constraint."""
from __future__ import annotations

import logging
from dataclasses import dataclass, fields
from typing import Protocol, runtime_checkable

import numpy as np

from .listener import Listener
from .prescription import apply_prescription
from .signal_io import AudioBuffer, peak, rms, rms_db

logger = logging.getLogger(__name__)

STEM_NAMES = ("vocals", "drums", "bass", "other")
REMIX_GAIN_LIMIT_DB = 30.0
ORACLE_RESIDUAL_DB = -40.0
CLIP_LEVEL = 1.0

# Shrink factor applied while the amplified peak still rounds above full scale.
_GAIN_BACKOFF = 1.0 - 2.0**-20


class EnhancementError(ValueError):
    """Raised for invalid stems, mixtures or segment requests."""


@dataclass(frozen=True, eq=False)
class StemSet:
    """Vocals, drums, bass and other stems; stereo, equal length and rate."""

    vocals: AudioBuffer
    drums: AudioBuffer
    bass: AudioBuffer
    other: AudioBuffer

    def __post_init__(self):
        shapes = {(s.channels, s.length, s.sample_rate) for s in self.stems()}
        if len(shapes) != 1:
            raise EnhancementError(f"stems differ in shape or rate: {sorted(shapes)}")
        if self.vocals.channels != 2:
            raise EnhancementError("stems must be stereo")

    @classmethod
    def from_mapping(cls, stems: dict) -> StemSet:
        missing = [name for name in STEM_NAMES if name not in stems]
        if missing:
            raise EnhancementError(f"missing stems: {missing}")
        return cls(*(stems[name] for name in STEM_NAMES))

    def stems(self) -> tuple[AudioBuffer, ...]:
        """Stems in V, D, B, O order."""
        return tuple(getattr(self, f.name) for f in fields(self))

    def items(self):
        return zip(STEM_NAMES, self.stems())

    @property
    def sample_rate(self) -> int:
        return self.vocals.sample_rate

    @property
    def length(self) -> int:
        return self.vocals.length

    def total(self) -> AudioBuffer:
        acc = sum(s.samples.astype(np.float64) for s in self.stems())
        return AudioBuffer(acc, self.sample_rate)

    def map(self, func) -> StemSet:
        return StemSet(*(func(s) for s in self.stems()))


@dataclass(frozen=True)
class RemixGains:
    vocals: float = 0.0
    drums: float = 0.0
    bass: float = 0.0
    other: float = 0.0

    def __post_init__(self):
        for name in STEM_NAMES:
            value = getattr(self, name)
            if not -REMIX_GAIN_LIMIT_DB <= value <= REMIX_GAIN_LIMIT_DB:
                raise EnhancementError(
                    f"{name} gain {value} dB outside +-{REMIX_GAIN_LIMIT_DB:g} dB"
                )

    def as_tuple(self) -> tuple[float, ...]:
        return tuple(getattr(self, name) for name in STEM_NAMES)


@runtime_checkable
class SeparationBackend(Protocol):
    """Splits a stereo mixture into VDBO stems.

    ``truth`` carries the reference stems when the harness has them; only
    oracle-style backends look at it. ``max_concurrency`` is the number of
    ``separate`` calls the backend tolerates at once (``None`` = unlimited).
    """

    name: str
    max_concurrency: int | None

    def separate(self, mixture: AudioBuffer, truth: StemSet | None = None) -> StemSet: ...


def oracle_separate(mixture: AudioBuffer, truth: StemSet) -> StemSet:
    """Return the true stems after checking that they add up to ``mixture``."""
    if (mixture.channels, mixture.length, mixture.sample_rate) != (
        truth.vocals.channels, truth.length, truth.sample_rate,
    ):
        raise EnhancementError("true stems do not match the mixture's shape or rate")
    residual = AudioBuffer(
        truth.total().samples.astype(np.float64) - mixture.samples, mixture.sample_rate
    )
    level = rms_db(residual)
    if level > ORACLE_RESIDUAL_DB:
        raise EnhancementError(
            f"stems do not sum to the mixture: residual {level:.1f} dBFS "
            f"(limit {ORACLE_RESIDUAL_DB:g} dBFS)"
        )
    return truth


class OracleBackend:
    """Returns the reference stems supplied by the caller."""

    name = "oracle"
    max_concurrency = None

    def separate(self, mixture: AudioBuffer, truth: StemSet | None = None) -> StemSet:
        if truth is None:
            raise EnhancementError("the oracle backend needs the true stems")
        return oracle_separate(mixture, truth)


class NullBackend:
    """Puts the whole mixture in ``other`` and silence everywhere else."""

    name = "null"
    max_concurrency = None

    def separate(self, mixture: AudioBuffer, truth: StemSet | None = None) -> StemSet:
        silent = AudioBuffer.silence(mixture.channels, mixture.length, mixture.sample_rate)
        return StemSet(silent, silent, silent, mixture)


BACKENDS = {"oracle": OracleBackend, "null": NullBackend}


def remix(stems: StemSet, gains: RemixGains) -> AudioBuffer:
    """Weighted stem sum, loudness-matched to the unit-gain sum.

    Samples beyond +-1 are kept; clipping is left to whatever plays the
    result.
    """
    unit = stems.total()
    if all(g == 0.0 for g in gains.as_tuple()):
        return unit
    weighted = sum(
        s.samples.astype(np.float64) * 10 ** (g / 20)
        for s, g in zip(stems.stems(), gains.as_tuple())
    )
    target = rms(unit)
    actual = float(np.sqrt(np.mean(weighted**2)))
    if target > 0 and actual > 0:
        weighted = weighted * (target / actual)
    return AudioBuffer(weighted, stems.sample_rate)


def level_constraint_gain(mixture: AudioBuffer, listener: Listener) -> float:
    """Broadband gain <= 1 that keeps the prescribed signal within full scale.

    The gain is ``min(1, 1 / p)`` with ``p`` the peak after NAL-R
    amplification, nudged down when float rounding would still leave the
    amplified peak above 1.0.
    """
    if peak(mixture) == 0:
        raise EnhancementError("cannot constrain the level of a silent mixture")
    amplified_peak = peak(apply_prescription(mixture, listener))
    if amplified_peak <= CLIP_LEVEL:
        return 1.0
    gain = CLIP_LEVEL / amplified_peak
    while peak(apply_prescription(mixture.scaled(gain), listener)) > CLIP_LEVEL:
        gain *= _GAIN_BACKOFF
    return gain


def apply_task2_baseline(mixture: AudioBuffer, listener: Listener) -> AudioBuffer:
    """The car-task baseline: scale the mixture by its level-constraint gain."""
    gain = level_constraint_gain(mixture, listener)
    if gain == 1.0:
        return mixture
    return mixture.scaled(gain)


def segment_offset(total_samples: int, segment_samples: int, seed: int) -> int:
    """Uniform random start offset in ``[0, total - segment]`` for ``seed``."""
    if segment_samples > total_samples:
        raise EnhancementError(
            f"segment of {segment_samples} samples longer than buffer of {total_samples}"
        )
    rng = np.random.default_rng(seed)
    return int(rng.integers(0, total_samples - segment_samples, endpoint=True))


def select_segment(buffer: AudioBuffer, duration_s: float, seed: int) -> AudioBuffer:
    """Contiguous ``duration_s`` excerpt at a seed-determined offset."""
    n = int(round(duration_s * buffer.sample_rate))
    if n <= 0:
        raise EnhancementError("segment duration must be positive")
    start = segment_offset(buffer.length, n, seed)
    return buffer.with_samples(buffer.samples[:, start : start + n])
