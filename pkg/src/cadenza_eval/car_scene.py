"""Car listening scene: engine and road noise, HRIR grid, binaural rendering.

Azimuths are in degrees, negative to the listener's left. HRIR grid points
are kept as integer tenths of a degree so lookups never depend on float
equality.
"""
from __future__ import annotations

import logging
import math
import re
from dataclasses import dataclass, field
from pathlib import Path

import numpy as np
from scipy.signal import butter, lfilter

from .signal_io import AudioBuffer, convolve, read_wav, rms, write_wav

logger = logging.getLogger(__name__)

GRID_MIN_DEG10 = -900
GRID_MAX_DEG10 = 900
GRID_STEP_DEG10 = 25
GRID_DEG10 = tuple(range(GRID_MIN_DEG10, GRID_MAX_DEG10 + 1, GRID_STEP_DEG10))

CONDITIONS = ("anechoic", "car")

# Engine RPM per km/h in gears 1-6.
GEAR_RPM_PER_KMH = (120.0, 75.0, 50.0, 38.0, 30.0, 25.0)
RPM_RANGE = (800.0, 5000.0)
CYLINDERS = 4
N_HARMONICS = 25

ENGINE_PEAK_DBFS = -20.0
ROAD_RMS_DBFS = -26.0
ROAD_CUTOFF_HZ = 500.0
SPEAKER_AZIMUTH_DEG = 20.0

SPEED_RANGE_KMH = (10.0, 140.0)

_FILENAME = re.compile(r"^(?P<cond>[a-z]+)_az(?P<az>[+-]?\d+)\.wav$")


class SceneError(ValueError):
    """Raised for invalid scene parameters, HRIR sets or render inputs."""


@dataclass(frozen=True)
class CarSceneParams:
    speed_kmh: float
    gear: int
    snr_db: float
    head_azimuth_deg: float = 0.0
    seed: int = 0
    road_cutoff_hz: float = ROAD_CUTOFF_HZ
    speaker_azimuth_deg: float = SPEAKER_AZIMUTH_DEG

    def __post_init__(self):
        low, high = SPEED_RANGE_KMH
        if not low <= self.speed_kmh <= high:
            raise SceneError(f"speed {self.speed_kmh} km/h outside [{low:g}, {high:g}]")
        if self.gear not in range(1, len(GEAR_RPM_PER_KMH) + 1):
            raise SceneError(f"gear must be 1-{len(GEAR_RPM_PER_KMH)}, got {self.gear}")
        if not -90.0 <= self.head_azimuth_deg <= 90.0:
            raise SceneError(f"head azimuth {self.head_azimuth_deg} outside [-90, 90]")
        if not 0 <= self.seed < 2**64:
            raise SceneError("seed must be an unsigned 64-bit integer")
        if not math.isfinite(self.snr_db):
            raise SceneError("snr_db must be finite")


@dataclass(frozen=True, eq=False)
class HrirSet:
    """Impulse-response pairs on the -90..+90 degree grid.

    Attributes:
        condition: ``"anechoic"`` or ``"car"``.
        entries: grid point in tenths of a degree -> ``(2, n)`` array of
            (left mic, right mic) impulse responses.
        sample_rate: rate of every impulse response.
    """

    condition: str
    entries: dict[int, np.ndarray] = field(repr=False)
    sample_rate: int

    def __post_init__(self):
        if self.condition not in CONDITIONS:
            raise SceneError(f"unknown HRIR condition {self.condition!r}")
        extra = sorted(set(self.entries) - set(GRID_DEG10))
        if extra:
            logger.warning(
                "ignoring %d off-grid %s HRIR entries: %s",
                len(extra), self.condition, [e / 10 for e in extra],
            )
        missing = [g / 10 for g in GRID_DEG10 if g not in self.entries]
        if missing:
            raise SceneError(f"{self.condition} HRIR set is missing azimuths {missing}")
        entries = {}
        for key in GRID_DEG10:
            ir = np.asarray(self.entries[key], dtype=np.float64)
            if ir.ndim != 2 or ir.shape[0] != 2 or ir.shape[1] == 0:
                raise SceneError(f"HRIR at {key / 10} deg must have shape (2, n), got {ir.shape}")
            ir.setflags(write=False)
            entries[key] = ir
        if len({ir.shape[1] for ir in entries.values()}) != 1:
            raise SceneError(f"{self.condition} HRIRs have differing lengths")
        object.__setattr__(self, "entries", entries)

    @classmethod
    def unit_impulse(cls, condition: str, sample_rate: int, length: int = 1) -> HrirSet:
        ir = np.zeros((2, length))
        ir[:, 0] = 1.0
        return cls(condition, {key: ir for key in GRID_DEG10}, sample_rate)

    @property
    def ir_length(self) -> int:
        return next(iter(self.entries.values())).shape[1]


def azimuth_filename(condition: str, deg10: int) -> str:
    return f"{condition}_az{deg10:+05d}.wav"


def load_hrir_set(directory, condition: str) -> HrirSet:
    """Load ``<condition>_az<signed tenths of a degree>.wav`` files from ``directory``."""
    directory = Path(directory)
    entries, rates = {}, set()
    for path in sorted(directory.glob(f"{condition}_az*.wav")):
        match = _FILENAME.match(path.name)
        if not match or match["cond"] != condition:
            continue
        buffer = read_wav(path)
        if buffer.channels != 2:
            raise SceneError(f"{path}: HRIR files must be stereo (left mic, right mic)")
        entries[int(match["az"])] = buffer.samples
        rates.add(buffer.sample_rate)
    if not entries:
        raise SceneError(f"no {condition} HRIRs found in {directory}")
    if len(rates) != 1:
        raise SceneError(f"{condition} HRIRs have mixed sample rates {sorted(rates)}")
    return HrirSet(condition, entries, rates.pop())


def save_hrir_set(hrirs: HrirSet, directory) -> None:
    directory = Path(directory)
    directory.mkdir(parents=True, exist_ok=True)
    for key, ir in hrirs.entries.items():
        write_wav(AudioBuffer(ir, hrirs.sample_rate), directory / azimuth_filename(hrirs.condition, key))


def nearest_grid_point(azimuth_deg: float) -> int:
    """Nearest grid point in tenths of a degree; ties go toward 0."""
    if not -90.0 <= azimuth_deg <= 90.0:
        raise SceneError(f"azimuth {azimuth_deg} outside [-90, 90]")
    steps = azimuth_deg * 10 / GRID_STEP_DEG10
    low, high = math.floor(steps), math.ceil(steps)
    d_low, d_high = steps - low, high - steps
    if math.isclose(d_low, d_high, abs_tol=1e-9):
        pick = low if abs(low) < abs(high) else high
    else:
        pick = low if d_low < d_high else high
    return pick * GRID_STEP_DEG10


def nearest_hrir(hrirs: HrirSet, azimuth_deg: float) -> np.ndarray:
    """The ``(2, n)`` impulse-response pair nearest to ``azimuth_deg``."""
    return hrirs.entries[nearest_grid_point(azimuth_deg)]


def engine_fundamental(speed_kmh: float, gear: int) -> float:
    """Firing frequency in Hz of a four-cylinder four-stroke engine."""
    if gear not in range(1, len(GEAR_RPM_PER_KMH) + 1):
        raise SceneError(f"gear must be 1-{len(GEAR_RPM_PER_KMH)}, got {gear}")
    rpm = min(max(speed_kmh * GEAR_RPM_PER_KMH[gear - 1], RPM_RANGE[0]), RPM_RANGE[1])
    return rpm / 60.0 * CYLINDERS / 2


def _n_samples(duration_s: float, sample_rate: int) -> int:
    if duration_s <= 0:
        raise SceneError("duration must be positive")
    return int(round(duration_s * sample_rate))


def synth_engine_tone(
    params: CarSceneParams,
    duration_s: float,
    sample_rate: int,
    n_harmonics: int = N_HARMONICS,
) -> AudioBuffer:
    """Additive harmonic complex at the engine fundamental.

    Harmonic k has amplitude 1/k and a random phase drawn from ``params.seed``;
    harmonics at or above Nyquist are dropped. The result peaks at
    ``ENGINE_PEAK_DBFS``.
    """
    n = _n_samples(duration_s, sample_rate)
    f0 = engine_fundamental(params.speed_kmh, params.gear)
    rng = np.random.default_rng(params.seed)
    phases = rng.uniform(0, 2 * np.pi, n_harmonics)
    t = np.arange(n) / sample_rate
    tone = np.zeros(n)
    for k in range(1, n_harmonics + 1):
        if k * f0 >= sample_rate / 2:
            break
        tone += np.sin(2 * np.pi * k * f0 * t + phases[k - 1]) / k
    tone *= 10 ** (ENGINE_PEAK_DBFS / 20) / np.max(np.abs(tone))
    return AudioBuffer(tone, sample_rate)


def road_filter(cutoff_hz: float, sample_rate: int):
    """First-order (6 dB/octave) Butterworth lowpass coefficients."""
    if not 0 < cutoff_hz < sample_rate / 2:
        raise SceneError(f"cutoff {cutoff_hz} Hz must lie in (0, {sample_rate / 2})")
    return butter(1, cutoff_hz, btype="low", fs=sample_rate)


def synth_road_noise(
    duration_s: float, sample_rate: int, cutoff_hz: float = ROAD_CUTOFF_HZ, seed: int = 0
) -> tuple[AudioBuffer, AudioBuffer]:
    """Left and right road noise: independent lowpassed white noise streams.

    The streams use seeds ``seed ^ 1`` and ``seed ^ 2`` and are each scaled
    to ``ROAD_RMS_DBFS``.
    """
    n = _n_samples(duration_s, sample_rate)
    b, a = road_filter(cutoff_hz, sample_rate)
    target = 10 ** (ROAD_RMS_DBFS / 20)
    out = []
    for offset in (1, 2):
        white = np.random.default_rng(seed ^ offset).standard_normal(n)
        shaped = lfilter(b, a, white)
        shaped *= target / np.sqrt(np.mean(shaped**2))
        out.append(AudioBuffer(shaped, sample_rate))
    return out[0], out[1]


@dataclass(frozen=True, eq=False)
class CarNoise:
    engine: AudioBuffer
    road_left: AudioBuffer
    road_right: AudioBuffer

    def __post_init__(self):
        parts = (self.engine, self.road_left, self.road_right)
        if len({(p.length, p.sample_rate, p.channels) for p in parts}) != 1:
            raise SceneError("car noise components must be mono with equal length and rate")


def synth_car_noise(params: CarSceneParams, duration_s: float, sample_rate: int) -> CarNoise:
    engine = synth_engine_tone(params, duration_s, sample_rate)
    left, right = synth_road_noise(duration_s, sample_rate, params.road_cutoff_hz, params.seed)
    return CarNoise(engine, left, right)


def spatialize(source: np.ndarray, ir_pair: np.ndarray, length: int) -> np.ndarray:
    """Render a mono source through an HRIR pair, trimmed to ``length``."""
    return np.stack([convolve(source, ir_pair[ch])[:length] for ch in range(2)]).astype(np.float64)


def _clamp_azimuth(azimuth: float) -> float:
    clamped = min(max(azimuth, -90.0), 90.0)
    if clamped != azimuth:
        logger.debug("speaker azimuth %.1f clamped to %.1f", azimuth, clamped)
    return clamped


@dataclass(frozen=True, eq=False)
class SceneComponents:
    """Music and scaled noise at the microphones, both ``(2, n)``."""

    music: np.ndarray
    noise: np.ndarray
    sample_rate: int

    @property
    def mixture(self) -> AudioBuffer:
        return AudioBuffer(self.music + self.noise, self.sample_rate)


def render_components(
    music: AudioBuffer, params: CarSceneParams, anechoic: HrirSet, car: HrirSet
) -> SceneComponents:
    """Spatialize music and noise separately and scale noise to the target SNR."""
    if music.channels != 2:
        raise SceneError("scene music must be stereo")
    if anechoic.condition != "anechoic" or car.condition != "car":
        raise SceneError("expected an anechoic and a car HRIR set")
    if not music.sample_rate == anechoic.sample_rate == car.sample_rate:
        raise SceneError(
            f"sample rate mismatch: music {music.sample_rate}, HRIRs "
            f"{anechoic.sample_rate}/{car.sample_rate}; resample the music first"
        )
    if music.duration < 1:
        raise SceneError("scene music must last at least 1 s")
    n = music.length
    rate = music.sample_rate

    noise = synth_car_noise(params, n / rate, rate)
    noise_at_mics = (
        spatialize(noise.engine.samples[0], nearest_hrir(anechoic, 0.0), n)
        + spatialize(noise.road_left.samples[0], nearest_hrir(anechoic, -90.0), n)
        + spatialize(noise.road_right.samples[0], nearest_hrir(anechoic, 90.0), n)
    )

    spread = params.speaker_azimuth_deg
    head = params.head_azimuth_deg
    music_at_mics = spatialize(
        music.samples[0], nearest_hrir(car, _clamp_azimuth(head - spread)), n
    ) + spatialize(music.samples[1], nearest_hrir(car, _clamp_azimuth(head + spread)), n)

    music_rms = float(np.sqrt(np.mean(music_at_mics**2)))
    if music_rms == 0:
        raise SceneError("music is silent at the microphones; SNR is undefined")
    noise_rms = float(np.sqrt(np.mean(noise_at_mics**2)))
    if noise_rms == 0:
        raise SceneError("car noise is silent at the microphones")
    gain = music_rms / (noise_rms * 10 ** (params.snr_db / 20))
    return SceneComponents(music_at_mics, noise_at_mics * gain, rate)


def render_scene(
    music: AudioBuffer, params: CarSceneParams, anechoic: HrirSet, car: HrirSet
) -> AudioBuffer:
    """Binaural mixture of car music and car noise at the hearing-aid microphones.

    Engine noise comes from 0 deg and road noise from -90/+90 deg through the
    anechoic set; the two music channels come from the car set at
    ``head_azimuth -/+ speaker_azimuth``. Noise is scaled so the
    microphone-level SNR equals ``params.snr_db``.
    """
    return render_components(music, params, anechoic, car).mixture


def achieved_snr_db(components: SceneComponents) -> float:
    return 20 * math.log10(
        rms(AudioBuffer(components.music, components.sample_rate))
        / rms(AudioBuffer(components.noise, components.sample_rate))
    )
