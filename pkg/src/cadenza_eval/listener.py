"""Listener audiograms, validation, dev-set filtering and severity grading."""
from __future__ import annotations

import enum
import json
import math
from dataclasses import dataclass
from pathlib import Path

import numpy as np

AUDIOGRAM_FREQUENCIES = (250, 500, 1000, 2000, 3000, 4000, 6000, 8000)
MAX_THRESHOLD_DB = 80.0
MIN_THRESHOLD_DB = -10.0

# Pure-tone average frequencies.
PTA_FREQUENCIES = (500, 1000, 2000, 4000)

DEV_RANGE_DB = (20.0, 75.0)


class ListenerError(ValueError):
    """Raised for malformed listener files or invalid audiograms."""


@dataclass(frozen=True)
class Audiogram:
    """Hearing thresholds in dB HL at :data:`AUDIOGRAM_FREQUENCIES`."""

    thresholds: tuple[float, ...]

    def __post_init__(self):
        values = tuple(float(v) for v in self.thresholds)
        if len(values) != len(AUDIOGRAM_FREQUENCIES):
            raise ListenerError(
                f"audiogram needs {len(AUDIOGRAM_FREQUENCIES)} thresholds, got {len(values)}"
            )
        for freq, value in zip(AUDIOGRAM_FREQUENCIES, values):
            if not math.isfinite(value):
                raise ListenerError(f"threshold at {freq} Hz is not finite")
            if value > MAX_THRESHOLD_DB:
                raise ListenerError(
                    f"threshold {value} dB HL at {freq} Hz exceeds the "
                    f"{MAX_THRESHOLD_DB:g} dB HL cap"
                )
            if value < MIN_THRESHOLD_DB:
                raise ListenerError(
                    f"threshold {value} dB HL at {freq} Hz is below the "
                    f"{MIN_THRESHOLD_DB:g} dB HL audiometric floor"
                )
        object.__setattr__(self, "thresholds", values)

    @classmethod
    def flat(cls, level: float) -> Audiogram:
        return cls((level,) * len(AUDIOGRAM_FREQUENCIES))

    def at(self, frequency: int) -> float:
        return self.thresholds[AUDIOGRAM_FREQUENCIES.index(frequency)]

    def as_array(self) -> np.ndarray:
        return np.asarray(self.thresholds, dtype=float)


@dataclass(frozen=True)
class Listener:
    id: str
    left: Audiogram
    right: Audiogram

    def ear(self, index: int) -> Audiogram:
        """Audiogram for channel ``index`` (0 = left, 1 = right)."""
        return (self.left, self.right)[index]


@enum.unique
class SeverityGrade(enum.IntEnum):
    MILD = 0
    MODERATE = 1
    MODERATELY_SEVERE = 2
    SEVERE = 3

    @property
    def label(self) -> str:
        return self.name.lower()


# Lower bound (dB HL, inclusive) of each grade above mild.
SEVERITY_BOUNDS = (
    (41.0, SeverityGrade.MODERATE),
    (56.0, SeverityGrade.MODERATELY_SEVERE),
    (71.0, SeverityGrade.SEVERE),
)


def four_freq_average(audiogram: Audiogram) -> float:
    """Mean threshold over 500, 1000, 2000 and 4000 Hz."""
    return sum(audiogram.at(f) for f in PTA_FREQUENCIES) / len(PTA_FREQUENCIES)


def better_ear_average(listener: Listener) -> float:
    return min(four_freq_average(listener.left), four_freq_average(listener.right))


def dev_filter(listener: Listener) -> bool:
    """True when the better-ear average lies in the dev-set range (inclusive)."""
    low, high = DEV_RANGE_DB
    return low <= better_ear_average(listener) <= high


def severity(listener: Listener) -> SeverityGrade:
    """Grade the better-ear average; anything under 41 dB HL counts as mild."""
    average = better_ear_average(listener)
    grade = SeverityGrade.MILD
    for lower, candidate in SEVERITY_BOUNDS:
        if average >= lower:
            grade = candidate
    return grade


def listener_from_dict(listener_id: str, entry: dict) -> Listener:
    if not isinstance(entry, dict):
        raise ListenerError(f"listener {listener_id!r}: entry must be an object")
    try:
        cfs = entry["audiogram_cfs"]
        left = entry["audiogram_levels_l"]
        right = entry["audiogram_levels_r"]
    except KeyError as err:
        raise ListenerError(f"listener {listener_id!r}: missing field {err}") from None
    if [float(f) for f in cfs] != [float(f) for f in AUDIOGRAM_FREQUENCIES]:
        raise ListenerError(
            f"listener {listener_id!r}: audiogram_cfs must be {list(AUDIOGRAM_FREQUENCIES)}"
        )
    try:
        return Listener(str(listener_id), Audiogram(tuple(left)), Audiogram(tuple(right)))
    except (ListenerError, TypeError) as err:
        raise ListenerError(f"listener {listener_id!r}: {err}") from None


def listener_to_dict(listener: Listener) -> dict:
    return {
        "audiogram_cfs": list(AUDIOGRAM_FREQUENCIES),
        "audiogram_levels_l": list(listener.left.thresholds),
        "audiogram_levels_r": list(listener.right.thresholds),
    }


def _reject_duplicates(pairs):
    seen = {}
    for key, value in pairs:
        if key in seen:
            raise ListenerError(f"duplicate id {key!r}")
        seen[key] = value
    return seen


def load_listeners(path) -> dict[str, Listener]:
    """Load and validate a listener JSON file.

    The document maps listener id to an object with ``audiogram_cfs``,
    ``audiogram_levels_l`` and ``audiogram_levels_r``.

    Raises:
        ListenerError: malformed JSON, bad threshold counts or values,
            or duplicate ids.
    """
    text = Path(path).read_text()
    try:
        raw = json.loads(text, object_pairs_hook=_reject_duplicates)
    except json.JSONDecodeError as err:
        raise ListenerError(f"{path}: not valid JSON ({err})") from None
    if not isinstance(raw, dict):
        raise ListenerError(f"{path}: top level must be an object of listeners")
    return {lid: listener_from_dict(lid, entry) for lid, entry in raw.items()}


def save_listeners(listeners, path) -> None:
    doc = {listener.id: listener_to_dict(listener) for listener in listeners}
    Path(path).write_text(json.dumps(doc, indent=2))
