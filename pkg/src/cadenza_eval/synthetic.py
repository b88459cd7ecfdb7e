"""Deterministic synthetic material: VDBO stems, listeners, HRIR sets.

Used by the test suite and by ``cadenza-eval make-demo`` so that the whole
pipeline can run without the challenge datasets.
"""
from __future__ import annotations

import json
from pathlib import Path

import numpy as np

from .car_scene import GRID_DEG10, HrirSet, save_hrir_set
from .enhancement import STEM_NAMES, StemSet
from .listener import Audiogram, Listener, save_listeners
from .signal_io import AudioBuffer, write_wav

# Speed of sound and a nominal head radius for the toy HRIRs.
_SOUND_SPEED = 343.0
_HEAD_RADIUS = 0.0875


def _notes(rng, n, rate, low_hz, high_hz, count, harmonics, decay):
    t = np.arange(n) / rate
    out = np.zeros(n)
    for _ in range(count):
        f0 = low_hz * (high_hz / low_hz) ** rng.uniform()
        start = int(rng.uniform(0, n - 0.3 * rate))
        length = int(rng.uniform(0.15, 1.2) * rate)
        seg = slice(start, min(n, start + length))
        tt = t[seg] - t[start]
        env = np.exp(-decay * tt) * (1 - np.exp(-tt * 200))
        for h in range(1, harmonics + 1):
            if h * f0 < rate / 2:
                out[seg] += env * np.sin(2 * np.pi * h * f0 * tt + rng.uniform(0, 2 * np.pi)) / h
    return out


def _drums(rng, n, rate, count):
    out = np.zeros(n)
    for _ in range(count):
        start = int(rng.uniform(0, n - 0.2 * rate))
        length = int(0.15 * rate)
        seg = slice(start, min(n, start + length))
        tt = np.arange(seg.stop - seg.start) / rate
        out[seg] += rng.standard_normal(len(tt)) * np.exp(-tt * rng.uniform(15, 40))
    return out


def synth_stems(seed: int, duration_s: float = 32.0, sample_rate: int = 44100) -> StemSet:
    """Stereo VDBO stems built from gated harmonic notes and noise bursts."""
    rng = np.random.default_rng(seed)
    n = int(round(duration_s * sample_rate))
    per_second = duration_s
    mono = {
        "vocals": _notes(rng, n, sample_rate, 180, 700, int(2 * per_second), 8, 1.5),
        "drums": _drums(rng, n, sample_rate, int(4 * per_second)),
        "bass": _notes(rng, n, sample_rate, 45, 160, int(2 * per_second), 5, 2.0),
        "other": _notes(rng, n, sample_rate, 250, 2000, int(3 * per_second), 6, 3.0),
    }
    levels_db = {"vocals": -24.0, "drums": -28.0, "bass": -26.0, "other": -28.0}
    stems = {}
    for name in STEM_NAMES:
        x = mono[name]
        x *= 10 ** (levels_db[name] / 20) / np.sqrt(np.mean(x**2))
        pan = rng.uniform(0.35, 0.65)
        stems[name] = AudioBuffer(np.stack([x * np.sqrt(1 - pan), x * np.sqrt(pan)]), sample_rate)
    return StemSet.from_mapping(stems)


SAMPLE_LISTENERS = (
    Listener("L0001", Audiogram((10, 10, 15, 20, 25, 30, 40, 45)), Audiogram((10, 15, 15, 25, 30, 35, 45, 50))),
    Listener("L0002", Audiogram.flat(40), Audiogram.flat(40)),
    Listener("L0003", Audiogram((30, 35, 45, 55, 60, 65, 70, 75)), Audiogram((25, 30, 40, 50, 60, 70, 75, 80))),
    Listener("L0004", Audiogram.flat(0), Audiogram.flat(0)),
)


def random_listener(rng, listener_id: str) -> Listener:
    """A sloping loss with random severity, capped at 80 dB HL."""
    def ear():
        base = rng.uniform(0, 50)
        slope = rng.uniform(0, 12)
        values = base + slope * np.arange(8) + rng.uniform(-5, 5, 8)
        return Audiogram(tuple(np.clip(np.round(values), -10, 80)))

    return Listener(listener_id, ear(), ear())


def toy_hrir_set(condition: str, sample_rate: int, length: int = 64) -> HrirSet:
    """Spherical-head style HRIRs: interaural delay and a level difference.

    Car responses get a short decaying reflection tail.
    """
    entries = {}
    for key in GRID_DEG10:
        theta = np.deg2rad(key / 10)
        itd = _HEAD_RADIUS / _SOUND_SPEED * (theta + np.sin(theta))
        ild_db = 6.0 * np.sin(theta)
        ir = np.zeros((2, length))
        base = 4
        for ch, sign in ((0, -1), (1, 1)):
            delay = base + max(0.0, -sign * itd) * sample_rate
            i = int(np.floor(delay))
            frac = delay - i
            gain = 10 ** (sign * ild_db / 40)
            ir[ch, i] += gain * (1 - frac)
            ir[ch, i + 1] += gain * frac
        if condition == "car":
            tail = np.exp(-np.arange(length - 12) / 6.0) * 0.15
            ir[:, 12:] += tail * np.array([[1.0], [0.8]])
        entries[key] = ir
    return HrirSet(condition, entries, sample_rate)


def write_stems(stems: StemSet, directory: Path, track_id: str) -> dict[str, str]:
    paths = {}
    for name, stem in stems.items():
        rel = f"{track_id}_{name}.wav"
        write_wav(stem, directory / rel)
        paths[name] = rel
    return paths


def make_demo(
    directory,
    n_tracks: int = 3,
    duration_s: float = 32.0,
    sample_rate: int = 44100,
    genres: tuple[str, ...] = ("Rock", "Pop", "Classical"),
    snr_db: float = 5.0,
    clip_s: float = 30.0,
) -> dict[str, Path]:
    """Write a small Task 1 and Task 2 setup under ``directory``.

    Returns the paths of the two manifests, the listener file and the HRIR
    directory.
    """
    directory = Path(directory)
    audio = directory / "audio"
    audio.mkdir(parents=True, exist_ok=True)
    listeners = SAMPLE_LISTENERS[:3]
    save_listeners(listeners, directory / "listeners.json")

    task1_tracks, task2_tracks, scenes = [], [], []
    for i in range(n_tracks):
        track_id = f"track{i:02d}"
        stems = synth_stems(1000 + i, duration_s, sample_rate)
        stem_paths = write_stems(stems, audio, track_id)
        mix_rel = f"{track_id}_mixture.wav"
        write_wav(stems.total(), audio / mix_rel)
        task1_tracks.append({
            "id": track_id, "split": "eval", "genre": genres[i % len(genres)],
            "path": f"audio/{mix_rel}",
            "stem_paths": {k: f"audio/{v}" for k, v in stem_paths.items()},
            "explicit_lyrics": False,
        })
        mixture = stems.total()
        clip = mixture.with_samples(mixture.samples[:, : int(round(clip_s * sample_rate))])
        clip_rel = f"{track_id}_clip.wav"
        write_wav(clip, audio / clip_rel)
        task2_tracks.append({
            "id": track_id, "split": "eval", "genre": genres[i % len(genres)],
            "path": f"audio/{clip_rel}", "explicit_lyrics": False,
        })
        for j, listener in enumerate(listeners):
            scenes.append({
                "track_id": track_id, "listener_id": listener.id,
                "speed_kmh": 50.0 + 20 * j, "gear": 3 + j, "snr_db": snr_db,
                "seed": 100 * i + j,
            })

    task1 = {"task": 1, "listeners_path": "listeners.json", "tracks": task1_tracks, "scenes": []}
    task2 = {"task": 2, "listeners_path": "listeners.json", "tracks": task2_tracks, "scenes": scenes}
    (directory / "task1_manifest.json").write_text(json.dumps(task1, indent=2))
    (directory / "task2_manifest.json").write_text(json.dumps(task2, indent=2))

    hrir_dir = directory / "hrir"
    for condition in ("anechoic", "car"):
        save_hrir_set(toy_hrir_set(condition, sample_rate), hrir_dir)
    return {
        "task1": directory / "task1_manifest.json",
        "task2": directory / "task2_manifest.json",
        "listeners": directory / "listeners.json",
        "hrir_dir": hrir_dir,
    }
