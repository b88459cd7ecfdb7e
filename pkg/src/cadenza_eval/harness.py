"""Batch evaluation: manifests, the two task pipelines, aggregation, reports."""
from __future__ import annotations

import csv
import hashlib
import io
import json
import logging
import math
import os
import warnings
from collections import Counter, defaultdict
from concurrent.futures import ThreadPoolExecutor
from dataclasses import asdict, dataclass, field
from pathlib import Path
from typing import Callable

import numpy as np

from .car_scene import CarSceneParams, HrirSet, render_scene
from .enhancement import (
    STEM_NAMES,
    SeparationBackend,
    StemSet,
    apply_task2_baseline,
    segment_offset,
)
from .listener import Listener, ListenerError, load_listeners
from .prescription import apply_prescription
from .quality_metric import DEFAULT_CONFIG, MetricConfig, score_stems, score_stereo
from .signal_io import AudioBuffer, read_wav, resample

logger = logging.getLogger(__name__)

SPLITS = ("train", "dev", "eval")
DATA_ROOT_ENV = "CADENZA_DATA_ROOT"

TASK1_SPLIT_COUNTS = {"train": 86, "dev": 14, "eval": 50}
TASK2_EVAL_TRACKS = 70
TASK2_EVAL_PER_GENRE = 10

EARS = ("L", "R")
STEM_EAR_FACETS = tuple(f"{stem}-{ear}" for stem in STEM_NAMES for ear in EARS)
GROUP_BYS = ("all", "stem_ear", "genre")
REPORT_FORMATS = ("csv", "json")
REPORT_FIELDS = ("system", "group", "mean", "std", "count")
RECORD_FIELDS = ("task", "track_id", "listener_id", "facet", "score")


class ManifestError(ValueError):
    """Structural problem in a manifest."""


class ChallengeCountWarning(UserWarning):
    """A challenge-flagged manifest does not match the published set sizes."""


@dataclass(frozen=True)
class Track:
    id: str
    split: str
    genre: str
    path: Path
    stem_paths: dict[str, Path] | None = None
    explicit_lyrics: bool = False


@dataclass(frozen=True)
class Scene:
    track_id: str
    listener_id: str
    speed_kmh: float
    gear: int
    snr_db: float
    seed: int
    head_azimuth_deg: float = 0.0


@dataclass(frozen=True)
class Manifest:
    task: int
    tracks: tuple[Track, ...]
    listeners_path: Path
    listeners: dict[str, Listener] = field(repr=False)
    scenes: tuple[Scene, ...] = ()
    expect_challenge_counts: bool = False

    def track(self, track_id: str) -> Track:
        for track in self.tracks:
            if track.id == track_id:
                return track
        raise KeyError(track_id)

    def panel_tracks(self, split: str = "eval") -> list[Track]:
        """Tracks eligible for listening-panel clips: no explicit lyrics."""
        return [t for t in self.tracks if t.split == split and not t.explicit_lyrics]


@dataclass(frozen=True)
class ScoreRecord:
    task: int
    track_id: str
    listener_id: str
    facet: str
    score: float

    def __post_init__(self):
        if self.task == 1 and self.facet not in STEM_EAR_FACETS:
            raise ValueError(f"task 1 facet must be one of {STEM_EAR_FACETS}, got {self.facet!r}")
        if self.task not in (1, 2):
            raise ValueError(f"task must be 1 or 2, got {self.task}")


@dataclass(frozen=True)
class ReportRow:
    system: str
    group: str
    mean: float
    std: float
    count: int


@dataclass
class RunResult:
    """Emitted records plus ``(track_id, listener_id, reason)`` for skipped units."""

    records: list[ScoreRecord]
    skipped: list[tuple[str, str, str]] = field(default_factory=list)
    records_per_unit: int = 1

    @property
    def attempted(self) -> int:
        """Records that would have been emitted had nothing been skipped."""
        return len(self.records) + self.records_per_unit * len(self.skipped)


@dataclass(frozen=True)
class RunConfig:
    seed: int = 0
    jobs: int = 1
    split: str = "eval"
    segment_s: float = 30.0
    metric: MetricConfig = DEFAULT_CONFIG


def derive_seed(*parts) -> int:
    """Unsigned 64-bit seed from a hash of ``parts``."""
    digest = hashlib.blake2b("\x1f".join(str(p) for p in parts).encode(), digest_size=8)
    return int.from_bytes(digest.digest(), "little")


# -- manifests ---------------------------------------------------------------


def _resolve(base: Path, value) -> Path:
    path = Path(value)
    if path.is_absolute():
        return path
    root = os.environ.get(DATA_ROOT_ENV)
    return (Path(root) if root else base) / path


def _require(entry: dict, key: str, where: str):
    if key not in entry:
        raise ManifestError(f"{where}: missing field {key!r}")
    return entry[key]


def _parse_track(entry, base: Path, index: int) -> Track:
    if not isinstance(entry, dict):
        raise ManifestError(f"tracks[{index}] must be an object")
    where = f"tracks[{index}]"
    split = _require(entry, "split", where)
    if split not in SPLITS:
        raise ManifestError(f"{where}: split must be one of {SPLITS}, got {split!r}")
    stems = entry.get("stem_paths")
    if stems is not None:
        missing = [name for name in STEM_NAMES if name not in stems]
        if missing:
            raise ManifestError(f"{where}: stem_paths lacks {missing}")
        stems = {name: _resolve(base, stems[name]) for name in STEM_NAMES}
    return Track(
        id=str(_require(entry, "id", where)),
        split=split,
        genre=str(entry.get("genre", "")),
        path=_resolve(base, _require(entry, "path", where)),
        stem_paths=stems,
        explicit_lyrics=bool(entry.get("explicit_lyrics", False)),
    )


def _parse_scene(entry, index: int) -> Scene:
    if not isinstance(entry, dict):
        raise ManifestError(f"scenes[{index}] must be an object")
    where = f"scenes[{index}]"
    try:
        return Scene(
            track_id=str(_require(entry, "track_id", where)),
            listener_id=str(_require(entry, "listener_id", where)),
            speed_kmh=float(_require(entry, "speed_kmh", where)),
            gear=int(_require(entry, "gear", where)),
            snr_db=float(_require(entry, "snr_db", where)),
            seed=int(_require(entry, "seed", where)),
            head_azimuth_deg=float(entry.get("head_azimuth_deg", 0.0)),
        )
    except (TypeError, ValueError) as err:
        if isinstance(err, ManifestError):
            raise
        raise ManifestError(f"{where}: {err}") from None


def _check_challenge_counts(task: int, tracks: tuple[Track, ...]) -> None:
    if task == 1:
        counts = Counter(t.split for t in tracks)
        actual = {split: counts.get(split, 0) for split in SPLITS}
        if actual != TASK1_SPLIT_COUNTS:
            warnings.warn(
                f"task 1 split sizes {actual} differ from the challenge's "
                f"{TASK1_SPLIT_COUNTS}",
                ChallengeCountWarning,
                stacklevel=3,
            )
        return
    eval_tracks = [t for t in tracks if t.split == "eval"]
    per_genre = Counter(t.genre for t in eval_tracks)
    uneven = {g: n for g, n in per_genre.items() if n != TASK2_EVAL_PER_GENRE}
    if len(eval_tracks) != TASK2_EVAL_TRACKS or uneven:
        warnings.warn(
            f"task 2 eval set has {len(eval_tracks)} tracks {dict(sorted(per_genre.items()))}; "
            f"the challenge used {TASK2_EVAL_TRACKS}, 10 samples per genre",
            ChallengeCountWarning,
            stacklevel=3,
        )


def validate_manifest(path, listeners_path=None) -> Manifest:
    """Parse and check a manifest.

    Relative paths resolve against ``$CADENZA_DATA_ROOT`` when it is set,
    otherwise against the manifest's directory. When the document sets
    ``expect_challenge_counts`` the split sizes are compared with the
    challenge's and a :class:`ChallengeCountWarning` is issued on mismatch.

    Raises:
        ManifestError: malformed document, duplicate ids, dangling scene
            references or Task 1 tracks without stems.
    """
    path = Path(path)
    try:
        doc = json.loads(path.read_text())
    except json.JSONDecodeError as err:
        raise ManifestError(f"{path}: not valid JSON ({err})") from None
    if not isinstance(doc, dict):
        raise ManifestError(f"{path}: top level must be an object")
    base = path.parent

    raw_tracks = doc.get("tracks")
    if not isinstance(raw_tracks, list) or not raw_tracks:
        raise ManifestError(f"{path}: 'tracks' must be a non-empty list")
    tracks = tuple(_parse_track(entry, base, i) for i, entry in enumerate(raw_tracks))
    dupes = [tid for tid, n in Counter(t.id for t in tracks).items() if n > 1]
    if dupes:
        raise ManifestError(f"{path}: duplicate track ids {sorted(dupes)}")

    raw_scenes = doc.get("scenes", [])
    if not isinstance(raw_scenes, list):
        raise ManifestError(f"{path}: 'scenes' must be a list")
    scenes = tuple(_parse_scene(entry, i) for i, entry in enumerate(raw_scenes))

    task = doc.get("task", 2 if scenes else 1)
    if task not in (1, 2):
        raise ManifestError(f"{path}: task must be 1 or 2, got {task!r}")
    if task == 1:
        bare = [t.id for t in tracks if t.stem_paths is None]
        if bare:
            raise ManifestError(f"{path}: task 1 tracks without stem_paths: {bare}")

    if listeners_path is None:
        listeners_path = _resolve(base, _require(doc, "listeners_path", str(path)))
    listeners_path = Path(listeners_path)
    try:
        listeners = load_listeners(listeners_path)
    except FileNotFoundError:
        raise ManifestError(f"listener file not found: {listeners_path}") from None
    except ListenerError as err:
        raise ManifestError(str(err)) from None

    track_ids = {t.id for t in tracks}
    for i, scene in enumerate(scenes):
        if scene.track_id not in track_ids:
            raise ManifestError(f"scenes[{i}] references unknown track {scene.track_id!r}")
        if scene.listener_id not in listeners:
            raise ManifestError(f"scenes[{i}] references unknown listener {scene.listener_id!r}")

    expect = bool(doc.get("expect_challenge_counts", False))
    if expect:
        _check_challenge_counts(task, tracks)
    return Manifest(task, tracks, listeners_path, listeners, scenes, expect)


# -- task pipelines ----------------------------------------------------------


def _load_stems(track: Track) -> StemSet:
    return StemSet.from_mapping({name: read_wav(track.stem_paths[name]) for name in STEM_NAMES})


def _segment(buffer: AudioBuffer, start: int, n: int) -> AudioBuffer:
    return buffer.with_samples(buffer.samples[:, start : start + n])


def _run_units(units, worker, jobs: int):
    """Run ``worker`` over ``units``; results come back in unit order."""
    if jobs <= 1 or len(units) <= 1:
        return [worker(u) for u in units]
    with ThreadPoolExecutor(max_workers=jobs) as pool:
        return list(pool.map(worker, units))


def run_task1(manifest: Manifest, backend: SeparationBackend, cfg: RunConfig = RunConfig()) -> RunResult:
    """Demix and score every (eval track, listener) pair.

    Each track gets one ``cfg.segment_s`` excerpt, seeded by the track id
    and shared by all listeners. The backend separates the excerpt and the
    eight stem/ear estimates are scored against the true stems. Backend
    failures are logged and the pair skipped.
    """
    tracks = sorted((t for t in manifest.tracks if t.split == cfg.split), key=lambda t: t.id)
    listener_ids = sorted(manifest.listeners)
    metric_rate = cfg.metric.internal_rate
    jobs = max(1, cfg.jobs)
    if backend.max_concurrency is not None:
        jobs = min(jobs, backend.max_concurrency)

    result = RunResult([], records_per_unit=len(STEM_EAR_FACETS))
    for track in tracks:
        if track.stem_paths is None:
            raise ManifestError(f"track {track.id!r} has no stems")
        mixture = read_wav(track.path)
        truth = _load_stems(track)
        if (truth.length, truth.sample_rate) != (mixture.length, mixture.sample_rate):
            raise ManifestError(f"track {track.id!r}: stems and mixture differ in length or rate")
        n = int(round(cfg.segment_s * mixture.sample_rate))
        start = segment_offset(mixture.length, n, derive_seed(cfg.seed, track.id))
        mix_seg = _segment(mixture, start, n)
        truth_seg = truth.map(lambda s: _segment(s, start, n))

        try:
            estimate = backend.separate(mix_seg, truth=truth_seg)
            if (estimate.length, estimate.sample_rate) != (n, mixture.sample_rate):
                raise ValueError("backend output does not match the mixture's length and rate")
        except Exception as err:  # noqa: BLE001 - any backend failure skips the track
            logger.warning("backend %s failed on %s: %s", backend.name, track.id, err)
            result.skipped.extend((track.id, lid, str(err)) for lid in listener_ids)
            continue

        # the metric works at its own rate; convert once per track
        truth_m = truth_seg.map(lambda s: resample(s, metric_rate))
        if estimate is truth_seg:
            est_m = truth_m
        else:
            est_m = estimate.map(lambda s: resample(s, metric_rate))

        def score_pair(listener_id, truth_m=truth_m, est_m=est_m, track=track):
            listener = manifest.listeners[listener_id]
            scores = score_stems(est_m, truth_m, listener, cfg.metric)
            return [
                ScoreRecord(1, track.id, listener_id, facet, value)
                for facet, value in zip(STEM_EAR_FACETS, scores)
            ]

        for records in _run_units(listener_ids, score_pair, jobs):
            result.records.extend(records)
    return result


Enhancer = Callable[[AudioBuffer, Listener], AudioBuffer]


def run_task2(
    manifest: Manifest,
    anechoic: HrirSet,
    car: HrirSet,
    enhancer: Enhancer = apply_task2_baseline,
    cfg: RunConfig = RunConfig(),
) -> RunResult:
    """Enhance, render, amplify and score every scene.

    Per scene: the enhancer processes the track for the listener, the car
    scene is rendered at the hearing-aid microphones, the listener's NAL-R
    prescription is applied, and both ears are scored against the clean
    track over its whole length. The record holds the mean of the two ears
    and the track's genre.
    """
    rate = car.sample_rate
    order = sorted(
        range(len(manifest.scenes)),
        key=lambda i: (manifest.scenes[i].track_id, manifest.scenes[i].listener_id, i),
    )
    cache: dict[str, AudioBuffer] = {}

    def load(track_id: str) -> AudioBuffer:
        if track_id not in cache:
            music = read_wav(manifest.track(track_id).path)
            if music.channels == 1:
                music = music.with_samples(np.repeat(music.samples, 2, axis=0))
            cache[track_id] = resample(music, rate)
        return cache[track_id]

    for scene in manifest.scenes:
        load(scene.track_id)

    def run_scene(index: int) -> ScoreRecord:
        scene = manifest.scenes[index]
        listener = manifest.listeners[scene.listener_id]
        track = manifest.track(scene.track_id)
        music = load(scene.track_id)
        params = CarSceneParams(
            speed_kmh=scene.speed_kmh,
            gear=scene.gear,
            snr_db=scene.snr_db,
            head_azimuth_deg=scene.head_azimuth_deg,
            seed=derive_seed(cfg.seed, scene.track_id, scene.listener_id, scene.seed),
        )
        enhanced = enhancer(music, listener)
        at_mics = render_scene(enhanced, params, anechoic, car)
        aided = apply_prescription(at_mics, listener)
        left, right = score_stereo(aided, music, listener, cfg.metric)
        return ScoreRecord(2, track.id, listener.id, track.genre, 0.5 * (left + right))

    return RunResult(_run_units(order, run_scene, max(1, cfg.jobs)))


# -- aggregation and reports -------------------------------------------------


def aggregate(records, group_by: str = "all", system: str = "baseline", ddof: int = 0) -> list[ReportRow]:
    """Mean and standard deviation of scores per group, groups sorted.

    ``group_by`` is ``all`` (one row), ``stem_ear`` or ``genre`` (one row
    per facet). ``ddof=0`` gives the population standard deviation.
    """
    records = list(records)
    if not records:
        raise ValueError("cannot aggregate an empty record list")
    if group_by not in GROUP_BYS:
        raise ValueError(f"group_by must be one of {GROUP_BYS}, got {group_by!r}")
    tasks = {r.task for r in records}
    if group_by == "stem_ear" and tasks != {1}:
        raise ValueError("stem_ear grouping needs task 1 records")
    if group_by == "genre" and tasks != {2}:
        raise ValueError("genre grouping needs task 2 records")

    groups: dict[str, list[float]] = defaultdict(list)
    for record in records:
        groups["all" if group_by == "all" else record.facet].append(record.score)
    rows = []
    for name in sorted(groups):
        values = np.asarray(groups[name], dtype=np.float64)
        if len(values) <= ddof:
            raise ValueError(f"group {name!r} has too few records for ddof={ddof}")
        rows.append(
            ReportRow(system, name, float(np.mean(values)), float(np.std(values, ddof=ddof)), len(values))
        )
    return rows


def format_report(rows, fmt: str = "csv") -> str:
    """Render report rows; means and stds get four decimals."""
    rows = list(rows)
    if not rows:
        raise ValueError("cannot write an empty report")
    if fmt == "csv":
        buf = io.StringIO()
        writer = csv.writer(buf, lineterminator="\n")
        writer.writerow(REPORT_FIELDS)
        for row in rows:
            writer.writerow([row.system, row.group, f"{row.mean:.4f}", f"{row.std:.4f}", row.count])
        return buf.getvalue()
    if fmt == "json":
        doc = [
            {
                "system": row.system,
                "group": row.group,
                "mean": float(f"{row.mean:.4f}"),
                "std": float(f"{row.std:.4f}"),
                "count": row.count,
            }
            for row in rows
        ]
        return json.dumps(doc, indent=2) + "\n"
    raise ValueError(f"format must be one of {REPORT_FORMATS}, got {fmt!r}")


def write_report(rows, path, fmt: str = "csv") -> None:
    text = format_report(rows, fmt)
    Path(path).write_text(text)


def write_records(records, path) -> None:
    with open(path, "w", newline="") as fh:
        writer = csv.writer(fh, lineterminator="\n")
        writer.writerow(RECORD_FIELDS)
        for r in records:
            writer.writerow([r.task, r.track_id, r.listener_id, r.facet, repr(r.score)])


def read_records(path) -> list[ScoreRecord]:
    with open(path, newline="") as fh:
        reader = csv.DictReader(fh)
        if tuple(reader.fieldnames or ()) != RECORD_FIELDS:
            raise ValueError(f"{path}: expected columns {RECORD_FIELDS}")
        out = []
        for row in reader:
            value = float(row["score"])
            if not math.isfinite(value):
                raise ValueError(f"{path}: non-finite score")
            out.append(ScoreRecord(int(row["task"]), row["track_id"], row["listener_id"], row["facet"], value))
    return out


def records_as_dicts(records) -> list[dict]:
    return [asdict(r) for r in records]
