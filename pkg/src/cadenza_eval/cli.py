"""Command line entry point: ``cadenza-eval``.

Exit status is 0 on success, 1 for invalid input (manifests, listener
files, arguments) and 2 for failures while running.
"""
from __future__ import annotations

import argparse
import logging
import sys
import warnings
from pathlib import Path

from . import harness
from .car_scene import load_hrir_set
from .enhancement import BACKENDS
from .listener import ListenerError

logger = logging.getLogger("cadenza_eval")

EXIT_OK = 0
EXIT_INVALID = 1
EXIT_RUNTIME = 2


class InvalidInput(ValueError):
    """User-supplied data that cannot be processed; maps to exit status 1."""


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        self.print_usage(sys.stderr)
        self.exit(EXIT_INVALID, f"{self.prog}: error: {message}\n")


def build_parser() -> argparse.ArgumentParser:
    parser = _Parser(prog="cadenza-eval", description=__doc__.splitlines()[0])
    parser.add_argument("-v", "--verbose", action="store_true", help="debug logging")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)

    p = sub.add_parser("validate-manifest", help="check a manifest and its listener file")
    p.add_argument("manifest", type=Path)
    p.add_argument("--listeners", type=Path)

    p = sub.add_parser("run", help="run the task 1 or task 2 evaluation")
    p.add_argument("task", choices=["task1", "task2"])
    p.add_argument("--manifest", type=Path, required=True)
    p.add_argument("--listeners", type=Path)
    p.add_argument("--hrir-dir", type=Path, help="directory of anechoic_az*/car_az* WAVs (task 2)")
    p.add_argument("--out", type=Path, required=True, help="records CSV to write")
    p.add_argument("--seed", type=int, default=0)
    p.add_argument("--jobs", type=int, default=1)
    p.add_argument("--backend", choices=sorted(BACKENDS), default="oracle")
    p.add_argument("--segment-seconds", type=float, default=30.0)

    p = sub.add_parser("report", help="aggregate a records CSV")
    p.add_argument("--records", type=Path, required=True)
    p.add_argument("--group-by", choices=harness.GROUP_BYS, default="all")
    p.add_argument("--format", choices=harness.REPORT_FORMATS, default="csv")
    p.add_argument("--system", default="baseline")
    p.add_argument("--out", type=Path, help="write here instead of stdout")

    p = sub.add_parser("make-demo", help="write synthetic demo data")
    p.add_argument("directory", type=Path)
    p.add_argument("--tracks", type=int, default=3)
    return parser


def _cmd_validate(args) -> int:
    with warnings.catch_warnings(record=True) as caught:
        warnings.simplefilter("always", harness.ChallengeCountWarning)
        manifest = harness.validate_manifest(args.manifest, args.listeners)
    for w in caught:
        print(f"warning: {w.message}", file=sys.stderr)
    print(
        f"ok: task {manifest.task}, {len(manifest.tracks)} tracks, "
        f"{len(manifest.listeners)} listeners, {len(manifest.scenes)} scenes"
    )
    return EXIT_OK


def _cmd_run(args) -> int:
    manifest = harness.validate_manifest(args.manifest, args.listeners)
    cfg = harness.RunConfig(seed=args.seed, jobs=args.jobs, segment_s=args.segment_seconds)
    if args.task == "task1":
        result = harness.run_task1(manifest, BACKENDS[args.backend](), cfg)
    else:
        if args.hrir_dir is None:
            raise harness.ManifestError("task2 needs --hrir-dir")
        anechoic = load_hrir_set(args.hrir_dir, "anechoic")
        car = load_hrir_set(args.hrir_dir, "car")
        result = harness.run_task2(manifest, anechoic, car, cfg=cfg)
    harness.write_records(result.records, args.out)
    logger.info(
        "%d records written to %s (%d attempted, %d units skipped)",
        len(result.records), args.out, result.attempted, len(result.skipped),
    )
    return EXIT_OK


def _cmd_report(args) -> int:
    try:
        records = harness.read_records(args.records)
        rows = harness.aggregate(records, args.group_by, system=args.system)
    except ValueError as err:
        raise InvalidInput(f"{args.records}: {err}") from None
    text = harness.format_report(rows, args.format)
    if args.out:
        args.out.write_text(text)
    else:
        sys.stdout.write(text)
    return EXIT_OK


def _cmd_make_demo(args) -> int:
    from .synthetic import make_demo

    paths = make_demo(args.directory, n_tracks=args.tracks)
    for name, path in paths.items():
        print(f"{name}: {path}")
    return EXIT_OK


COMMANDS = {
    "validate-manifest": _cmd_validate,
    "run": _cmd_run,
    "report": _cmd_report,
    "make-demo": _cmd_make_demo,
}


def main(argv=None) -> int:
    args = build_parser().parse_args(argv)
    logging.basicConfig(
        level=logging.DEBUG if args.verbose else logging.INFO,
        format="%(levelname)s %(name)s: %(message)s",
    )
    try:
        return COMMANDS[args.command](args)
    except (InvalidInput, harness.ManifestError, ListenerError, FileNotFoundError) as err:
        print(f"error: {err}", file=sys.stderr)
        return EXIT_INVALID
    except Exception as err:  # noqa: BLE001
        logger.exception("run failed: %s", err)
        return EXIT_RUNTIME


if __name__ == "__main__":
    sys.exit(main())
