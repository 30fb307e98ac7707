"""Command line entry point: run, compare, check and replay."""
from __future__ import annotations

import argparse
import logging
import sys
from pathlib import Path

from .experiment import ConfigError, ExperimentManifest, compare_laws, emit_csv, format_summary, read_csv, run_experiment

log = logging.getLogger("bayesilc")

EXIT_OK = 0
EXIT_CONFIG = 1
EXIT_CHECK_FAILED = 2


def _parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="bayesilc", description="Recursive, adaptive and cautious ILC experiments.")
    sub = p.add_subparsers(dest="verb", required=True)

    def common(sp, manifest_required=True):
        sp.add_argument("--manifest", required=manifest_required, help="INI experiment manifest")
        sp.add_argument("--seed", type=int, help="override run.seed")
        sp.add_argument("--reps", type=int, help="override run.reps")
        sp.add_argument("--out", help="output directory (overrides run.out_dir)")
        sp.add_argument("--workers", type=int, default=1, help="repetitions run in parallel")

    common(sub.add_parser("run", help="run one update law and write run.csv"))
    common(sub.add_parser("compare", help="run every law in law.laws on paired seeds"))
    chk = sub.add_parser("check", help="run the acceptance checks")
    chk.add_argument("--only", nargs="*", type=int, help="criterion numbers to run")
    chk.add_argument("--workers", type=int, default=1)
    rep = sub.add_parser("replay", help="re-emit a stored run log")
    rep.add_argument("log", help="CSV written by `run`")
    rep.add_argument("--out", help="destination CSV (default: stdout)")
    p.add_argument("-v", "--verbose", action="store_true")
    return p


def _load(args) -> ExperimentManifest:
    manifest = ExperimentManifest.load(args.manifest)
    changes = {}
    if args.seed is not None:
        changes["seed"] = args.seed
    if args.reps is not None:
        changes["reps"] = args.reps
    if args.out is not None:
        changes["out_dir"] = args.out
    if args.workers is not None and args.workers < 1:
        raise ConfigError("--workers must be >= 1")
    return manifest.replace(**changes) if changes else manifest


def _cmd_run(args) -> int:
    manifest = _load(args)
    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    result = run_experiment(manifest, workers=args.workers)
    emit_csv(result, out / "run.csv")
    manifest.save(out / "manifest.ini")
    n_div = len({r.rep for r in result.rows if r.diverged})
    log.info("wrote %d rows to %s (%d diverged reps)", len(result.rows), out / "run.csv", n_div)
    return EXIT_OK


def _cmd_compare(args) -> int:
    manifest = _load(args)
    out = Path(manifest.out_dir)
    out.mkdir(parents=True, exist_ok=True)
    summary = compare_laws(manifest, workers=args.workers)
    for law, s in summary.items():
        emit_csv(s.logs, out / f"run_{law}.csv")
    text = format_summary(summary)
    (out / "summary.csv").write_text(text, encoding="utf-8")
    manifest.save(out / "manifest.ini")
    sys.stdout.write(text)
    return EXIT_OK


def _cmd_check(args) -> int:
    from .acceptance import run_all

    results = run_all(args.only, workers=args.workers)
    for r in results:
        print(r.line())
    return EXIT_OK if all(r.passed for r in results) else EXIT_CHECK_FAILED


def _cmd_replay(args) -> int:
    result = read_csv(args.log)
    if args.out:
        emit_csv(result, args.out)
    else:
        emit_csv(result, sys.stdout)
    return EXIT_OK


def main(argv=None) -> int:
    args = _parser().parse_args(argv)
    logging.basicConfig(level=logging.INFO if args.verbose else logging.WARNING, format="%(message)s")
    handlers = {"run": _cmd_run, "compare": _cmd_compare, "check": _cmd_check, "replay": _cmd_replay}
    try:
        return handlers[args.verb](args)
    except (ConfigError, FileNotFoundError) as exc:
        print(f"configuration error: {exc}", file=sys.stderr)
        return EXIT_CONFIG


if __name__ == "__main__":
    sys.exit(main())
