"""Command-line entry point.

    pev train   [--config FILE] [--set key=value ...]
    pev unlearn | retrain | verify | sweep | report  (same options)

Every invocation resolves the full configuration (defaults, file, overrides),
then works inside a run directory ``<out_dir>/<training-hash>-<UTC time>``.
``train`` creates a new one; later steps use the newest directory whose
training hash matches, or ``--run DIR``.

Exit codes: 0 success, 2 verification failure, 3 usage or missing artifact,
1 internal error.
"""

from __future__ import annotations

import argparse
import dataclasses
import datetime as _dt
import hashlib
import json
import logging
import os
import sys
from pathlib import Path

from . import checkpoint, pipeline
from .config import Settings, parse_config, training_text
from .errors import CheckpointFormatError, ConfigError, DatasetError, EmptyStoreError, MissingArtifactError
from .fingerprint import fingerprint_generate, verify
from .metrics import accuracy, format_timing, summary_record, timing_report, write_sweep_csv
from .unlearn import uniform_dp_baseline, unlearn

logger = logging.getLogger("pev")

EXIT_OK, EXIT_INTERNAL, EXIT_UNVERIFIED, EXIT_USAGE = 0, 1, 2, 3
COMMANDS = ("train", "unlearn", "retrain", "verify", "sweep", "report")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message):
        raise UsageError(message)


def build_parser() -> argparse.ArgumentParser:
    common = _Parser(add_help=False)
    common.add_argument("--config", "-c", help="key=value config file (defaults apply when omitted)")
    common.add_argument("--set", dest="overrides", action="append", default=[], metavar="KEY=VALUE",
                        help="override a config entry; repeatable")
    common.add_argument("--run", help="run directory to use instead of the newest matching one")
    common.add_argument("--jobs", type=int, default=None, help="local-training workers (env PEV_JOBS)")
    common.add_argument("--method", choices=("pev", "uniform_dp"), default="pev",
                        help="unlearning method for unlearn/verify")
    common.add_argument("-q", "--quiet", action="store_true")

    parser = _Parser(prog="pev", description="Federated unlearning simulator")
    sub = parser.add_subparsers(dest="command", required=True, parser_class=_Parser)
    for name in COMMANDS:
        sub.add_parser(name, parents=[common])
    return parser


# ---------------------------------------------------------------------------
# run directories
# ---------------------------------------------------------------------------

def training_hash(settings: Settings) -> str:
    return hashlib.sha256(training_text(settings).encode("utf-8")).hexdigest()[:12]


def new_run_dir(settings: Settings) -> Path:
    stamp = _dt.datetime.now(_dt.timezone.utc).strftime("%Y%m%dT%H%M%S%fZ")
    path = Path(settings.out_dir) / f"{training_hash(settings)}-{stamp}"
    path.mkdir(parents=True, exist_ok=False)
    return path


def find_run_dir(settings: Settings, explicit: str | None) -> Path:
    if explicit:
        path = Path(explicit)
        if not path.is_dir():
            raise MissingArtifactError(f"run directory {path} does not exist")
        return path
    candidates = sorted(Path(settings.out_dir).glob(f"{training_hash(settings)}-*"))
    if not candidates:
        raise MissingArtifactError(
            f"no training run for this configuration under {settings.out_dir}/ (run `pev train` first)")
    return candidates[-1]


def _require(path: Path, hint: str) -> Path:
    if not path.exists():
        raise MissingArtifactError(f"missing {path} ({hint})")
    return path


def _write(path: Path, text: str):
    path.parent.mkdir(parents=True, exist_ok=True)
    path.write_text(text)


def _tag(method: str, u: int, sigma: float) -> str:
    return f"{method}_u{u}_sigma{sigma!r}"


def _target(settings: Settings, store) -> int:
    return settings.target if settings.target is not None else pipeline.pick_target(store)


# ---------------------------------------------------------------------------
# subcommands
# ---------------------------------------------------------------------------

def cmd_train(settings: Settings, args) -> int:
    task = pipeline.build_task(settings)
    res = pipeline.train(settings, task, args.jobs)
    run = new_run_dir(settings)
    _write(run / "config.txt", settings.resolved_text())
    checkpoint.save(res.store, run / "checkpoints.pevc")
    pipeline.save_model(res.model, run / "model_final.pevm")
    lines = ["round,sampled_clients,variance,checkpointed,global_accuracy,wall_time_ms"]
    for r in res.logs:
        v = "" if r.variance is None else repr(r.variance)
        lines.append(f"{r.round},{' '.join(map(str, r.sampled_clients))},{v},{str(r.checkpointed).lower()},"
                     f"{r.global_accuracy!r},{r.wall_time_ms}")
    _write(run / "rounds.csv", "\n".join(lines) + "\n")
    summary = {"checkpoints": len(res.store), "rounds": settings.run.rounds,
               "final_accuracy": accuracy(res.model, task.test), "wall_time_ms": res.wall_time_ms}
    _write(run / "train_summary.json", json.dumps(summary, sort_keys=True) + "\n")
    print(f"{run}\ncheckpoints={len(res.store)} final_accuracy={summary['final_accuracy']:.4f}")
    return EXIT_OK


def cmd_unlearn(settings: Settings, args) -> int:
    run = find_run_dir(settings, args.run)
    store = checkpoint.load(_require(run / "checkpoints.pevc", "run `pev train` first"))
    final = pipeline.load_model(_require(run / "model_final.pevm", "run `pev train` first"))
    u = _target(settings, store)
    fn = unlearn if args.method == "pev" else uniform_dp_baseline
    rep = fn(store, u, settings.run.sigma, settings.run.master_seed)
    task = pipeline.build_task(settings)
    rep.accuracy_before = accuracy(final, task.test)
    rep.accuracy_after = accuracy(rep.model, task.test)
    out = run / "unlearn" / _tag(args.method, u, settings.run.sigma)
    _write(out / "config.txt", settings.resolved_text())
    pipeline.save_model(rep.model, out / "model.pevm")
    _write(out / "report.json", rep.to_record() + "\n")
    print(rep.to_record())
    return EXIT_OK


def cmd_retrain(settings: Settings, args) -> int:
    run = find_run_dir(settings, args.run)
    store = checkpoint.load(_require(run / "checkpoints.pevc", "run `pev train` first"))
    u = _target(settings, store)
    task = pipeline.build_task(settings)
    res = pipeline.retrain(settings, task, u, args.jobs)
    out = run / "retrain" / f"u{u}"
    _write(out / "config.txt", settings.resolved_text())
    pipeline.save_model(res.model, out / "model.pevm")
    record = json.dumps({"target": u, "method": "retrain", "wall_time_ms": res.wall_time_ms,
                         "accuracy_after": accuracy(res.model, task.test)}, sort_keys=True)
    _write(out / "report.json", record + "\n")
    print(record)
    return EXIT_OK


def cmd_verify(settings: Settings, args) -> int:
    run = find_run_dir(settings, args.run)
    store = checkpoint.load(_require(run / "checkpoints.pevc", "run `pev train` first"))
    u = _target(settings, store)
    tag = _tag(args.method, u, settings.run.sigma)
    w_hat = pipeline.load_model(_require(run / "unlearn" / tag / "model.pevm", "run `pev unlearn` first"))
    d = w_hat.total_dim
    fp = fingerprint_generate(u, d, settings.run.master_seed, settings.run.fingerprint_epsilon)
    verdict = verify(fp, w_hat, store.initial, pipeline.threshold_for(settings, d))
    _write(run / "verify" / f"{tag}.json", verdict.to_record() + "\n")
    print(verdict.to_record())
    return EXIT_OK if verdict.success else EXIT_UNVERIFIED


def cmd_sweep(settings: Settings, args) -> int:
    try:
        run = find_run_dir(settings, args.run)
    except MissingArtifactError:
        run = new_run_dir(settings)
        _write(run / "config.txt", settings.resolved_text())
    rows = pipeline.run_sweep(settings, args.jobs)
    out = run / "sweep"
    out.mkdir(parents=True, exist_ok=True)
    with (out / "sweep.csv").open("w", newline="") as fh:
        write_sweep_csv(rows, fh)
    _write(out / "summary.json", summary_record(rows) + "\n")
    _write(out / "config.txt", settings.resolved_text())
    print(summary_record(rows))
    return EXIT_OK


def cmd_report(settings: Settings, args) -> int:
    run = find_run_dir(settings, args.run)
    timings = []
    for path in sorted(run.glob("unlearn/*/report.json")) + sorted(run.glob("retrain/*/report.json")):
        rec = json.loads(path.read_text())
        timings.append((rec["method"], rec["wall_time_ms"]))
    sweep_summary = run / "sweep" / "summary.json"
    if not timings and not sweep_summary.exists():
        raise MissingArtifactError(f"nothing to report in {run} (run unlearn/retrain/sweep first)")
    report: dict = {}
    text = []
    if timings:
        rows = timing_report(timings)
        report["timing"] = [dataclasses.asdict(r) for r in rows]
        text.append(format_timing(rows))
    if sweep_summary.exists():
        report["sweep"] = json.loads(sweep_summary.read_text())
        text.append(sweep_summary.read_text().strip())
    _write(run / "report.json", json.dumps(report, sort_keys=True, indent=1) + "\n")
    _write(run / "report.txt", "\n".join(text) + "\n")
    print("\n".join(text))
    return EXIT_OK


HANDLERS = {"train": cmd_train, "unlearn": cmd_unlearn, "retrain": cmd_retrain, "verify": cmd_verify,
            "sweep": cmd_sweep, "report": cmd_report}


def dispatch(argv: list[str] | None = None) -> int:
    try:
        args = build_parser().parse_args(argv)
    except UsageError as e:
        print(f"pev: {e}", file=sys.stderr)
        return EXIT_USAGE
    logging.basicConfig(level=logging.WARNING if args.quiet else logging.INFO,
                        format="%(levelname)s %(name)s: %(message)s")
    try:
        if args.jobs is None:
            args.jobs = int(os.environ.get("PEV_JOBS", "1"))
        if args.jobs < 1:
            raise ConfigError(f"--jobs must be >= 1, got {args.jobs}")
        settings = parse_config(args.config, args.overrides)
        return HANDLERS[args.command](settings, args)
    except (ConfigError, DatasetError, MissingArtifactError, EmptyStoreError, CheckpointFormatError) as e:
        print(f"pev {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except ValueError as e:  # e.g. malformed PEV_JOBS
        print(f"pev {args.command}: {e}", file=sys.stderr)
        return EXIT_USAGE
    except Exception:
        logger.exception("internal error")
        return EXIT_INTERNAL


def main():
    sys.exit(dispatch())
