"""Accuracy, noise sweeps, and timing summaries."""

from __future__ import annotations

import csv
import io
import json
import statistics
from dataclasses import dataclass
from typing import Iterable, Sequence

import numpy as np

from .errors import ConfigError
from .model import ModelParams, predict

METHODS = ("pev", "uniform_dp", "retrain", "calibration_only")
CSV_HEADER = ("method", "sigma", "seed", "accuracy", "accuracy_drop_pct", "wall_time_ms", "verified")

# Published full-scale speedups (retrain seconds / unlearn seconds); context only.
REFERENCE_SPEEDUPS = {"CIFAR-10": 1807 / 993, "FEMNIST": 1452 / 475}


@dataclass(frozen=True)
class SweepRow:
    method: str
    sigma: float
    seed: int
    accuracy: float
    accuracy_drop_pct: float
    wall_time_ms: int
    verified: bool | None = None

    def as_csv_fields(self) -> list[str]:
        verified = "" if self.verified is None else str(self.verified).lower()
        return [self.method, repr(self.sigma), str(self.seed), repr(self.accuracy),
                repr(self.accuracy_drop_pct), str(self.wall_time_ms), verified]


def accuracy(model: ModelParams, data) -> float:
    """Fraction of rows whose argmax prediction (ties to the lowest class) equals the label."""
    if len(data.labels) == 0:
        raise ConfigError("accuracy needs a non-empty dataset")
    return float(np.mean(predict(model, data.inputs) == data.labels))


def accuracy_drop_pct(reference: float, value: float) -> float:
    return (reference - value) * 100.0


def noise_sweep(
    store,
    u: int,
    sigmas: Sequence[float],
    seeds: Sequence[int],
    eval_data,
    retrain_accuracy: float | Sequence[float],
) -> list[SweepRow]:
    """One row per (sigma, seed, method in {pev, uniform_dp}).

    ``retrain_accuracy`` is either one value shared by all seeds or one value
    per entry of ``seeds``; drops are always taken against the matching seed.
    """
    from .unlearn import uniform_dp_baseline, unlearn

    if not sigmas:
        raise ConfigError("noise_sweep needs at least one sigma")
    if isinstance(retrain_accuracy, (int, float)):
        refs = [float(retrain_accuracy)] * len(seeds)
    else:
        refs = [float(r) for r in retrain_accuracy]
        if len(refs) != len(seeds):
            raise ConfigError(f"{len(refs)} retrain accuracies for {len(seeds)} seeds")
    rows = []
    for sigma in sigmas:
        for seed, ref in zip(seeds, refs):
            for method, fn in (("pev", unlearn), ("uniform_dp", uniform_dp_baseline)):
                rep = fn(store, u, sigma, seed)
                acc = accuracy(rep.model, eval_data)
                rows.append(SweepRow(method, float(sigma), int(seed), acc, accuracy_drop_pct(ref, acc),
                                     rep.wall_time_ms))
    return rows


def mean_drops(rows: Iterable[SweepRow]) -> dict[str, dict[float, float]]:
    """``{method: {sigma: mean drop}}`` with sigmas in ascending order."""
    groups: dict[str, dict[float, list[float]]] = {}
    for r in rows:
        groups.setdefault(r.method, {}).setdefault(r.sigma, []).append(r.accuracy_drop_pct)
    return {m: {s: float(np.mean(v)) for s, v in sorted(by.items())} for m, by in groups.items()}


def inversions(curve: Sequence[float]) -> list[float]:
    """Sizes of every decrease between consecutive points."""
    return [a - b for a, b in zip(curve, curve[1:]) if b < a]


def write_sweep_csv(rows: Sequence[SweepRow], fh) -> None:
    w = csv.writer(fh, lineterminator="\n")
    w.writerow(CSV_HEADER)
    for r in rows:
        w.writerow(r.as_csv_fields())


def read_sweep_csv(text: str) -> list[SweepRow]:
    reader = csv.DictReader(io.StringIO(text))
    if tuple(reader.fieldnames or ()) != CSV_HEADER:
        raise ConfigError(f"unexpected sweep CSV header {reader.fieldnames}")
    rows = []
    for rec in reader:
        verified = None if rec["verified"] == "" else rec["verified"] == "true"
        rows.append(SweepRow(rec["method"], float(rec["sigma"]), int(rec["seed"]), float(rec["accuracy"]),
                             float(rec["accuracy_drop_pct"]), int(rec["wall_time_ms"]), verified))
    return rows


def summary_record(rows: Sequence[SweepRow]) -> str:
    return json.dumps({"mean_accuracy_drop_pct": {m: {repr(s): v for s, v in by.items()}
                                                  for m, by in mean_drops(rows).items()}}, sort_keys=True)


@dataclass(frozen=True)
class TimingRow:
    method: str
    runs: int
    mean_ms: float
    std_ms: float
    speedup_vs_retrain: float | None


def timing_report(timings: Iterable[tuple[str, float]]) -> list[TimingRow]:
    """Mean and population std of wall time per method, plus retrain-mean / method-mean."""
    by: dict[str, list[float]] = {}
    for method, ms in timings:
        by.setdefault(method, []).append(float(ms))
    if not by:
        raise ConfigError("timing_report needs at least one run")
    retrain = statistics.fmean(by["retrain"]) if "retrain" in by else None
    rows = []
    for method in sorted(by):
        vals = by[method]
        mean = statistics.fmean(vals)
        if retrain is None:
            ratio = None
        elif mean == 0:
            ratio = float("inf") if retrain > 0 else 1.0
        else:
            ratio = retrain / mean
        rows.append(TimingRow(method, len(vals), mean, statistics.pstdev(vals), ratio))
    return rows


def format_timing(rows: Sequence[TimingRow]) -> str:
    lines = [f"{'method':<16}{'runs':>5}{'mean_ms':>12}{'std_ms':>10}{'speedup':>10}"]
    for r in rows:
        sp = "-" if r.speedup_vs_retrain is None else f"{r.speedup_vs_retrain:.2f}x"
        lines.append(f"{r.method:<16}{r.runs:>5}{r.mean_ms:>12.1f}{r.std_ms:>10.1f}{sp:>10}")
    ref = ", ".join(f"{k} {v:.2f}x" for k, v in REFERENCE_SPEEDUPS.items())
    lines.append(f"published full-scale speedups, not comparable to desk runs: {ref}")
    return "\n".join(lines)
