"""Acceptance criteria, one test each, at their stated tolerances.

Each test records a PASS/FAIL line through the ``criterion`` fixture; the
lines are printed together at the end of the pytest run.
"""

import csv
import io
import json
import math
import statistics
import time
from pathlib import Path

import numpy as np
import pytest

from pev import checkpoint, pipeline
from pev.cli import dispatch
from pev.config import Settings, parse_config
from pev.engine import run_training
from pev.fingerprint import calibrate_threshold, fingerprint_generate, influence
from pev.metrics import inversions, mean_drops
from pev.model import Batch, ModelParams, backward, default_arch, forward, init_params
from pev.unlearn import SensitivityProfile, calibrate_update, noise_seed, retrain_oracle, sensitivity_profile, unlearn

pytestmark = pytest.mark.acceptance


def test_ac1_gradient_matches_finite_differences(criterion):
    start = time.perf_counter()
    arch = default_arch(20, 4)
    worst = 0.0
    checked = 0
    for seed in range(5):
        model = init_params(arch, seed)
        rng = np.random.default_rng(100 + seed)
        batch = Batch(rng.normal(size=(16, 20)), rng.integers(0, 4, size=16))
        g = backward(model, batch).flatten()
        base = model.flatten()
        h = 1e-5
        for j in range(base.size):
            e = np.zeros_like(base)
            e[j] = h
            fd = (forward(ModelParams.unflatten(arch, base + e), batch)[1]
                  - forward(ModelParams.unflatten(arch, base - e), batch)[1]) / (2 * h)
            rel = abs(fd - g[j]) / max(abs(fd), abs(g[j]), 1e-8)
            worst = max(worst, rel)
            checked += 1
    elapsed = time.perf_counter() - start
    ok = worst <= 1e-4 and elapsed < 10
    criterion("AC1 gradient correctness", ok, f"max rel err {worst:.2e} over {checked} coords, {elapsed:.1f}s")
    assert ok


def test_ac2_exact_removal_equivalence(criterion):
    start = time.perf_counter()
    diffs = []
    for seed in range(5):
        s = parse_config(None, [f"master_seed={seed}", "n_clients=4", "clients_per_round=4", "rounds=5", "tau=1",
                                "theta=-inf", "sigma=0", "fingerprint_epsilon=0"])
        task = pipeline.build_task(s)
        trained = run_training(s.run, task.shards)
        u = seed % 4
        w_hat = unlearn(trained.store, u, 0.0, seed).model
        oracle = retrain_oracle(s.run, task.shards, u).model
        diffs.append(float(np.abs(w_hat.flatten() - oracle.flatten()).max()))
    elapsed = time.perf_counter() - start
    ok = all(d == 0.0 for d in diffs) and elapsed < 30
    criterion("AC2 exact-removal equivalence", ok,
              f"max |unlearn - retrain| per seed {['%.1e' % d for d in diffs]}, {elapsed:.1f}s")
    assert ok


def test_ac3_noise_calibration(criterion):
    start = time.perf_counter()
    s = Settings()
    trained = pipeline.train(s, pipeline.build_task(s))
    ckpt = trained.store.checkpoints[0]
    u = ckpt.client_ids[0]
    profile = sensitivity_profile(ckpt, u)
    delta = ckpt.updates[1].delta
    worst = 0.0
    for sigma in (0.2, 0.5, 0.8):
        for layer, s_l in enumerate(profile.values):
            only = SensitivityProfile(tuple(v if i == layer else 0.0 for i, v in enumerate(profile.values)), 0)
            size = delta.tensors[layer].size
            draws = []
            for k in range(math.ceil(100_000 / size)):
                noisy = calibrate_update(delta, only, sigma, noise_seed(0, k, layer))
                draws.append((noisy.tensors[layer] - delta.tensors[layer]).ravel())
            x = np.concatenate(draws)
            target = sigma * s_l
            se = target / math.sqrt(2 * (x.size - 1))
            worst = max(worst, abs(x.std() - target) / se)
    elapsed = time.perf_counter() - start
    ok = worst <= 3 and elapsed < 30
    criterion("AC3 noise calibration", ok, f"worst |std - sigma*S_l| = {worst:.2f} SE, {elapsed:.1f}s")
    assert ok


def test_ac4_unlearn_is_at_least_twice_as_fast(criterion):
    start = time.perf_counter()
    s = Settings()
    task = pipeline.build_task(s)
    trained = pipeline.train(s, task)
    u = pipeline.pick_target(trained.store)
    unlearn_t, retrain_t = [], []
    for _ in range(3):
        t0 = time.perf_counter()
        unlearn(trained.store, u, s.run.sigma, s.run.master_seed)
        unlearn_t.append(time.perf_counter() - t0)
        t0 = time.perf_counter()
        pipeline.retrain(s, task, u)
        retrain_t.append(time.perf_counter() - t0)
    ratio = statistics.median(unlearn_t) / statistics.median(retrain_t)
    elapsed = time.perf_counter() - start
    ok = ratio <= 0.5 and elapsed < 600
    criterion("AC4 speedup", ok, f"median unlearn {statistics.median(unlearn_t) * 1e3:.0f} ms vs retrain "
              f"{statistics.median(retrain_t) * 1e3:.0f} ms (ratio {ratio:.3f}, k={len(trained.store)})")
    assert ok


def _monotone_enough(curve):
    inv = inversions(curve)
    return len(inv) == 0 or (len(inv) == 1 and inv[0] <= 0.5)


def test_ac5_privacy_utility_direction(criterion):
    start = time.perf_counter()
    s = Settings()
    assert s.sweep_seeds >= 10 and s.sweep_sigmas == (0.2, 0.5, 0.8)
    drops = mean_drops(pipeline.run_sweep(s))
    pev, uni = drops["pev"], drops["uniform_dp"]
    sigmas = list(s.sweep_sigmas)
    dominated = all(pev[x] <= uni[x] for x in sigmas)
    monotone = _monotone_enough([pev[x] for x in sigmas]) and _monotone_enough([uni[x] for x in sigmas])
    elapsed = time.perf_counter() - start
    ok = dominated and monotone and elapsed < 900
    fmt = lambda d: ", ".join(f"{x}:{d[x]:.2f}" for x in sigmas)
    criterion("AC5 privacy-utility direction", ok, f"pev [{fmt(pev)}] uniform [{fmt(uni)}] pp, {elapsed:.0f}s")
    assert ok


def test_ac6_fingerprint_verification(criterion):
    start = time.perf_counter()
    seeds = range(20)
    before = after = other = 0
    for seed in seeds:
        s = parse_config(None, [f"master_seed={seed}", "n_clients=10", "clients_per_round=10", "rounds=100",
                                "tau=1", "theta=-inf", "sigma=0", "fingerprint_epsilon=0.05"])
        task = pipeline.build_task(s)
        trained = pipeline.train(s, task)
        d = trained.model.total_dim
        delta = calibrate_threshold(d, s.threshold_samples, s.threshold_quantile, seed)
        u, v = seed % 10, (seed + 1) % 10
        fp_u = fingerprint_generate(u, d, seed, 0.05)
        fp_v = fingerprint_generate(v, d, seed, 0.05)
        w_hat = unlearn(trained.store, u, 0.0, seed).model
        before += influence(fp_u, trained.model, trained.store.initial) > delta
        after += influence(fp_u, w_hat, trained.store.initial) < delta
        other += influence(fp_v, w_hat, trained.store.initial) > delta
    n = len(seeds)
    elapsed = time.perf_counter() - start
    ok = before >= 0.95 * n and after >= 0.95 * n and other >= 0.90 * n and elapsed < 600
    criterion("AC6 verification", ok, f"target on w_T {before}/{n}, target on unlearned {after}/{n}, "
              f"non-target on unlearned {other}/{n}, {elapsed:.0f}s")
    assert ok


def test_ac7_storage_law(criterion, tmp_path):
    configs = [
        [],
        ["rounds=60", "tau=7", "theta=0.5"],
        ["rounds=50", "tau=3", "theta=-inf", "n_clients=20", "clients_per_round=5"],
        ["rounds=40", "tau=4", "theta=1e9"],
    ]
    details, ok = [], True
    for i, overrides in enumerate(configs):
        s = parse_config(None, overrides)
        trained = pipeline.train(s, pipeline.build_task(s))
        store = trained.store
        k, T, tau = len(store), s.run.rounds, s.run.tau
        path = tmp_path / f"s{i}.pevc"
        checkpoint.save(store, path)
        d = store.total_dim
        expected = sum((len(c.updates) + 1) * d * 8 for c in store) + checkpoint.header_bytes(store.arch) \
            + sum(checkpoint.record_overhead(len(c.updates)) for c in store)
        size = path.stat().st_size
        rel = abs(size - expected) / expected
        exact = checkpoint.load(path).equals(store)
        ok &= k <= T // tau and rel <= 0.15 and exact
        details.append(f"k={k}<={T // tau} size {size}B ({rel:.1%})")
    criterion("AC7 storage law", ok, "; ".join(details))
    assert ok


def _strip_columns(text: str, drop: str) -> list[list[str]]:
    rows = list(csv.reader(io.StringIO(text)))
    keep = [i for i, name in enumerate(rows[0]) if name != drop]
    return [[r[i] for i in keep] for r in rows]


def _json_without(text: str, key: str) -> str:
    rec = json.loads(text)
    rec.pop(key, None)
    return json.dumps(rec, sort_keys=True)


def test_ac8_cli_determinism(criterion, tmp_path):
    opts = ["-q", "--set", f"out_dir={tmp_path}", "--set", "sweep_seeds=2"]
    runs = []
    codes = []
    for _ in range(2):
        codes.append(dispatch(["train", *opts]))
        run_dir = max(tmp_path.iterdir(), key=lambda p: p.name)
        for cmd in (["unlearn"], ["unlearn", "--method", "uniform_dp"], ["retrain"], ["verify"], ["sweep"],
                    ["report"]):
            codes.append(dispatch([*cmd, *opts, "--run", str(run_dir)]))
        runs.append(run_dir)
    a, b = runs
    mismatched = []
    for path in sorted(p.relative_to(a) for p in a.rglob("*") if p.is_file()):
        x, y = (a / path).read_bytes(), (b / path).read_bytes()
        if path.name == "sweep.csv":
            same = _strip_columns(x.decode(), "wall_time_ms") == _strip_columns(y.decode(), "wall_time_ms")
        elif path.name == "rounds.csv":
            same = _strip_columns(x.decode(), "wall_time_ms") == _strip_columns(y.decode(), "wall_time_ms")
        elif path == Path("report.json"):
            # the timing table is a measurement; the sweep summary must match
            same = json.loads(x)["sweep"] == json.loads(y)["sweep"]
        elif path.name in ("report.json", "train_summary.json"):
            same = _json_without(x.decode(), "wall_time_ms") == _json_without(y.decode(), "wall_time_ms")
        elif path.name == "report.txt":
            continue  # rendered timing table
        else:
            same = x == y
        if not same:
            mismatched.append(str(path))
    compared = sum(1 for p in a.rglob("*") if p.is_file())
    ok = codes == [0] * len(codes) and not mismatched
    criterion("AC8 determinism", ok, f"{compared} artifacts per run, mismatches: {mismatched or 'none'}, "
              f"exit codes {sorted(set(codes))}")
    assert ok
