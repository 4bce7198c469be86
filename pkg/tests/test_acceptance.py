"""Acceptance suite: one test per primary criterion, each reporting PASS or FAIL.

The verdict lines are printed in the run summary (see conftest.py). Runtime
budgets are part of each verdict.
"""

import os
import random
import time
from pathlib import Path

import numpy as np
import pytest

from conftest import ACCEPTANCE_LINES
from oracles import attention_prefix_outputs, earliest_step_brute_force
from splitdecode.attention import KvShard, StorageFormat
from splitdecode.cli import ScenarioConfig, run_scenario
from splitdecode.core import new_model_spec, seed_random_weights
from splitdecode.dense import MonolithicDecoder
from splitdecode.pipesim import ideal_savings
from splitdecode.planner import (
    PerfProfile,
    PlanRequest,
    balance_check,
    plan_batch_size,
    plan_worker_count,
    worker_estimate,
)
from splitdecode.scheduler import (
    FixedIntervalSchedule,
    LargeBatchSchedule,
    LoadLimitError,
    peak_load_fixed_interval,
)
from splitdecode.transport import BY_HEAD, BY_SEQUENCE
from splitdecode.workers import SWorker, run_generation, spawn_r_workers, stop_r_workers
from test_planner import R_REF, T1024, reference_profile
from test_scheduler import random_tracker

CONFIGS = Path(__file__).resolve().parents[1] / "configs"


def verdict(name: str, ok: bool, detail: str, elapsed: float, budget: float) -> bool:
    ok = ok and elapsed < budget
    line = f"{'PASS' if ok else 'FAIL'}  {name}: {detail} ({elapsed:.2f}s, budget {budget:g}s)"
    ACCEPTANCE_LINES.append(line)
    print(line)
    return ok


def usable_cpus() -> int:
    try:
        return len(os.sched_getaffinity(0))
    except AttributeError:
        return os.cpu_count() or 1


def test_small_instance_peak_loads():
    t0 = time.perf_counter()
    fixed = max(p.total_load for p in FixedIntervalSchedule(6, 6, 2).plans(36))
    large = max(p.total_load for p in LargeBatchSchedule(6, 6).plans(36))
    ok = (fixed, large) == (24, 36)
    assert verdict("schedule arithmetic 6/6/2", ok, f"peak {fixed} vs {large}",
                   time.perf_counter() - t0, 1)


def test_peak_load_closed_form_grid():
    t0 = time.perf_counter()
    cases = [(m * S // F, S, F) for S in (4, 6, 8, 12, 16, 24, 30, 32, 48, 64)
             for F in sorted({1, 2, S // 2, S // 4 or 1, S}) if S % F == 0
             for m in (1, 3)][:50]
    mismatches = []
    for B, S, F in cases:
        sim = max(p.total_load for p in FixedIntervalSchedule(B, S, F).plans(3 * S))
        if sim != peak_load_fixed_interval(B, S, F) or 2 * sim != B * (S + F):
            mismatches.append((B, S, F, sim))
    ok = len(cases) == 50 and not mismatches
    assert verdict("peak load B(S+F)/2", ok, f"{len(cases)} cases, mismatches {mismatches}",
                   time.perf_counter() - t0, 5)


def test_canonical_savings():
    t0 = time.perf_counter()
    cfg = ScenarioConfig.load(CONFIGS / "savings_canonical.json")
    _, summary = run_scenario(cfg)
    ideal, sim = summary["ideal"], summary["simulated"]
    checks = [ideal["total_saving"], sim["total_saving"], ideal["peak_saving"], sim["peak_saving"]]
    ok = (all(abs(v - 0.20) <= 0.005 for v in checks[:2])
          and all(abs(v - 0.50) <= 0.005 for v in checks[2:]))
    detail = ("total saving ideal {:.2%} simulated {:.2%}; peak saving ideal {:.2%} "
              "simulated {:.2%}".format(*checks))
    assert ideal_savings(cfg.latency_model(), cfg.schedule.B, cfg.schedule.S) == (
        ideal["total_ratio"], ideal["peak_ratio"])
    assert verdict("ideal savings 20%/50%", ok, detail, time.perf_counter() - t0, 10)


def test_earliest_step_minimality():
    t0 = time.perf_counter()
    rng = random.Random(20240601)
    mismatches = checked = 0
    for _ in range(10_000):
        S = rng.randint(1, 12)
        tr = random_tracker(rng, S, rng.randint(S, 6 * S * 4), 6, 4)
        assert len(tr.batches) <= 6
        m = rng.randint(1, 4)
        batches = [(b.start, b.size) for b in tr.batches]
        want = earliest_step_brute_force(batches, S, tr.w_lim, m,
                                         max(tr.current_step, tr.last_start))
        try:
            got = tr.get_earliest_step(m, S)
        except LoadLimitError:
            got = None
        mismatches += got != want
        checked += 1
    assert verdict("earliest-step minimality", mismatches == 0,
                   f"{checked} instances, {mismatches} mismatches", time.perf_counter() - t0, 60)


def test_distributed_equals_monolithic():
    t0 = time.perf_counter()
    spec = new_model_spec(2, 64, 4, 256, 128)
    weights = seed_random_weights(spec, 3)
    prompts = {s: (11 * s + 1) % 128 for s in range(8)}
    want = run_generation(MonolithicDecoder(weights), LargeBatchSchedule(8, 32), 32, 128,
                          prompts, keep_hidden=True)
    results = {}
    for label, n, mode in (("1 worker", 1, BY_SEQUENCE), ("2 by-sequence", 2, BY_SEQUENCE),
                           ("2 by-head", 2, BY_HEAD)):
        procs, addrs = spawn_r_workers(n, 1 << 14)
        try:
            with SWorker(weights, addrs, mode) as sw:
                got = run_generation(sw, LargeBatchSchedule(8, 32), 32, 128, prompts,
                                     keep_hidden=True)
        finally:
            stop_r_workers(procs)
        dev = max(float(np.abs(got.hidden[k] - want.hidden[k]).max()) for k in want.hidden)
        results[label] = (got.tokens == want.tokens and got.hidden.keys() == want.hidden.keys(), dev)
    ok = all(same and dev <= 1e-5 for same, dev in results.values())
    detail = "; ".join(f"{k}: tokens {'equal' if s else 'DIFFER'}, max dev {d:.1e}"
                       for k, (s, d) in results.items())
    assert verdict("distributed equals monolithic", ok, detail, time.perf_counter() - t0, 120)


def test_kv_cache_matches_recomputation():
    t0 = time.perf_counter()
    spec = new_model_spec(1, 32, 4, 64, 16)
    rng = np.random.default_rng(99)
    worst = 0.0
    for seq in range(1000):
        L = int(rng.integers(1, 65))
        q, k, v = (rng.standard_normal((L, 4, 8)).astype(np.float32) for _ in range(3))
        shard = KvShard.for_spec(spec, 64)
        cached = np.empty((L, 32), np.float32)
        for t in range(L):
            shard.append_kv(seq, 0, k[t].reshape(-1), v[t].reshape(-1))
            cached[t] = shard.attend_one(seq, 0, q[t].reshape(-1))
        ref = attention_prefix_outputs(q, k, v).reshape(L, 32)
        worst = max(worst, float(np.abs(cached - ref).max()))
    assert verdict("KV cache vs recomputation", worst <= 1e-5,
                   f"1000 sequences, max dev {worst:.2e}", time.perf_counter() - t0, 30)


def test_reduced_storage_bounds():
    t0 = time.perf_counter()
    spec = new_model_spec(1, 64, 4, 64, 16)
    rng = np.random.default_rng(7)
    worst = {StorageFormat.HALF: 0.0, StorageFormat.INT8: 0.0}
    for trial in range(10_000):
        L = int(rng.integers(1, 33))
        k, v = rng.standard_normal((2, L, 64)).astype(np.float32)
        q = rng.standard_normal(64).astype(np.float32)
        shards = {fmt: KvShard.for_spec(spec, 64, storage_format=fmt) for fmt in StorageFormat}
        for fmt, shard in shards.items():
            for t in range(L):
                shard.append_kv(trial, 0, k[t], v[t])
        exact = shards[StorageFormat.SINGLE].attend_one(trial, 0, q)
        for fmt in worst:
            dev = float(np.abs(shards[fmt].attend_one(trial, 0, q) - exact).max())
            worst[fmt] = max(worst[fmt], dev)
    half, int8 = worst[StorageFormat.HALF], worst[StorageFormat.INT8]
    ok = half <= 2e-3 and int8 <= 5e-2
    assert verdict("half/int8 storage bounds", ok,
                   f"10000 trials, half {half:.2e} (<=2e-3), int8 {int8:.2e} (<=5e-2)",
                   time.perf_counter() - t0, 60)


def test_planner_consistency():
    t0 = time.perf_counter()
    p = reference_profile()
    accepted, residual = balance_check(p, 1024, 1024, 2)
    table_ok = accepted and abs(residual - 0.147) <= 5e-4
    assert R_REF * 1024 * 1024 / 4 == pytest.approx(8.12e-3) and T1024 == 7.08e-3
    rng = random.Random(5)
    profiles = failures = 0
    for _ in range(300):
        n_points = rng.randint(1, 64)
        sizes = sorted(rng.sample(range(1, 4097), n_points))
        times = sorted(rng.uniform(1e-4, 5e-2) for _ in sizes)
        prof = PerfProfile(dict(zip(sizes, times)), rng.uniform(0, 1e-5), 1 << 30)
        n, s = rng.randint(1, 8), rng.randint(1, 2048)
        budget = rng.uniform(1e-2, 1e3)
        feasible = [b for b in sizes if 2 * n * s * prof.t_of(b) <= budget]
        if not feasible:
            continue
        profiles += 1
        b, _ = plan_batch_size(prof, PlanRequest(n, s, latency_budget=budget))
        p_count, _ = plan_worker_count(prof, b, s)
        minimal = next(q for q in range(1, 1 << 20)
                       if b * s * prof.r_per_token / (2 * q) <= prof.t_of(b) * (1 + 1e-9))
        failures += b != max(feasible) or p_count != minimal
    ok = table_ok and failures == 0 and profiles >= 100
    detail = (f"residual {residual:.2%} at P=2 ({'accepted' if accepted else 'rejected'}), "
              f"estimate {worker_estimate(p, 1024, 1024):.2f}; grid search {profiles} profiles, "
              f"{failures} disagreements")
    assert verdict("planner consistency", ok, detail, time.perf_counter() - t0, 10)


def decode_latencies(layer_counts, batch: int = 16, warm: int = 32, reps: int = 25) -> np.ndarray:
    """Fastest observed decode step per layer count, timed round-robin."""
    ids, tokens = list(range(batch)), [1] * batch
    decoders = [MonolithicDecoder(seed_random_weights(new_model_spec(int(n), 256, 8, 1024, 256), 0))
                for n in layer_counts]
    for dec in decoders:
        for _ in range(warm):
            dec.decode_step(ids, tokens)
    best = np.full(len(decoders), np.inf)
    for _ in range(reps):
        for i, dec in enumerate(decoders):
            t0 = time.perf_counter()
            dec.decode_step(ids, tokens)
            best[i] = min(best[i], time.perf_counter() - t0)
    return best


def test_layer_linearity():
    t0 = time.perf_counter()
    layers = np.array([1, 2, 4, 8])
    times = decode_latencies(layers)
    slope, icpt = np.polyfit(layers, times, 1)
    r2 = 1 - np.sum((times - (slope * layers + icpt)) ** 2) / np.sum((times - times.mean()) ** 2)
    detail = "R^2 {:.4f}; ms per step {}".format(r2, [round(float(t) * 1e3, 2) for t in times])
    assert verdict("layer linearity", r2 >= 0.95, detail, time.perf_counter() - t0, 120)


def median_filter(x, k=5):
    x = np.asarray(x)
    pad = np.pad(x, k // 2, mode="edge")
    return np.median(np.lib.stride_tricks.sliding_window_view(pad, k), axis=1)


def live_run(weights, schedule, steps, n_workers=1, pipelined=True):
    procs, addrs = spawn_r_workers(n_workers, 1 << 16)
    try:
        with SWorker(weights, addrs, pipelined=pipelined) as sw:
            t0 = time.perf_counter()
            run_generation(sw, schedule, steps, weights.spec.vocab_size)
            wall = time.perf_counter() - t0
            traces = list(sw.traces)
    finally:
        stop_r_workers(procs)
    return wall, traces


def test_pipeline_ab():
    t0 = time.perf_counter()
    # pipelined vs serial on the same workload, best of three alternating runs
    w = seed_random_weights(new_model_spec(2, 256, 8, 1024, 128), 0)
    walls = {True: [], False: []}
    for _ in range(3):
        for piped in (True, False):
            walls[piped].append(live_run(w, LargeBatchSchedule(32, 64), 64, 2, piped)[0])
    piped_wall, serial_wall = min(walls[True]), min(walls[False])
    pipe_ok = piped_wall < serial_wall

    # stabilized vs large batch: smoothed peak and plateau after warmup
    # attention-heavy so that R time tracks the active load
    w = seed_random_weights(new_model_spec(1, 256, 4, 256, 128), 0)
    B, S, F = 32, 128, 16
    schedules = {"stable": lambda: FixedIntervalSchedule(B, S, F),
                 "large": lambda: LargeBatchSchedule(B, S)}
    smoothed = {}
    for kind, make in schedules.items():
        # per-step minimum over two runs filters out-of-process interference
        runs = [[t.overall_latency for t in live_run(w, make(), 3 * S)[1]] for _ in range(2)]
        smoothed[kind] = median_filter(np.min(runs, axis=0))[S:]
    peak = {k: float(v.max()) for k, v in smoothed.items()}
    spread = {k: float((np.percentile(v, 90) - np.percentile(v, 10)) / np.median(v))
              for k, v in smoothed.items()}
    stable_ok = peak["stable"] < peak["large"] and spread["stable"] < 0.5 * spread["large"]

    cpus = usable_cpus()
    detail = (f"pipelined {piped_wall:.3f}s vs serial {serial_wall:.3f}s on {cpus} usable CPU(s); "
              f"smoothed peak stable/large {peak['stable'] * 1e3:.2f}/{peak['large'] * 1e3:.2f} ms "
              f"(ratio {peak['stable'] / peak['large']:.2f}), plateau spread "
              f"{spread['stable']:.2f} vs {spread['large']:.2f}")
    ok = verdict("pipeline benefit A/B", pipe_ok and stable_ok, detail, time.perf_counter() - t0, 300)
    assert stable_ok, detail
    if not pipe_ok and cpus < 2:
        pytest.xfail("stage overlap needs at least two CPUs; " + detail)
    assert ok, detail
