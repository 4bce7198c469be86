"""Command-line entry point: plan, simulate, bench, serve, drive.

Exit codes: 0 success, 1 usage error, 2 runtime error.
"""

from __future__ import annotations

import argparse
import csv
import json
import logging
import os
import sys
from collections.abc import Sequence
from dataclasses import dataclass, field
from pathlib import Path

from splitdecode.core import ConfigError, ModelSpec
from splitdecode.pipesim import (
    LatencyModel,
    StepTrace,
    canonical_model,
    compare_schedules,
    ideal_savings,
    simulate,
)
from splitdecode.planner import InfeasiblePlan, PerfProfile, PlanRequest, format_plan, plan
from splitdecode.scheduler import make_schedule

log = logging.getLogger("splitdecode")

REPORT_COLUMNS = ("step", "s_latency", "r_latency", "overall_latency", "total_load",
                  "batch_size", "s_idle", "r_idle")
LISTEN_ENV = "SPLITDECODE_LISTEN"

SCHEDULE_KINDS = ("large-batch", "fixed-interval", "stabilized", "ramped-limit", "load-control")


class UsageError(Exception):
    pass


class _Parser(argparse.ArgumentParser):
    def error(self, message: str):  # argparse would exit 2; usage errors are 1 here
        self.print_usage(sys.stderr)
        raise UsageError(f"{self.prog}: error: {message}")


def emit_report(traces: Sequence[StepTrace], path: str | Path) -> Path:
    """Write step traces as CSV with a fixed column order."""
    if not traces:
        raise ValueError("no traces to report")
    path = Path(path)
    try:
        with path.open("w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(REPORT_COLUMNS)
            for t in traces:
                w.writerow([t.step, repr(t.s_latency), repr(t.r_latency), repr(t.overall_latency),
                            t.active_load, t.batch_size, repr(t.s_idle), repr(t.r_idle)])
    except OSError as exc:
        raise RuntimeError(f"cannot write report to {path}: {exc}") from exc
    return path


# --------------------------------------------------------------------------- scenarios


@dataclass
class ScheduleParams:
    kind: str = "fixed-interval"
    B: int = 64
    S: int = 1024
    F: int | None = None
    w_lim: int | None = None
    cold_start: str = "staggered"

    def validate(self) -> None:
        if self.kind not in SCHEDULE_KINDS:
            raise ConfigError(f"schedule.kind must be one of {', '.join(SCHEDULE_KINDS)}; "
                              f"got {self.kind!r}")
        if self.B < 1 or self.S < 1:
            raise ConfigError("schedule.B and schedule.S must be >= 1")
        if self.kind != "large-batch" and self.F is None:
            raise ConfigError(f"schedule.F is required for {self.kind!r}")
        if self.F is not None:
            if self.F < 1:
                raise ConfigError("schedule.F must be >= 1")
            if self.S % self.F:
                raise ConfigError(f"schedule.S ({self.S}) must be divisible by schedule.F "
                                  f"({self.F}); try F in {_divisors(self.S)[:8]}")
            if self.B * self.F < self.S:
                raise ConfigError(f"B*F ({self.B * self.F}) < S ({self.S}): the interval is too "
                                  f"short to admit at least one sequence per slot")
        if self.kind == "load-control" and self.w_lim is None:
            raise ConfigError("schedule.w_lim is required for load-control")
        if self.cold_start not in ("staggered", "ramped"):
            raise ConfigError("schedule.cold_start must be 'staggered' or 'ramped'")

    def build(self, max_sequences: int | None = None):
        kind = self.kind
        if kind in ("fixed-interval", "stabilized") and self.cold_start == "ramped":
            kind = "ramped-limit"
        return make_schedule(kind, self.B, self.S, self.F, self.w_lim, max_sequences)


def _divisors(n: int) -> list[int]:
    return [d for d in range(1, n + 1) if n % d == 0]


@dataclass
class ScenarioConfig:
    """Everything ``simulate`` needs, loaded from JSON."""

    schedule: ScheduleParams
    latency: dict = field(default_factory=dict)
    horizon: int | None = None
    pipelined: bool = True
    waves: int = 4
    workers: int = 1
    model: ModelSpec | None = None
    outputs: dict = field(default_factory=dict)

    LATENCY_KEYS = ("s_seconds", "r_per_token", "crossing", "skew", "transmit_per_seq",
                    "transmit_fixed", "startup_overhead", "exposed_fraction")

    @classmethod
    def from_dict(cls, data: dict, base: Path | None = None) -> ScenarioConfig:
        known = {"schedule", "latency", "horizon", "pipelined", "waves", "workers", "model",
                 "outputs"}
        extra = set(data) - known
        if extra:
            raise ConfigError(f"unknown scenario keys {sorted(extra)}; expected {sorted(known)}")
        if "schedule" not in data:
            raise ConfigError("scenario needs a 'schedule' object")
        try:
            sched = ScheduleParams(**data["schedule"])
        except TypeError as exc:
            raise ConfigError(f"schedule: {exc}") from None
        sched.validate()
        latency = dict(data.get("latency", {}))
        bad = set(latency) - set(cls.LATENCY_KEYS)
        if bad:
            raise ConfigError(f"unknown latency keys {sorted(bad)}")
        if "r_per_token" in latency and "crossing" in latency:
            raise ConfigError("latency: give either r_per_token or crossing, not both")
        model = data.get("model")
        if isinstance(model, str):
            p = Path(model) if base is None else base / model
            model = ModelSpec.from_json(p.read_text())
        elif isinstance(model, dict):
            model = ModelSpec.from_dict(model)
        cfg = cls(sched, latency, data.get("horizon"), bool(data.get("pipelined", True)),
                  int(data.get("waves", 4)), int(data.get("workers", 1)), model,
                  dict(data.get("outputs", {})))
        if cfg.horizon is not None and cfg.horizon < 1:
            raise ConfigError("horizon must be >= 1")
        if cfg.workers < 1 or cfg.waves < 1:
            raise ConfigError("workers and waves must be >= 1")
        return cfg

    @classmethod
    def load(cls, path: str | Path) -> ScenarioConfig:
        path = Path(path)
        try:
            data = json.loads(path.read_text())
        except json.JSONDecodeError as exc:
            raise ConfigError(f"{path}: invalid JSON ({exc})") from None
        return cls.from_dict(data, path.parent)

    def latency_model(self) -> LatencyModel:
        lat = self.latency
        s = float(lat.get("s_seconds", 1e-3))
        if "r_per_token" in lat:
            return LatencyModel.linear(
                s, float(lat["r_per_token"]), self.workers, float(lat.get("skew", 1.0)),
                float(lat.get("transmit_per_seq", 0.0)), float(lat.get("transmit_fixed", 0.0)),
                float(lat.get("startup_overhead", 0.0)), float(lat.get("exposed_fraction", 0.5)))
        base = canonical_model(s, self.schedule.B, self.schedule.S, float(lat.get("crossing", 2.0)))
        return LatencyModel.linear(
            s, base.r_rate, 1, float(lat.get("skew", 1.0)),
            float(lat.get("transmit_per_seq", 0.0)), float(lat.get("transmit_fixed", 0.0)),
            float(lat.get("startup_overhead", 0.0)), float(lat.get("exposed_fraction", 0.5)))


def run_scenario(cfg: ScenarioConfig) -> tuple[list[StepTrace], dict]:
    """Trace the scenario's schedule and summarize savings against a large batch."""
    model = cfg.latency_model()
    sp = cfg.schedule
    horizon = cfg.horizon or (1 + cfg.waves) * sp.S
    result = simulate(model, sp.build(), horizon, cfg.pipelined, warmup=sp.S)
    summary: dict = {"scenario": {"kind": sp.kind, "B": sp.B, "S": sp.S, "F": sp.F,
                                  "horizon": horizon, "pipelined": cfg.pipelined},
                     "warnings": result.warnings}
    try:
        total, peak = ideal_savings(model, sp.B, sp.S)
        summary["ideal"] = {"total_ratio": total, "peak_ratio": peak,
                            "total_saving": 1 - total, "peak_saving": 1 - peak}
    except ConfigError as exc:
        summary["ideal"] = {"skipped": str(exc)}
    if sp.F is not None:
        summary["simulated"] = compare_schedules(model, sp.B, sp.S, sp.F, cfg.waves,
                                                 cfg.pipelined).summary()
    return result.traces, summary


# --------------------------------------------------------------------------- subcommands


def _write_json(obj, path: str | None) -> None:
    text = json.dumps(obj, indent=2, sort_keys=True)
    if path:
        Path(path).write_text(text + "\n")
    print(text)


def cmd_plan(args) -> int:
    profile = PerfProfile.load(args.profile)
    candidates = tuple(int(b) for b in args.candidates.split(",")) if args.candidates else None
    req = PlanRequest(args.layers, args.seq, args.latency, candidates, args.knee, args.tolerance)
    try:
        hp = plan(profile, req)
    except InfeasiblePlan as exc:
        print(json.dumps({"error": str(exc), "tightest_batch": exc.tightest_batch}),
              file=sys.stdout)
        return 2
    print(format_plan(hp), file=sys.stderr)
    _write_json(hp.to_dict(), args.out)
    return 0


def cmd_simulate(args) -> int:
    cfg = ScenarioConfig.load(args.scenario)
    traces, summary = run_scenario(cfg)
    out = args.out or cfg.outputs.get("trace")
    if out:
        emit_report(traces, out)
    _write_json(summary, args.summary or cfg.outputs.get("summary"))
    return 0


def cmd_bench(args) -> int:
    from splitdecode.attention import StorageFormat, bench_r_part
    from splitdecode.dense import bench_s_part, machine_tag, write_profile_fragment

    spec = ModelSpec.from_json(Path(args.model).read_text())
    sizes = [int(b) for b in args.batches.split(",")]
    table = bench_s_part(spec, sizes, args.repetitions, args.seed)
    r = bench_r_part(spec, args.r_batch, args.r_length, args.repetitions,
                     StorageFormat(args.storage), args.seed)
    tag = machine_tag()
    profile = PerfProfile(table, r, args.capacity, tag)
    if args.fragment:
        write_profile_fragment(args.fragment, table, tag)
    doc = profile.to_dict()
    doc["metadata"] = {"timing_measurement": True, "deterministic": False,
                       "model": spec.to_dict(), "repetitions": args.repetitions}
    if args.out:
        profile.save(args.out)
    print(json.dumps(doc, indent=2, sort_keys=True))
    return 0


def cmd_serve(args) -> int:
    from splitdecode.workers import run_r_worker, stats_json

    listen = args.listen or os.environ.get(LISTEN_ENV)
    if not listen:
        raise UsageError(f"serve: --listen is required (or set {LISTEN_ENV})")

    def announce(addr: str) -> None:
        print(f"listening {addr}", flush=True)

    stats = run_r_worker(listen, args.capacity, announce=announce)
    print(stats_json(stats), flush=True)
    return 0


def cmd_drive(args) -> int:
    from splitdecode.workers import DriveConfig, drive_benchmark, run_s_worker

    spec = ModelSpec.from_json(Path(args.model).read_text())
    sched = json.loads(Path(args.schedule).read_text())
    allowed = {"kind", "B", "S", "F", "w_lim", "max_sequences", "mode", "groups", "pipelined",
               "storage"}
    extra = set(sched) - allowed
    if extra:
        raise ConfigError(f"unknown schedule keys {sorted(extra)}; expected {sorted(allowed)}")
    params = ScheduleParams(sched.get("kind", "large-batch"), int(sched.get("B", 8)),
                            int(sched.get("S", 32)), sched.get("F"), sched.get("w_lim"))
    params.validate()
    config = DriveConfig(
        workers=[w for w in args.workers.split(",") if w], model=spec, seed=args.seed,
        schedule=params.kind, batch=params.B, target_length=params.S, interval=params.F,
        w_lim=params.w_lim, steps=args.steps, mode=sched.get("mode", "by-sequence"),
        groups=sched.get("groups"), pipelined=bool(sched.get("pipelined", True)) and not args.no_pipeline,
        timeout=args.timeout, storage=sched.get("storage", "single"),
        max_sequences=sched.get("max_sequences"))
    if args.benchmark:
        report = drive_benchmark(config)
        report["metadata"] = {"timing_measurement": True}
        _write_json(report, args.report)
        return 0
    tr, traces, stats = run_s_worker(config)
    emit_report(traces, args.out)
    if args.transcript:
        with open(args.transcript, "w", newline="") as fh:
            w = csv.writer(fh, lineterminator="\n")
            w.writerow(("sequence", "position", "token"))
            w.writerows(tr.rows())
    _write_json({"worker_stats": stats, "steps": len(traces),
                 "tokens": sum(len(v) for v in tr.tokens.values()),
                 "metadata": {"timing_measurement": True}}, args.report)
    return 0


def build_parser() -> argparse.ArgumentParser:
    p = _Parser(prog="splitdecode", description="Split S-Part/R-Part decoding toolkit.")
    p.add_argument("--seed", type=int, default=0, help="seed for weights and inputs (default 0)")
    p.add_argument("--json-logs", action="store_true", help="emit log records as JSON lines")
    p.add_argument("--log-level", default="WARNING", help="logging level (default WARNING)")
    sub = p.add_subparsers(dest="command", metavar="{plan,simulate,bench,serve,drive}",
                           parser_class=_Parser)

    sp = sub.add_parser("plan", help="choose batch size and R-worker count from a profile")
    sp.add_argument("--profile", required=True, help="PerfProfile JSON")
    sp.add_argument("--layers", type=int, required=True, help="number of layers N")
    sp.add_argument("--seq", type=int, required=True, help="target sequence length S")
    sp.add_argument("--latency", type=float, default=None,
                    help="per-sequence latency budget in seconds (omit for the efficiency knee)")
    sp.add_argument("--candidates", default=None, help="comma-separated batch sizes to consider")
    sp.add_argument("--knee", type=float, default=0.10, help="gain-per-doubling knee (0.10)")
    sp.add_argument("--tolerance", type=float, default=0.15, help="balance tolerance (0.15)")
    sp.add_argument("--out", default=None, help="also write the plan JSON here")
    sp.set_defaults(func=cmd_plan)

    ss = sub.add_parser("simulate", help="run the pipeline simulator on a scenario")
    ss.add_argument("--scenario", required=True, help="scenario JSON")
    ss.add_argument("--out", default=None, help="trace CSV path")
    ss.add_argument("--summary", default=None, help="summary JSON path")
    ss.set_defaults(func=cmd_simulate)

    sb = sub.add_parser("bench", help="measure T(B) and R on this machine (timing, nondeterministic)")
    sb.add_argument("--model", required=True, help="ModelSpec JSON")
    sb.add_argument("--batches", default="1,2,4,8,16,32,64", help="comma-separated batch sizes")
    sb.add_argument("--repetitions", type=int, default=5, help="timed repetitions per point")
    sb.add_argument("--r-batch", type=int, default=16, help="sequences for the R-Part bench")
    sb.add_argument("--r-length", type=int, default=256, help="cached length for the R-Part bench")
    sb.add_argument("--storage", default="single", choices=("single", "half", "int8-scaled"))
    sb.add_argument("--capacity", type=int, default=1 << 20, help="KV capacity C in tokens")
    sb.add_argument("--fragment", default=None, help="write T(B) rows as a CSV fragment")
    sb.add_argument("--out", default=None, help="write the PerfProfile JSON here")
    sb.set_defaults(func=cmd_bench)

    sv = sub.add_parser("serve", help="run an R-worker until SHUTDOWN")
    sv.add_argument("--listen", default=None,
                    help=f"host:port to bind, port 0 picks one (or set {LISTEN_ENV})")
    sv.add_argument("--capacity", type=int, required=True, help="KV capacity C in tokens")
    sv.set_defaults(func=cmd_serve)

    sd = sub.add_parser("drive", help="run the S-worker against live R-workers")
    sd.add_argument("--workers", required=True, help="comma-separated R-worker host:port list")
    sd.add_argument("--model", required=True, help="ModelSpec JSON")
    sd.add_argument("--schedule", required=True,
                    help="schedule JSON: kind, B, S, F, w_lim, mode, groups, pipelined")
    sd.add_argument("--steps", type=int, required=True, help="decode steps to run")
    sd.add_argument("--out", default="trace.csv", help="StepTrace CSV path")
    sd.add_argument("--transcript", default=None, help="transcript CSV path")
    sd.add_argument("--report", default=None, help="stats/benchmark JSON path")
    sd.add_argument("--benchmark", action="store_true",
                    help="report throughput and latency percentiles instead of a trace")
    sd.add_argument("--no-pipeline", action="store_true", help="disable the A/B interleave")
    sd.add_argument("--timeout", type=float, default=30.0, help="per-reply timeout in seconds")
    sd.set_defaults(func=cmd_drive)
    return p


class _JsonFormatter(logging.Formatter):
    def format(self, record: logging.LogRecord) -> str:
        return json.dumps({"level": record.levelname, "logger": record.name,
                           "message": record.getMessage(), "time": record.created})


def _setup_logging(json_logs: bool, level: str) -> None:
    handler = logging.StreamHandler(sys.stderr)
    if json_logs:
        handler.setFormatter(_JsonFormatter())
    root = logging.getLogger()
    root.handlers[:] = [handler]
    root.setLevel(level.upper())


def main(argv: Sequence[str] | None = None) -> int:
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except SystemExit as exc:  # --help
        return int(exc.code or 0)
    if args.command is None:
        parser.print_help(sys.stderr)
        return 1
    _setup_logging(args.json_logs, args.log_level)
    try:
        return args.func(args)
    except UsageError as exc:
        print(exc, file=sys.stderr)
        return 1
    except (ConfigError, InfeasiblePlan, OSError, RuntimeError, ValueError, KeyError) as exc:
        print(f"error: {exc}", file=sys.stderr)
        return 2


if __name__ == "__main__":
    sys.exit(main())
