"""Step-level simulator of the two-stage S/R token pipeline.

Each decode step costs ``s`` on the S-worker and ``r`` on the R-workers. The
batch is split into two mini-batches that alternate between the stages, so
in steady state a step takes ``max(s, r)`` and the faster stage idles for the
difference. Filling the pipeline exposes half of the S-stage on the first
step; draining it exposes half of the R-stage on the last. Without
pipelining a step takes ``s + r``.
"""

from __future__ import annotations

import math
import statistics
from collections.abc import Callable, Iterable
from dataclasses import asdict, dataclass, field

from splitdecode.core import ConfigError, ModelSpec
from splitdecode.planner import PerfProfile
from splitdecode.scheduler import (
    FixedIntervalSchedule,
    LargeBatchSchedule,
    StepPlan,
)
from splitdecode.transport import estimate_wire_bytes


def _zero(_: int) -> float:
    return 0.0


@dataclass
class LatencyModel:
    """Stage costs per decode step (all layers), in seconds.

    ``r_rate`` is the seconds-per-token-position slope when ``r_part`` is
    linear in load (after dividing by worker count and applying skew); it is
    ``None`` for arbitrary callables, which closed-form analysis refuses.
    """

    s_part: Callable[[int], float]
    r_part: Callable[[int], float]
    transmit: Callable[[int], float] = _zero
    startup_overhead: float = 0.0
    exposed_fraction: float = 0.5
    r_rate: float | None = None
    s_constant: float | None = None

    @classmethod
    def linear(cls, s_seconds: float, r_per_token: float, workers: int = 1, skew: float = 1.0,
               transmit_per_seq: float = 0.0, transmit_fixed: float = 0.0,
               startup_overhead: float = 0.0, exposed_fraction: float = 0.5) -> LatencyModel:
        """Constant S-stage and an R-stage linear in load."""
        if s_seconds < 0 or r_per_token < 0 or workers < 1:
            raise ConfigError("latencies must be non-negative and workers >= 1")
        rate = r_per_token * skew / workers

        def transmit(b: int) -> float:
            return transmit_fixed + transmit_per_seq * b if b else 0.0

        return cls(lambda b: s_seconds, lambda load: rate * load, transmit,
                   startup_overhead, exposed_fraction, r_rate=rate, s_constant=s_seconds)

    @classmethod
    def from_profile(cls, profile: PerfProfile, num_layers: int, workers: int,
                     skew: float = 1.0, spec: ModelSpec | None = None,
                     link_bytes_per_s: float | None = None, precision: str = "half",
                     startup_overhead: float = 0.0, exposed_fraction: float = 0.5) -> LatencyModel:
        """Costs from measured ``T(B)`` and ``R``; transmit from wire size over a link rate."""
        rate = num_layers * profile.r_per_token * skew / workers
        lo = profile.batch_sizes[0]

        def s_part(b: int) -> float:
            return num_layers * profile.t_of(max(b, lo)) if b else 0.0

        transmit = _zero
        if spec is not None and link_bytes_per_s:
            def transmit(b: int) -> float:
                return num_layers * estimate_wire_bytes(spec, b, precision) / link_bytes_per_s

        return cls(s_part, lambda load: rate * load, transmit, startup_overhead,
                   exposed_fraction, r_rate=rate)


@dataclass
class StepTrace:
    step: int
    s_latency: float
    r_latency: float
    overall_latency: float
    s_idle: float
    r_idle: float
    active_load: int
    batch_size: int

    def as_row(self) -> dict:
        return asdict(self)


@dataclass
class SimResult:
    traces: list[StepTrace]
    warnings: list[str] = field(default_factory=list)

    def __iter__(self):
        return iter(self.traces)

    def __len__(self) -> int:
        return len(self.traces)

    def __getitem__(self, i):
        return self.traces[i]


def simulate(model: LatencyModel, schedule: Iterable[StepPlan], horizon: int,
             pipelined: bool = True, warmup: int = 0) -> SimResult:
    """Trace ``horizon`` steps of ``schedule`` through the pipeline model."""
    warnings = []
    if horizon < warmup:
        warnings.append(f"horizon {horizon} shorter than warmup {warmup}")
    traces = []
    plans = iter(schedule)
    for i in range(horizon):
        plan = next(plans)
        b, load = plan.batch_size, plan.total_load
        s = model.s_part(b) if b else 0.0
        r = model.r_part(load) if b else 0.0
        overhead = (model.exposed_fraction * model.transmit(b) + model.startup_overhead) if b else 0.0
        if pipelined:
            # only half of the faster stage is ever exposed: the S-fill of
            # the first mini-batch when R dominates, the R-drain otherwise
            core = max(s, r)
            if i == 0 and s < r:
                core += 0.5 * s
            if i == horizon - 1 and r <= s:
                core += 0.5 * r
        else:
            core = s + r
        overall = core + overhead
        traces.append(StepTrace(plan.step, s, r, overall, overall - overhead - s,
                                overall - overhead - r, load, b))
    return SimResult(traces, warnings)


def ideal_savings(model: LatencyModel, B: int, S: int) -> tuple[float, float]:
    """Closed-form (total latency ratio, peak latency ratio), stabilized vs large batch.

    With constant S-stage ``s`` and an R-stage rising linearly to ``c*s`` over
    a large batch's life, the large-batch total is ``s*S*(c/2 + 1/(2c))`` for
    ``c > 1`` (``s*S`` otherwise) and its peak is ``max(s, c*s)``. Spreading
    the same R work evenly gives a flat ``max(s, c*s/2)``.
    """
    if model.r_rate is None or model.s_constant is None:
        raise ConfigError("closed form needs a constant S-stage and a linear R-stage")
    s = model.s_constant
    if s <= 0:
        raise ConfigError("S-stage latency must be positive")
    c = model.r_part(B * S) / s
    large_total = S * s * (c / 2 + 1 / (2 * c)) if c > 1 else S * s
    stable = max(s, c * s / 2)
    return stable * S / large_total, stable / max(s, c * s)


@dataclass
class ScheduleComparison:
    peak_ratio: float
    total_ratio: float
    large_idle: tuple[float, float]
    stable_idle: tuple[float, float]
    plateau: float
    plateau_spread: float
    work_large: int
    work_stable: int
    large: SimResult
    stable: SimResult

    def summary(self) -> dict:
        return {
            "peak_ratio": self.peak_ratio,
            "total_ratio": self.total_ratio,
            "peak_saving": 1 - self.peak_ratio,
            "total_saving": 1 - self.total_ratio,
            "large_idle_fraction": {"s": self.large_idle[0], "r": self.large_idle[1]},
            "stable_idle_fraction": {"s": self.stable_idle[0], "r": self.stable_idle[1]},
            "plateau_latency": self.plateau,
            "plateau_spread": self.plateau_spread,
            "work": {"large": self.work_large, "stable": self.work_stable},
        }


def _idle_fractions(traces: list[StepTrace]) -> tuple[float, float]:
    total = sum(t.overall_latency for t in traces)
    if total == 0:
        return 0.0, 0.0
    return sum(t.s_idle for t in traces) / total, sum(t.r_idle for t in traces) / total


def compare_schedules(model: LatencyModel, B: int, S: int, F: int, waves: int = 4,
                      pipelined: bool = True) -> ScheduleComparison:
    """Large-batch vs fixed-interval admission over a steady-state window.

    Both run ``S`` warmup steps, then a window of ``waves * S`` steps in which
    the large-batch schedule completes ``waves`` whole batches and the
    stabilized schedule is periodic; both windows carry the same work.
    """
    if S % F:
        raise ConfigError(f"S ({S}) must be divisible by F ({F})")
    horizon = S + waves * S + 1  # the extra step absorbs the drain term
    window = slice(S, S + waves * S)
    large = simulate(model, LargeBatchSchedule(B, S), horizon, pipelined, warmup=S)
    stable = simulate(model, FixedIntervalSchedule(B, S, F), horizon, pipelined, warmup=S)
    lw, sw = large.traces[window], stable.traces[window]
    lat = [t.overall_latency for t in sw]
    plateau = statistics.median(lat)
    spread = max(abs(x - plateau) for x in lat) / plateau if plateau else 0.0
    peak_l = max(t.overall_latency for t in lw)
    total_l = math.fsum(t.overall_latency for t in lw)
    return ScheduleComparison(
        peak_ratio=max(lat) / peak_l if peak_l else 1.0,
        total_ratio=math.fsum(lat) / total_l if total_l else 1.0,
        large_idle=_idle_fractions(lw),
        stable_idle=_idle_fractions(sw),
        plateau=plateau,
        plateau_spread=spread,
        work_large=sum(t.active_load for t in lw),
        work_stable=sum(t.active_load for t in sw),
        large=large,
        stable=stable,
    )


def canonical_model(s_seconds: float = 1e-3, B: int = 64, S: int = 1024,
                    crossing: float = 2.0) -> LatencyModel:
    """R-stage reaching ``crossing * s`` at a full large batch; 2.0 crosses at mid-sequence."""
    return LatencyModel.linear(s_seconds, crossing * s_seconds / (B * S))
