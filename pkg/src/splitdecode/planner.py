"""Capacity planning: pick batch size B and R-worker count P from measured costs.

Inputs are a per-block S-Part latency table ``T(B)``, the per-token,
per-layer R-Part cost ``R`` of one worker, and a worker's KV capacity ``C``
in tokens. With the load-stabilized schedule the average sequence is ``S/2``
long, which gives the three rules used here:

    sequence latency   2 * N * S * T(B) <= L
    memory             B * S / 2 <= C * P
    balance            B * S * R / (2 * P) ~= T(B)
"""

from __future__ import annotations

import bisect
import json
import math
from dataclasses import asdict, dataclass, field
from pathlib import Path

from splitdecode.core import ConfigError

DEFAULT_KNEE = 0.10
DEFAULT_BALANCE_TOLERANCE = 0.15


class InfeasiblePlan(ValueError):
    def __init__(self, message: str, tightest_batch: int | None = None) -> None:
        super().__init__(message)
        self.tightest_batch = tightest_batch


@dataclass(frozen=True)
class PerfProfile:
    t_table: dict[int, float]
    r_per_token: float
    capacity_c: int
    machine_tag: str = "unknown"

    def __post_init__(self) -> None:
        if not self.t_table:
            raise ConfigError("t_table must be nonempty")
        table = {int(b): float(t) for b, t in self.t_table.items()}
        if any(b < 1 for b in table) or any(t <= 0 for t in table.values()):
            raise ConfigError("t_table needs positive batch sizes and latencies")
        if self.r_per_token < 0 or self.capacity_c < 1:
            raise ConfigError("r_per_token must be >= 0 and capacity_c >= 1")
        object.__setattr__(self, "t_table", dict(sorted(table.items())))

    @property
    def batch_sizes(self) -> list[int]:
        return list(self.t_table)

    def t_of(self, batch: float) -> float:
        """``T(B)``, linearly interpolated between measured points; no extrapolation."""
        sizes = self.batch_sizes
        if batch < sizes[0] or batch > sizes[-1]:
            raise ConfigError(f"batch {batch} outside measured range [{sizes[0]}, {sizes[-1]}]")
        i = bisect.bisect_left(sizes, batch)
        if sizes[i] == batch:
            return self.t_table[sizes[i]]
        b0, b1 = sizes[i - 1], sizes[i]
        t0, t1 = self.t_table[b0], self.t_table[b1]
        return t0 + (t1 - t0) * (batch - b0) / (b1 - b0)

    def to_dict(self) -> dict:
        return {"t_table": {str(b): t for b, t in self.t_table.items()},
                "r_per_token": self.r_per_token, "capacity_c": self.capacity_c,
                "machine_tag": self.machine_tag}

    @classmethod
    def from_dict(cls, data: dict) -> PerfProfile:
        return cls({int(b): float(t) for b, t in data["t_table"].items()},
                   float(data["r_per_token"]), int(data["capacity_c"]),
                   data.get("machine_tag", "unknown"))

    def save(self, path: str | Path) -> None:
        Path(path).write_text(json.dumps(self.to_dict(), indent=2) + "\n")

    @classmethod
    def load(cls, path: str | Path) -> PerfProfile:
        return cls.from_dict(json.loads(Path(path).read_text()))


@dataclass(frozen=True)
class PlanRequest:
    num_layers: int
    target_length: int
    latency_budget: float | None = None
    candidates: tuple[int, ...] | None = None
    knee: float = DEFAULT_KNEE
    balance_tolerance: float = DEFAULT_BALANCE_TOLERANCE

    def __post_init__(self) -> None:
        if self.num_layers < 1 or self.target_length < 1:
            raise ConfigError("num_layers and target_length must be >= 1")
        if self.latency_budget is not None and self.latency_budget <= 0:
            raise ConfigError("latency budget must be positive")


@dataclass
class HardwarePlan:
    batch_size: int
    worker_count: int
    predicted_sequence_latency: float
    predicted_efficiency: float
    binding_constraint: str
    worker_estimate: float = 0.0
    balance_residual: float = 0.0
    memory_feasible: bool = True
    notes: list[str] = field(default_factory=list)

    def to_dict(self) -> dict:
        return asdict(self)


def gpu_efficiency(profile: PerfProfile, batch: float) -> float:
    """``E(B) = B / T(B)``, tokens per second per block."""
    if batch < profile.batch_sizes[0]:
        raise ConfigError(f"batch {batch} below measured minimum {profile.batch_sizes[0]}")
    return batch / profile.t_of(batch)


def sequence_latency(profile: PerfProfile, batch: int, num_layers: int, target_length: int) -> float:
    return 2 * num_layers * target_length * profile.t_of(batch)


def _candidates(profile: PerfProfile, request: PlanRequest) -> list[int]:
    cands = sorted(request.candidates) if request.candidates else profile.batch_sizes
    lo, hi = profile.batch_sizes[0], profile.batch_sizes[-1]
    cands = [b for b in cands if lo <= b <= hi]
    if not cands:
        raise ConfigError("no candidate batch size within the measured range")
    return cands


def gain_per_doubling(profile: PerfProfile, b0: int, b1: int) -> float:
    """Relative throughput gain per doubling of B between two batch sizes."""
    ratio = gpu_efficiency(profile, b1) / gpu_efficiency(profile, b0)
    return ratio ** (1.0 / math.log2(b1 / b0)) - 1.0


def plan_batch_size(profile: PerfProfile, request: PlanRequest) -> tuple[int, str]:
    """Return ``(B, binding constraint)``.

    With a latency budget: the largest candidate meeting it. Without: the
    smallest candidate past which throughput gains less than ``knee`` per
    doubling (the largest candidate if the curve never flattens).
    """
    cands = _candidates(profile, request)
    if request.latency_budget is not None:
        feasible = [b for b in cands if sequence_latency(
            profile, b, request.num_layers, request.target_length) <= request.latency_budget]
        if not feasible:
            need = sequence_latency(profile, cands[0], request.num_layers, request.target_length)
            raise InfeasiblePlan(
                f"latency budget {request.latency_budget:g}s below {need:g}s needed at B={cands[0]}",
                tightest_batch=cands[0])
        return feasible[-1], "latency"
    for b0, b1 in zip(cands, cands[1:]):
        if gain_per_doubling(profile, b0, b1) < request.knee:
            return b0, "efficiency-knee"
    return cands[-1], "efficiency-knee"


def worker_estimate(profile: PerfProfile, batch: int, target_length: int) -> float:
    """Real-valued ``B*S*R / (2*T(B))``."""
    return batch * target_length * profile.r_per_token / (2 * profile.t_of(batch))


def plan_worker_count(profile: PerfProfile, batch: int, target_length: int) -> tuple[int, float]:
    """Smallest integer P whose R-stage time does not exceed T(B), and the raw estimate."""
    est = worker_estimate(profile, batch, target_length)
    # tolerate float noise when the estimate is an exact integer
    p = math.ceil(est - 1e-9 * max(1.0, est))
    return max(1, p), est


def check_memory(batch: int, target_length: int, capacity: int, workers: int) -> tuple[bool, int]:
    """``(B*S/2 <= C*P, minimal P restoring feasibility)``."""
    if min(batch, target_length, capacity, workers) < 1:
        raise ConfigError("all arguments must be positive")
    ok = batch * target_length <= 2 * capacity * workers
    need = -(-batch * target_length // (2 * capacity))
    return ok, max(workers, need) if not ok else workers


def r_stage_latency(profile: PerfProfile, batch: int, target_length: int, workers: int) -> float:
    return batch * target_length * profile.r_per_token / (2 * workers)


def balance_residual(s_stage: float, r_stage: float) -> float:
    """``|r - s| / s`` between per-block stage latencies."""
    return abs(r_stage - s_stage) / s_stage


def balance_check(profile: PerfProfile, batch: int, target_length: int, workers: int,
                  tolerance: float = DEFAULT_BALANCE_TOLERANCE) -> tuple[bool, float]:
    res = balance_residual(profile.t_of(batch),
                           r_stage_latency(profile, batch, target_length, workers))
    return res <= tolerance, res


def plan(profile: PerfProfile, request: PlanRequest) -> HardwarePlan:
    batch, binding = plan_batch_size(profile, request)
    workers, est = plan_worker_count(profile, batch, request.target_length)
    ok, need = check_memory(batch, request.target_length, profile.capacity_c, workers)
    notes = []
    if not ok:
        notes.append(f"memory raised P from {workers} to {need}")
        workers, binding = need, "memory"
    _, residual = balance_check(profile, batch, request.target_length, workers,
                                request.balance_tolerance)
    return HardwarePlan(
        batch_size=batch,
        worker_count=workers,
        predicted_sequence_latency=sequence_latency(profile, batch, request.num_layers,
                                                    request.target_length),
        predicted_efficiency=gpu_efficiency(profile, batch),
        binding_constraint=binding,
        worker_estimate=est,
        balance_residual=residual,
        memory_feasible=True,
        notes=notes,
    )


def format_plan(p: HardwarePlan) -> str:
    rows = [
        ("batch size B", str(p.batch_size)),
        ("workers P", f"{p.worker_count} (estimate {p.worker_estimate:.3f})"),
        ("sequence latency", f"{p.predicted_sequence_latency:.6g} s"),
        ("efficiency E(B)", f"{p.predicted_efficiency:.6g} tok/s/block"),
        ("balance residual", f"{100 * p.balance_residual:.1f} %"),
        ("binding constraint", p.binding_constraint),
    ]
    width = max(len(k) for k, _ in rows)
    return "\n".join(f"{k:<{width}}  {v}" for k, v in rows + [("note", n) for n in p.notes])
