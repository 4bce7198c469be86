"""Sequence admission: fixed-interval micro-batching and load-limited admission.

Conventions used throughout:

* A micro-batch started at step ``t`` with target length ``S`` is active on
  steps ``t .. t+S-1``; at step ``tau`` each of its sequences has length
  ``tau - t + 1`` (the token generated at ``tau`` included). ``end = t + S``
  is the first step it is no longer active.
* Load is counted in token positions: the sum of current lengths over active
  sequences. With a shared ``S`` the load only rises between retirements, so
  the peak is always reached on some batch's last active step ``end - 1``.
  ``W[i]`` is the load on that step for batch ``i``; a batch admitted at
  ``t < end[i]`` adds ``(end[i] - t) * m`` to it.
"""

from __future__ import annotations

import csv
import itertools
from collections.abc import Iterator
from dataclasses import dataclass, field
from fractions import Fraction
from pathlib import Path

from splitdecode.core import ConfigError


class LoadLimitError(ValueError):
    """Admission would push a tracked end-step load above the limit."""


@dataclass(frozen=True)
class MicroBatch:
    id: int
    size: int
    start: int
    target_length: int
    first_seq: int = 0

    def __post_init__(self) -> None:
        if self.size < 1 or self.target_length < 1 or self.start < 0:
            raise ConfigError(f"invalid micro-batch {self}")

    @property
    def end(self) -> int:
        return self.start + self.target_length

    def active_at(self, step: int) -> bool:
        return self.start <= step < self.end

    def length_at(self, step: int) -> int:
        return step - self.start + 1

    @property
    def sequence_ids(self) -> range:
        return range(self.first_seq, self.first_seq + self.size)


def micro_batch_size(B: int, F: int, S: int) -> int:
    """``M = B*F/S`` rounded down, never below one."""
    if min(B, F, S) < 1:
        raise ConfigError("B, F and S must be >= 1")
    if B * F < S:
        raise ConfigError(f"interval too short for target batch: B*F = {B * F} < S = {S}")
    return max(1, B * F // S)


def micro_batch_sizes(B: int, F: int, S: int) -> Iterator[int]:
    """Sizes for consecutive intervals whose running mean tracks ``B*F/S`` exactly.

    The k-th size is ``floor((k+1)BF/S) - floor(kBF/S)``: the rounded-down
    ``M`` plus an occasional extra sequence.
    """
    micro_batch_size(B, F, S)
    for k in itertools.count():
        yield (k + 1) * B * F // S - k * B * F // S


def peak_load_fixed_interval(B: int, S: int, F: int) -> int | Fraction:
    """Peak total load ``B(S+F)/2`` of the fixed-interval schedule (exact)."""
    if min(B, S, F) < 1:
        raise ConfigError("B, S and F must be >= 1")
    if S % F:
        raise ConfigError(f"S ({S}) must be divisible by F ({F})")
    value = Fraction(B * (S + F), 2)
    return int(value) if value.denominator == 1 else value


def peak_load_large_batch(B: int, S: int) -> int:
    return B * S


@dataclass
class StepPlan:
    step: int
    batches: list[tuple[int, list[int]]]
    total_load: int
    active: list[MicroBatch] = field(default_factory=list)
    admitted: list[MicroBatch] = field(default_factory=list)
    retired: list[MicroBatch] = field(default_factory=list)

    @property
    def batch_size(self) -> int:
        return sum(len(lengths) for _, lengths in self.batches)

    def recomputed_load(self) -> int:
        return sum(sum(lengths) for _, lengths in self.batches)

    def sequences(self) -> list[tuple[int, int]]:
        """``(sequence id, current length)`` for every active sequence."""
        return [(seq, mb.length_at(self.step)) for mb in self.active for seq in mb.sequence_ids]


@dataclass
class LoadTracker:
    """Bookkeeping for load-limited admission; ``w_lim=None`` disables the limit.

    ``M``, ``E`` and ``W`` hold size, end step and end-step load of every
    admitted, not yet retired micro-batch.
    """

    target_length: int
    w_lim: int | None = None
    current_step: int = 0
    M: list[int] = field(default_factory=list)
    E: list[int] = field(default_factory=list)
    W: list[int] = field(default_factory=list)
    batches: list[MicroBatch] = field(default_factory=list)
    next_batch_id: int = 0
    next_seq_id: int = 0

    def __post_init__(self) -> None:
        if self.target_length < 1:
            raise ConfigError("target_length must be >= 1")
        if self.w_lim is not None and self.w_lim < 1:
            raise ConfigError("w_lim must be positive")

    @property
    def last_start(self) -> int:
        return max((b.start for b in self.batches), default=0)

    def _check_length(self, S: int) -> None:
        if S != self.target_length:
            raise ConfigError(f"tracker holds S={self.target_length}; got S={S}")

    def get_earliest_step(self, m: int, S: int) -> int:
        """Earliest start keeping every tracked end-step load within ``w_lim``.

        For batch ``i`` the margin allows a new batch whose length at
        ``E[i] - 1`` is at most ``x = (w_lim - W[i]) // m``, i.e. a start no
        earlier than ``E[i] - x``.
        """
        self._check_length(S)
        r = max(self.current_step, self.last_start)
        if self.w_lim is None:
            return r
        if m * S > self.w_lim:
            raise LoadLimitError(f"micro-batch exceeds load limit: {m}*{S} > {self.w_lim}")
        for w_i, e_i in zip(self.W, self.E):
            x = (self.w_lim - w_i) // m
            r = max(r, e_i - x)
        return r

    def add_micro_batch(self, t: int, m: int, S: int) -> MicroBatch:
        """Admit ``m`` sequences starting at ``t``; rejected atomically on overload."""
        self._check_length(S)
        if m < 1:
            raise ConfigError("micro-batch size must be >= 1")
        if t < self.current_step or t < self.last_start:
            raise ConfigError(
                f"start {t} precedes current step {self.current_step} "
                f"or an earlier admission at {self.last_start}"
            )
        new_w = [w + (e - t) * m if e > t else w for w, e in zip(self.W, self.E)]
        own = m * S
        if self.w_lim is not None:
            over = [w for w in new_w + [own] if w > self.w_lim]
            if over:
                raise LoadLimitError(f"admission at {t} pushes load to {max(over)} > {self.w_lim}")
        mb = MicroBatch(self.next_batch_id, m, t, S, self.next_seq_id)
        self.next_batch_id += 1
        self.next_seq_id += m
        self.W = new_w + [own]
        self.M.append(m)
        self.E.append(t + S)
        self.batches.append(mb)
        return mb

    def load_at(self, step: int) -> int:
        return sum(b.size * b.length_at(step) for b in self.batches if b.active_at(step))

    def retire(self) -> list[MicroBatch]:
        keep = [i for i, e in enumerate(self.E) if e > self.current_step]
        gone = [b for b, e in zip(self.batches, self.E) if e <= self.current_step]
        self.M = [self.M[i] for i in keep]
        self.E = [self.E[i] for i in keep]
        self.W = [self.W[i] for i in keep]
        self.batches = [self.batches[i] for i in keep]
        return gone

    def step(self) -> StepPlan:
        """Plan the current step, then advance and retire batches that just finished."""
        now = self.current_step
        active = [b for b in self.batches if b.active_at(now)]
        batches = [(b.id, [b.length_at(now)] * b.size) for b in active]
        plan = StepPlan(now, batches, self.load_at(now), active=active)
        self.current_step += 1
        plan.retired = self.retire()
        return plan


class Schedule:
    """An admission policy driving a :class:`LoadTracker`; iterate for step plans."""

    def __init__(self, S: int, w_lim: int | None = None, max_sequences: int | None = None) -> None:
        self.S = S
        self.tracker = LoadTracker(S, w_lim)
        self.max_sequences = max_sequences

    def _room(self, m: int) -> int:
        if self.max_sequences is None:
            return m
        return max(0, min(m, self.max_sequences - self.tracker.next_seq_id))

    def admit(self) -> list[MicroBatch]:
        raise NotImplementedError

    def next_plan(self) -> StepPlan:
        admitted = self.admit()
        plan = self.tracker.step()
        plan.admitted = admitted
        return plan

    def __iter__(self) -> Iterator[StepPlan]:
        while True:
            yield self.next_plan()

    def plans(self, horizon: int) -> list[StepPlan]:
        return [self.next_plan() for _ in range(horizon)]


class LargeBatchSchedule(Schedule):
    """``B`` sequences start together; the next wave starts when they finish."""

    def __init__(self, B: int, S: int, max_sequences: int | None = None) -> None:
        super().__init__(S, None, max_sequences)
        self.B = B

    def admit(self) -> list[MicroBatch]:
        t = self.tracker.current_step
        m = self._room(self.B)
        if t % self.S or m == 0:
            return []
        return [self.tracker.add_micro_batch(t, m, self.S)]


class FixedIntervalSchedule(Schedule):
    """Micro-batches of about ``B*F/S`` sequences every ``F`` steps."""

    def __init__(self, B: int, S: int, F: int, max_sequences: int | None = None) -> None:
        super().__init__(S, None, max_sequences)
        self.F = F
        self._sizes = micro_batch_sizes(B, F, S)

    def admit(self) -> list[MicroBatch]:
        t = self.tracker.current_step
        if t % self.F:
            return []
        m = self._room(next(self._sizes))
        return [self.tracker.add_micro_batch(t, m, self.S)] if m else []


class LoadControlSchedule(Schedule):
    """Greedy admission of size-``m`` micro-batches at the earliest feasible step.

    ``limit_at(step)`` supplies the load limit in force at each step.
    """

    def __init__(self, m: int, S: int, limit_at, max_sequences: int | None = None) -> None:
        super().__init__(S, limit_at(0), max_sequences)
        self.m = m
        self.limit_at = limit_at

    def admit(self) -> list[MicroBatch]:
        tr = self.tracker
        tr.w_lim = self.limit_at(tr.current_step)
        out = []
        while (m := self._room(self.m)) and tr.get_earliest_step(m, self.S) <= tr.current_step:
            out.append(tr.add_micro_batch(tr.current_step, m, self.S))
        return out


def staggered_ramp(B: int, S: int, F: int):
    """Load limit for the ramped cold start.

    The limit climbs in steps of ``m*(S - k*F)`` at ``t = k*F``, the end-load
    envelope of batches staggered ``F`` apart, and is capped at ``B(S+F)/2``.
    A linear ramp admits later than every ``F`` steps during warmup because the
    envelope is concave, so the stepped form is used.
    """
    m = micro_batch_size(B, F, S)
    cap = int(peak_load_fixed_interval(B, S, F))

    def limit_at(step: int) -> int:
        k = min(step // F, S // F - 1)
        return min(cap, max(m * S, m * sum(S - j * F for j in range(k + 1))))

    return limit_at


def constant_limit(w_lim: int):
    return lambda step: w_lim


def make_schedule(kind: str, B: int, S: int, F: int | None = None, w_lim: int | None = None,
                  max_sequences: int | None = None) -> Schedule:
    if kind == "large-batch":
        return LargeBatchSchedule(B, S, max_sequences)
    if F is None:
        raise ConfigError(f"schedule {kind!r} needs F")
    if kind in ("fixed-interval", "stabilized"):
        if S % F:
            raise ConfigError(f"S ({S}) must be divisible by F ({F}) for fixed-interval admission")
        return FixedIntervalSchedule(B, S, F, max_sequences)
    if kind == "ramped-limit":
        return LoadControlSchedule(micro_batch_size(B, F, S), S, staggered_ramp(B, S, F),
                                   max_sequences)
    if kind == "load-control":
        if w_lim is None:
            raise ConfigError("load-control schedule needs w_lim")
        return LoadControlSchedule(micro_batch_size(B, F, S), S, constant_limit(w_lim),
                                   max_sequences)
    raise ConfigError(f"unknown schedule kind {kind!r}")


def cold_start_schedule(B: int, S: int, F: int, mode: str,
                        horizon: int | None = None) -> list[tuple[int, int]]:
    """Admissions ``(t, m)`` over the first ``horizon`` steps (default ``2S``)."""
    if mode not in ("fixed-interval", "ramped-limit"):
        raise ConfigError(f"invalid cold-start mode {mode!r}")
    sched = make_schedule(mode, B, S, F)
    out = []
    for plan in sched.plans(2 * S if horizon is None else horizon):
        out.extend((mb.start, mb.size) for mb in plan.admitted)
    return out


def simulate_waits(arrivals: list[int], interval: int, slot_size: int) -> list[int]:
    """FIFO wait (in steps) of each arrival when ``slot_size`` starts open every ``interval``."""
    waits: list[int] = []
    slot, used = -1, 0
    for a in sorted(arrivals):
        earliest = -(-a // interval) * interval
        if earliest > slot:
            slot, used = earliest, 0
        if used == slot_size:
            slot, used = slot + interval, 0
        waits.append(slot - a)
        used += 1
    return waits


def write_schedule_trace(path: str | Path, plans: list[StepPlan]) -> None:
    """CSV ``step, active_batches, total_load, admissions``."""
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["step", "active_batches", "total_load", "admissions"])
        for p in plans:
            adm = ";".join(f"{mb.id}:{mb.size}" for mb in p.admitted)
            w.writerow([p.step, len(p.active), p.total_load, adm])
