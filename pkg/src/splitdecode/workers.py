"""Live S-worker and R-worker runtimes over TCP.

The S-worker holds the weights and runs the dense math; R-workers hold KV
shards and answer one QKV_BATCH with one O_BATCH. With pipelining on, the
batch is split into mini-batches A and B and, per layer, the S-worker
computes one while the R-workers attend over the other::

    send A0 | send B0, recv A0 | send A1, recv B0 | send B1, recv A1 | ...

``recv`` is a barrier over every shard that received that mini-batch's
layer; finish_block never runs on partial attention output.
"""

from __future__ import annotations

import json
import logging
import math
import queue
import socket
import statistics
import subprocess
import sys
import threading
import time
from collections.abc import Callable, Sequence
from dataclasses import dataclass, field

import numpy as np

from splitdecode.attention import CapacityExceeded, KvShard, StorageFormat
from splitdecode.core import ConfigError, ModelSpec, WeightSet, seed_random_weights
from splitdecode.dense import embed, finish_block, greedy, logits, project_qkv
from splitdecode.pipesim import StepTrace
from splitdecode.scheduler import Schedule, make_schedule
from splitdecode.transport import (
    BY_SEQUENCE,
    Config,
    Connection,
    DropSeq,
    Error,
    ErrorCode,
    Hello,
    OBatch,
    ProtocolError,
    QkvBatch,
    ShardMap,
    Shutdown,
    assign_shards,
    parse_address,
)

log = logging.getLogger(__name__)

DEFAULT_TIMEOUT = 30.0


class RWorkerError(RuntimeError):
    def __init__(self, worker: int, code: int, message: str) -> None:
        super().__init__(f"R-worker {worker} error {code}: {message}")
        self.worker = worker
        self.code = code


# --------------------------------------------------------------------------- R-worker


class RWorker:
    """Message handler around one KV shard; transport-agnostic.

    ``delay`` adds a fixed wait per QKV_BATCH (fault injection in tests).
    """

    def __init__(self, capacity: int, delay: float = 0.0) -> None:
        self.capacity = capacity
        self.delay = delay
        self.shard: KvShard | None = None
        self.precision = "single"
        self.started = time.perf_counter()
        self.busy_seconds = 0.0
        self.tokens_processed = 0
        self.requests = 0
        self.errors = 0

    def stats(self) -> dict:
        wall = time.perf_counter() - self.started
        return {
            "busy_seconds": self.busy_seconds,
            "idle_seconds": max(0.0, wall - self.busy_seconds),
            "wall_seconds": wall,
            "tokens_processed": self.tokens_processed,
            "requests": self.requests,
            "errors": self.errors,
            "token_count": self.shard.token_count if self.shard else 0,
            "missing_drops": self.shard.missing_drops if self.shard else 0,
        }

    def _error(self, code: ErrorCode, message: str) -> Error:
        self.errors += 1
        return Error(int(code), message)

    def handle(self, msg) -> list:
        if isinstance(msg, Hello):
            return [Hello({"role": "r-worker", "capacity": self.capacity})]
        if isinstance(msg, Config):
            try:
                cap = self.capacity if msg.capacity is None else msg.capacity
                self.shard = KvShard.for_spec(msg.model, cap, msg.head_start, msg.head_count,
                                              StorageFormat(msg.storage))
            except (ConfigError, ValueError) as exc:
                return [self._error(ErrorCode.MALFORMED, f"bad config: {exc}")]
            self.precision = msg.wire_precision
            self.started = time.perf_counter()
            self.busy_seconds = 0.0
            return [Config(msg.model, msg.head_start, msg.head_count, msg.storage,
                           msg.wire_precision, cap)]
        if isinstance(msg, QkvBatch):
            return [self._attend(msg)]
        if isinstance(msg, DropSeq):
            if self.shard is not None:
                t0 = time.perf_counter()
                for seq in msg.seq_ids:
                    self.shard.drop_sequence(int(seq))
                self.busy_seconds += time.perf_counter() - t0
            return []
        if isinstance(msg, Shutdown):
            return [Shutdown(self.stats())]
        if isinstance(msg, Error):
            return []
        return [self._error(ErrorCode.UNKNOWN_TYPE, f"unexpected {type(msg).__name__}")]

    def _attend(self, msg: QkvBatch):
        shard = self.shard
        if shard is None:
            return self._error(ErrorCode.NOT_CONFIGURED, "QKV_BATCH before CONFIG")
        t0 = time.perf_counter()
        if (msg.head_start, msg.head_count) != (shard.head_start, shard.head_count):
            return self._error(ErrorCode.MALFORMED, "head range does not match CONFIG")
        if msg.count and msg.q.shape[1] != shard.width:
            return self._error(ErrorCode.MALFORMED, f"vector width {msg.q.shape[1]} != {shard.width}")
        if not 0 <= msg.layer < shard.num_layers:
            return self._error(ErrorCode.MALFORMED, f"layer {msg.layer} out of range")
        seqs = [int(s) for s in msg.seq_ids]
        if len(set(seqs)) != len(seqs):
            return self._error(ErrorCode.MALFORMED, "duplicate sequence in batch")
        for seq, pos in zip(seqs, msg.positions):
            if seq not in shard:
                if pos != 0:
                    return self._error(ErrorCode.UNKNOWN_SEQUENCE, f"unknown sequence {seq}")
            elif shard.length(seq, msg.layer) != pos:
                return self._error(ErrorCode.MALFORMED,
                                   f"sequence {seq} position {pos} != cached "
                                   f"{shard.length(seq, msg.layer)}")
        needed = sum(shard.new_tokens_needed(s, msg.layer) for s in seqs)
        if not shard.has_room(needed):
            return self._error(ErrorCode.CAPACITY_EXCEEDED,
                               f"capacity exceeded: {shard.token_count} + {needed} > {shard.capacity}")
        q = msg.q.astype(np.float32)
        k = msg.k.astype(np.float32)
        v = msg.v.astype(np.float32)
        out = np.empty((msg.count, shard.width), dtype=np.float32)
        try:
            for i, seq in enumerate(seqs):
                shard.append_kv(seq, msg.layer, k[i], v[i])
            for i, seq in enumerate(seqs):
                out[i] = shard.attend_one(seq, msg.layer, q[i])
        except CapacityExceeded as exc:  # pre-checked above; defensive
            return self._error(ErrorCode.CAPACITY_EXCEEDED, str(exc))
        if self.delay:
            time.sleep(self.delay)
        elapsed = time.perf_counter() - t0
        self.busy_seconds += elapsed
        self.tokens_processed += msg.count
        self.requests += 1
        return OBatch(msg.layer, msg.step, msg.head_start, msg.head_count, msg.seq_ids, out,
                      int(elapsed * 1e9))

    def serve(self, conn: Connection) -> dict | None:
        """Answer one connection until SHUTDOWN (returns stats) or EOF (returns None)."""
        while True:
            try:
                msg = conn.recv()
            except ProtocolError as exc:
                if exc.fatal:
                    log.error("fatal protocol error: %s", exc)
                    try:
                        conn.send(self._error(exc.code, str(exc)))
                    except OSError:
                        pass
                    return None
                conn.send(self._error(exc.code, str(exc)))
                continue
            if msg is None:
                return None
            for reply in self.handle(msg):
                conn.send(reply)
                if isinstance(reply, Config):
                    conn.precision = reply.wire_precision
                if isinstance(reply, Shutdown):
                    return reply.stats


def run_r_worker(listen: str, capacity: int, delay: float = 0.0,
                 announce: Callable[[str], None] | None = None,
                 ready: threading.Event | None = None) -> dict:
    """Listen on ``listen`` (port 0 picks one) and serve until a SHUTDOWN arrives."""
    host, port = parse_address(listen)
    server = socket.create_server((host, port))
    bound = f"{host}:{server.getsockname()[1]}"
    if announce is not None:
        announce(bound)
    if ready is not None:
        ready.address = bound  # type: ignore[attr-defined]
        ready.set()
    try:
        while True:
            sock, _ = server.accept()
            sock.setsockopt(socket.IPPROTO_TCP, socket.TCP_NODELAY, 1)
            conn = Connection(sock)
            try:
                stats = RWorker(capacity, delay).serve(conn)
            finally:
                conn.close()
            if stats is not None:
                return stats
    finally:
        server.close()


def start_r_worker_thread(capacity: int, delay: float = 0.0) -> tuple[threading.Thread, str]:
    """In-process R-worker on an ephemeral port (tests, demos)."""
    ready = threading.Event()
    th = threading.Thread(target=run_r_worker, args=("127.0.0.1:0", capacity, delay),
                          kwargs={"ready": ready}, daemon=True)
    th.start()
    if not ready.wait(10):
        raise RuntimeError("R-worker thread did not start")
    return th, ready.address  # type: ignore[attr-defined]


def spawn_r_workers(n: int, capacity: int, timeout: float = 30.0
                    ) -> tuple[list[subprocess.Popen], list[str]]:
    """Start ``n`` R-worker processes via the ``serve`` subcommand."""
    procs, addrs = [], []
    for _ in range(n):
        p = subprocess.Popen(
            [sys.executable, "-m", "splitdecode", "serve", "--listen", "127.0.0.1:0",
             "--capacity", str(capacity)],
            stdout=subprocess.PIPE, text=True)
        procs.append(p)
    deadline = time.monotonic() + timeout
    for p in procs:
        line = p.stdout.readline().strip()
        if not line.startswith("listening "):
            for q in procs:
                q.kill()
            raise RuntimeError(f"R-worker failed to start: {line!r}")
        addrs.append(line.split()[1])
        if time.monotonic() > deadline:
            raise TimeoutError("R-workers did not start in time")
    return procs, addrs


def stop_r_workers(procs: Sequence[subprocess.Popen], timeout: float = 10.0) -> None:
    """Reap spawned R-workers, killing any that outlive ``timeout``."""
    for p in procs:
        try:
            p.wait(timeout)
        except subprocess.TimeoutExpired:
            p.kill()
            p.wait()
        if p.stdout is not None:
            p.stdout.close()


# --------------------------------------------------------------------------- S-worker


@dataclass
class _Pending:
    rows: list[np.ndarray]  # row indices into the mini-batch, per worker
    workers: list[int]


class SWorker:
    """Dense compute plus the two-mini-batch exchange with R-workers.

    Exposes ``decode_step``/``drop``/``close`` like
    :class:`~splitdecode.dense.MonolithicDecoder`, so either can drive a
    generation run.
    """

    def __init__(self, weights: WeightSet, addresses: Sequence[str], mode: str = BY_SEQUENCE,
                 groups: int | None = None, pipelined: bool = True,
                 timeout: float = DEFAULT_TIMEOUT, storage: str = "single",
                 wire_precision: str = "single", capacity: int | None = None,
                 record_events: bool = False) -> None:
        if not addresses:
            raise ConfigError("need at least one R-worker address")
        self.weights = weights
        self.spec = weights.spec
        self.pipelined = pipelined
        self.timeout = timeout
        self.shards: ShardMap = assign_shards([], self.spec.num_heads, len(addresses), mode, groups)
        self.conns = [Connection.connect(a, timeout) for a in addresses]
        self.lengths: dict[int, int] = {}
        self.step_index = 0
        self.events: list[tuple] | None = [] if record_events else None
        self.traces: list[StepTrace] = []
        self.worker_stats: list[dict] = []
        self._inbox: list[queue.Queue] = [queue.Queue() for _ in self.conns]
        for w, conn in enumerate(self.conns):
            conn.send(Hello({"role": "s-worker"}))
            self._expect(conn.recv(), Hello, w)
            hs, hc = self.shards.worker_heads(w)
            conn.send(Config(self.spec, hs, hc, storage, wire_precision, capacity))
            self._expect(conn.recv(), Config, w)
            conn.precision = wire_precision
        for conn in self.conns:
            conn.settimeout(None)
        self._threads = [threading.Thread(target=self._pump, args=(w,), daemon=True)
                         for w in range(len(self.conns))]
        for th in self._threads:
            th.start()
        self._s_busy = 0.0
        self._r_busy = 0.0
        self._closed = False

    @staticmethod
    def _expect(msg, kind, worker: int):
        if isinstance(msg, Error):
            raise RWorkerError(worker, msg.code, msg.message)
        if not isinstance(msg, kind):
            raise ProtocolError(f"worker {worker}: expected {kind.__name__}, got {msg!r}")
        return msg

    def _pump(self, w: int) -> None:
        conn = self.conns[w]
        while True:
            try:
                msg = conn.recv()
            except (OSError, ProtocolError) as exc:
                self._inbox[w].put(exc)
                return
            self._inbox[w].put(msg)
            if msg is None or isinstance(msg, Shutdown):
                return

    def _log(self, *event) -> None:
        if self.events is not None:
            self.events.append(event)

    def _send(self, g: str, layer: int, seq_ids: np.ndarray, x: np.ndarray) -> _Pending:
        t0 = time.perf_counter()
        q, k, v = project_qkv(self.weights, layer, x)
        hd = self.spec.head_dim
        positions = np.array([self.lengths.get(int(s), 0) for s in seq_ids], dtype=np.uint32)
        size = self.shards.group_size
        pending = _Pending([], [])
        messages = []
        for w in range(len(self.conns)):
            hs, hc = self.shards.worker_heads(w)
            rows = np.flatnonzero(seq_ids % size == w % size)
            if len(rows) == 0:
                continue
            cols = slice(hs * hd, (hs + hc) * hd)
            messages.append((w, QkvBatch(layer, self.step_index, hs, hc, seq_ids[rows],
                                         positions[rows], q[rows, cols], k[rows, cols],
                                         v[rows, cols])))
            pending.rows.append(rows)
            pending.workers.append(w)
        self._s_busy += time.perf_counter() - t0
        for w, msg in messages:
            self.conns[w].send(msg)
            self._log("send", g, layer, w)
        return pending

    def _recv(self, g: str, layer: int, pending: _Pending, x: np.ndarray) -> np.ndarray:
        hd = self.spec.head_dim
        o = np.empty_like(x)
        slowest = 0
        for rows, w in zip(pending.rows, pending.workers):
            try:
                msg = self._inbox[w].get(timeout=self.timeout)
            except queue.Empty:
                raise TimeoutError(
                    f"no O_BATCH from R-worker {w} within {self.timeout}s "
                    f"(step {self.step_index}, layer {layer}, mini-batch {g})") from None
            if isinstance(msg, Exception):
                raise msg
            if msg is None:
                raise ConnectionError(f"R-worker {w} closed the connection")
            reply = self._expect(msg, OBatch, w)
            if (reply.layer, reply.step) != (layer, self.step_index % (1 << 32)):
                raise ProtocolError(f"R-worker {w} replied for layer {reply.layer} "
                                    f"step {reply.step}, expected {layer}/{self.step_index}")
            hs, hc = self.shards.worker_heads(w)
            o[np.ix_(rows, np.arange(hs * hd, (hs + hc) * hd))] = reply.o
            slowest = max(slowest, reply.compute_ns)
            self._log("reply", g, layer, w)
        self._r_busy += slowest / 1e9
        t0 = time.perf_counter()
        out = finish_block(self.weights, layer, o, x)
        self._s_busy += time.perf_counter() - t0
        self._log("finish", g, layer)
        return out

    def decode_step(self, seq_ids: Sequence[int], token_ids: Sequence[int]
                    ) -> tuple[np.ndarray, np.ndarray]:
        if len(set(seq_ids)) != len(seq_ids):
            raise ConfigError("duplicate sequence id in batch")
        wall0 = time.perf_counter()
        self._s_busy = self._r_busy = 0.0
        ids = np.asarray(seq_ids, dtype=np.uint64)
        t0 = time.perf_counter()
        x = embed(self.weights, token_ids)
        self._s_busy += time.perf_counter() - t0
        n_layers = self.spec.num_layers
        if self.pipelined and len(ids) >= 2:
            half = len(ids) // 2
            parts = {"A": slice(0, half), "B": slice(half, len(ids))}
            xs = {g: x[s] for g, s in parts.items()}
            idg = {g: ids[s] for g, s in parts.items()}
            pend_a = self._send("A", 0, idg["A"], xs["A"])
            for layer in range(n_layers):
                pend_b = self._send("B", layer, idg["B"], xs["B"])
                xs["A"] = self._recv("A", layer, pend_a, xs["A"])
                if layer + 1 < n_layers:
                    pend_a = self._send("A", layer + 1, idg["A"], xs["A"])
                xs["B"] = self._recv("B", layer, pend_b, xs["B"])
            x = np.concatenate([xs["A"], xs["B"]])
        else:
            for layer in range(n_layers):
                pend = self._send("A", layer, ids, x)
                x = self._recv("A", layer, pend, x)
        t0 = time.perf_counter()
        next_ids = greedy(logits(self.weights, x))
        self._s_busy += time.perf_counter() - t0
        for s in seq_ids:
            self.lengths[int(s)] = self.lengths.get(int(s), 0) + 1
        wall = time.perf_counter() - wall0
        load = sum(self.lengths[int(s)] for s in seq_ids)
        self.traces.append(StepTrace(self.step_index, self._s_busy, self._r_busy, wall,
                                     max(0.0, wall - self._s_busy), max(0.0, wall - self._r_busy),
                                     load, len(seq_ids)))
        self.step_index += 1
        return next_ids, x

    def drop(self, seq_ids) -> None:
        seqs = [int(s) for s in seq_ids]
        if not seqs:
            return
        by_worker: dict[int, list[int]] = {}
        for s in seqs:
            self.lengths.pop(s, None)
            for w, _, _ in self.shards.targets(s):
                by_worker.setdefault(w, []).append(s)
        for w, ids in by_worker.items():
            self.conns[w].send(DropSeq(ids))

    def close(self) -> list[dict]:
        """SHUTDOWN every R-worker; returns their stats."""
        if self._closed:
            return self.worker_stats
        self._closed = True
        for conn in self.conns:
            conn.send(Shutdown())
        stats = []
        for w in range(len(self.conns)):
            while True:
                msg = self._inbox[w].get(timeout=self.timeout)
                if isinstance(msg, Shutdown):
                    stats.append(msg.stats or {})
                    break
                if msg is None or isinstance(msg, Exception):
                    stats.append({})
                    break
        for conn in self.conns:
            conn.close()
        self.worker_stats = stats
        return stats

    def __enter__(self) -> SWorker:
        return self

    def __exit__(self, *exc) -> None:
        self.close()


# --------------------------------------------------------------------------- generation


def default_prompt(seq: int, vocab: int) -> int:
    return (seq * 2654435761 + 12345) % vocab


@dataclass
class Transcript:
    tokens: dict[int, list[int]] = field(default_factory=dict)
    hidden: dict[tuple[int, int], np.ndarray] = field(default_factory=dict)
    step_latency: list[float] = field(default_factory=list)
    step_batch: list[int] = field(default_factory=list)
    step_load: list[int] = field(default_factory=list)
    completed: list[int] = field(default_factory=list)

    def rows(self) -> list[tuple[int, int, int]]:
        """``(sequence, position, token)`` in sequence order."""
        return [(s, i, t) for s in sorted(self.tokens) for i, t in enumerate(self.tokens[s])]


def run_generation(engine, schedule: Schedule, steps: int, vocab: int,
                   prompts: dict[int, int] | None = None, keep_hidden: bool = False) -> Transcript:
    """Drive ``engine`` (monolithic or distributed) through ``steps`` scheduled steps."""
    prompts = prompts or {}
    tr = Transcript()
    last: dict[int, int] = {}
    for _ in range(steps):
        plan = schedule.next_plan()
        seqs = [s for s, _ in plan.sequences()]
        t0 = time.perf_counter()
        if seqs:
            tokens = [last.get(s, prompts.get(s, default_prompt(s, vocab))) for s in seqs]
            next_ids, hidden = engine.decode_step(seqs, tokens)
            for i, s in enumerate(seqs):
                tok = int(next_ids[i])
                tr.tokens.setdefault(s, []).append(tok)
                last[s] = tok
                if keep_hidden:
                    tr.hidden[(plan.step, s)] = hidden[i].copy()
        tr.step_latency.append(time.perf_counter() - t0)
        tr.step_batch.append(len(seqs))
        tr.step_load.append(plan.total_load)
        done = [s for mb in plan.retired for s in mb.sequence_ids]
        tr.completed.extend(done)
        engine.drop(done)
        for s in done:
            last.pop(s, None)
    return tr


@dataclass
class DriveConfig:
    workers: list[str]
    model: ModelSpec
    seed: int = 0
    schedule: str = "large-batch"
    batch: int = 8
    target_length: int = 32
    interval: int | None = None
    w_lim: int | None = None
    steps: int = 32
    mode: str = BY_SEQUENCE
    groups: int | None = None
    pipelined: bool = True
    timeout: float = DEFAULT_TIMEOUT
    storage: str = "single"
    max_sequences: int | None = None

    def make_schedule(self) -> Schedule:
        return make_schedule(self.schedule, self.batch, self.target_length, self.interval,
                             self.w_lim, self.max_sequences)


def run_s_worker(config: DriveConfig, prompts: dict[int, int] | None = None,
                 keep_hidden: bool = False) -> tuple[Transcript, list[StepTrace], list[dict]]:
    """Connect to the R-workers, generate, shut them down.

    Returns the transcript, the per-step traces and the R-worker stats.
    """
    weights = seed_random_weights(config.model, config.seed)
    sw = SWorker(weights, config.workers, config.mode, config.groups, config.pipelined,
                 config.timeout, config.storage)
    try:
        tr = run_generation(sw, config.make_schedule(), config.steps, config.model.vocab_size,
                            prompts, keep_hidden)
    finally:
        stats = sw.close()
    return tr, sw.traces, stats


def _percentile(sorted_values: list[float], p: float) -> float:
    if not sorted_values:
        return math.nan
    k = (len(sorted_values) - 1) * p
    lo, hi = math.floor(k), math.ceil(k)
    return sorted_values[lo] + (sorted_values[hi] - sorted_values[lo]) * (k - lo)


def drive_benchmark(config: DriveConfig) -> dict:
    """Timed generation: throughput, per-token latency percentiles, busy fractions."""
    t0 = time.perf_counter()
    tr, traces, stats = run_s_worker(config)
    elapsed = time.perf_counter() - t0
    tokens = sum(len(v) for v in tr.tokens.values())
    per_token = sorted(t.overall_latency for t in traces for _ in range(t.batch_size))
    gen_time = sum(t.overall_latency for t in traces)
    return {
        "steps": len(traces),
        "tokens": tokens,
        "elapsed_seconds": elapsed,
        "generation_seconds": gen_time,
        "tokens_per_second": tokens / gen_time if gen_time else 0.0,
        "latency_mean": statistics.fmean(per_token) if per_token else math.nan,
        "latency_p01": _percentile(per_token, 0.01),
        "latency_p50": _percentile(per_token, 0.50),
        "latency_p99": _percentile(per_token, 0.99),
        "peak_step_latency": max((t.overall_latency for t in traces), default=math.nan),
        "s_busy_fraction": (sum(t.s_latency for t in traces) / gen_time) if gen_time else 0.0,
        "r_busy_fractions": [s.get("busy_seconds", 0.0) / s["wall_seconds"]
                             if s.get("wall_seconds") else 0.0 for s in stats],
        "pipelined": config.pipelined,
        "schedule": config.schedule,
    }


def stats_json(stats: dict) -> str:
    return json.dumps(stats, sort_keys=True, indent=2)
