import socket
import threading

import numpy as np
import pytest

from splitdecode.attention import KvShard
from splitdecode.core import new_model_spec, seed_random_weights
from splitdecode.dense import MonolithicDecoder
from splitdecode.scheduler import FixedIntervalSchedule, LargeBatchSchedule
from splitdecode.transport import (
    BY_HEAD,
    BY_SEQUENCE,
    HEADER,
    HYBRID,
    MAGIC,
    Config,
    Connection,
    DropSeq,
    Error,
    ErrorCode,
    Hello,
    OBatch,
    QkvBatch,
    Shutdown,
    encode,
)
from splitdecode.workers import (
    DriveConfig,
    RWorker,
    RWorkerError,
    SWorker,
    drive_benchmark,
    run_generation,
    start_r_worker_thread,
)
from test_dense import GOLDEN_PROMPTS, GOLDEN_TOKENS, TOY

SMALL = new_model_spec(2, 32, 4, 64, 50)


def configured(spec=SMALL, capacity=1000, **kw):
    rw = RWorker(capacity)
    [reply] = rw.handle(Config(spec, **kw))
    assert isinstance(reply, Config) and reply.capacity == capacity
    return rw


def qkv(rng, seqs, positions, width=32, layer=0, step=0, hs=0, hc=4):
    n = len(seqs)
    vec = lambda: rng.standard_normal((n, width)).astype(np.float32)  # noqa: E731
    return QkvBatch(layer, step, hs, hc, seqs, positions, vec(), vec(), vec())


def workers(n, capacity=1 << 16, delay=0.0):
    return [start_r_worker_thread(capacity, delay)[1] for _ in range(n)]


def test_echo_matches_local_attention_bitwise():
    rng = np.random.default_rng(0)
    rw = configured()
    local = KvShard.for_spec(SMALL, 1000)
    for pos in range(5):
        msg = qkv(rng, [11], [pos], step=pos)
        [reply] = rw.handle(msg)
        assert isinstance(reply, OBatch) and (reply.layer, reply.step) == (0, pos)
        local.append_kv(11, 0, msg.k[0], msg.v[0])
        np.testing.assert_array_equal(reply.o[0], local.attend_one(11, 0, msg.q[0]))


def test_drop_then_query_is_unknown_sequence():
    rng = np.random.default_rng(1)
    rw = configured()
    rw.handle(qkv(rng, [4], [0]))
    assert rw.handle(DropSeq([4])) == []
    assert rw.handle(DropSeq([4])) == []  # idempotent
    [err] = rw.handle(qkv(rng, [4], [1]))
    assert isinstance(err, Error) and err.code == ErrorCode.UNKNOWN_SEQUENCE
    assert "unknown sequence" in err.message


def test_capacity_error_rejects_batch_atomically():
    rng = np.random.default_rng(2)
    rw = configured(capacity=3)
    rw.handle(qkv(rng, [0, 1], [0, 0]))
    [err] = rw.handle(qkv(rng, [0, 1, 2], [1, 1, 0]))
    assert err.code == ErrorCode.CAPACITY_EXCEEDED
    assert rw.shard.token_count == 2 and rw.shard.length(0, 0) == 1


def test_request_validation():
    rng = np.random.default_rng(3)
    assert RWorker(10).handle(qkv(rng, [0], [0]))[0].code == ErrorCode.NOT_CONFIGURED
    rw = configured()
    bad = [qkv(rng, [0], [0], hs=1, hc=3, width=24), qkv(rng, [0], [0], layer=5),
           qkv(rng, [0, 0], [0, 0]), qkv(rng, [0], [0], width=16)]
    for msg in bad:
        assert rw.handle(msg)[0].code == ErrorCode.MALFORMED
    rw.handle(qkv(rng, [0], [0]))
    assert rw.handle(qkv(rng, [0], [3]))[0].code == ErrorCode.MALFORMED


def test_shutdown_stats_account_for_wall_time():
    rng = np.random.default_rng(4)
    rw = configured()
    for pos in range(20):
        rw.handle(qkv(rng, [0, 1], [pos, pos]))
    [reply] = rw.handle(Shutdown())
    s = reply.stats
    assert s["busy_seconds"] + s["idle_seconds"] == pytest.approx(s["wall_seconds"], abs=1e-6)
    assert s["tokens_processed"] == 40 and s["requests"] == 20


def test_serve_answers_bad_frames_and_keeps_connection():
    a, b = socket.socketpair()
    client, server = Connection(a), Connection(b)
    th = threading.Thread(target=RWorker(10).serve, args=(server,), daemon=True)
    th.start()
    client.send_raw(HEADER.pack(MAGIC, 1, 77, 0))
    assert client.recv().code == ErrorCode.UNKNOWN_TYPE
    client.send_raw(HEADER.pack(MAGIC, 9, 1, 2) + b"{}")
    err = client.recv()
    assert err.code == ErrorCode.UNSUPPORTED_VERSION and "supported version is 1" in err.message
    client.send_raw(encode(Hello())[:-1] + b"[")
    assert client.recv().code == ErrorCode.MALFORMED
    client.send(Hello())
    assert isinstance(client.recv(), Hello)
    client.send(Shutdown())
    assert isinstance(client.recv(), Shutdown)
    th.join(5)
    client.close()
    server.close()


def generate(engine, prompts, steps, batch):
    sched = LargeBatchSchedule(batch, steps)
    return run_generation(engine, sched, steps, engine.spec.vocab_size, prompts).tokens


def test_distributed_matches_monolithic_golden():
    prompts = {**GOLDEN_PROMPTS, 3: 42}
    weights = seed_random_weights(TOY, 0)
    with SWorker(weights, workers(1)) as sw:
        tokens = generate(sw, prompts, 20, 4)
    for s, want in GOLDEN_TOKENS.items():
        assert tokens[s] == want
    assert tokens == generate(MonolithicDecoder(weights), prompts, 20, 4)


@pytest.mark.parametrize("n,mode,groups,pipelined", [
    (2, BY_SEQUENCE, None, True), (2, BY_HEAD, None, True), (4, HYBRID, 2, True),
    (3, BY_SEQUENCE, None, False), (1, BY_SEQUENCE, None, True)])
def test_sharding_does_not_change_math(n, mode, groups, pipelined):
    weights = seed_random_weights(SMALL, 5)
    prompts = {s: (7 * s) % 50 for s in range(7)}
    sched = lambda: FixedIntervalSchedule(7, 8, 4)  # noqa: E731
    want = run_generation(MonolithicDecoder(weights), sched(), 24, 50, prompts, keep_hidden=True)
    with SWorker(weights, workers(n), mode, groups, pipelined) as sw:
        got = run_generation(sw, sched(), 24, 50, prompts, keep_hidden=True)
    assert got.tokens == want.tokens
    assert got.hidden.keys() == want.hidden.keys()
    for key in want.hidden:
        np.testing.assert_array_equal(got.hidden[key], want.hidden[key])


def test_barrier_holds_under_injected_delay():
    weights = seed_random_weights(SMALL, 1)
    addrs = [start_r_worker_thread(1 << 12, delay)[1] for delay in (0.0, 0.03)]
    with SWorker(weights, addrs, record_events=True) as sw:
        sw.decode_step([0, 1, 2, 3], [1, 2, 3, 4])
        events = list(sw.events)
    for i, ev in enumerate(events):
        if ev[0] == "finish":
            _, g, layer = ev
            sends = {e[3] for e in events[:i] if e[:3] == ("send", g, layer)}
            replies = {e[3] for e in events[:i] if e[:3] == ("reply", g, layer)}
            assert sends and replies == sends, (ev, events[:i])
    order = [e[:3] for e in events if e[0] != "reply"]
    sends = [e for e in order if e[0] == "send"]
    # A0 then B0 before anything is finished; every layer ends with B
    assert sends[0][1:] == ("A", 0) and ("send", "B", 0) in order[:order.index(("finish", "A", 0))]
    finishes = [e[1:] for e in order if e[0] == "finish"]
    assert finishes == [("A", 0), ("B", 0), ("A", 1), ("B", 1)]


def test_worker_error_aborts_step():
    weights = seed_random_weights(SMALL, 1)
    with SWorker(weights, workers(1), capacity=3) as sw:
        with pytest.raises(RWorkerError) as exc:
            sw.decode_step([0, 1, 2, 3], [1, 1, 1, 1])
        assert exc.value.code == ErrorCode.CAPACITY_EXCEEDED


def test_timeout_reports_diagnostics():
    weights = seed_random_weights(SMALL, 1)
    sw = SWorker(weights, [start_r_worker_thread(1 << 12, 0.5)[1]], timeout=0.05)
    with pytest.raises(TimeoutError, match="layer 0"):
        sw.decode_step([0, 1], [1, 2])
    sw.timeout = 10
    sw.close()


def test_every_sequence_completes_in_exactly_target_steps():
    weights = seed_random_weights(SMALL, 2)
    S = 8
    with SWorker(weights, workers(2)) as sw:
        tr = run_generation(sw, FixedIntervalSchedule(6, S, 2), 5 * S, 50)
    assert len(tr.completed) >= 12
    for s in tr.completed:
        assert len(tr.tokens[s]) == S
    # retired sequences left nothing behind on the workers
    stats = sw.worker_stats
    assert sum(st["missing_drops"] for st in stats) == 0
    live = len(set(tr.tokens) - set(tr.completed))
    assert sum(st["token_count"] for st in stats) == sum(len(tr.tokens[s]) for s in tr.tokens
                                                            if s not in tr.completed)
    assert live > 0


def test_one_token_benchmark():
    cfg = DriveConfig(workers(1), SMALL, batch=1, target_length=1, steps=1)
    report = drive_benchmark(cfg)
    assert report["steps"] == 1 and report["tokens"] == 1
    assert report["latency_p01"] == report["latency_p50"] == report["latency_p99"]
    assert 0 < report["tokens_per_second"] < float("inf")


def test_r_busy_fraction_rises_with_length():
    spec = new_model_spec(1, 64, 4, 64, 32)
    fractions = []
    for S in (4, 64, 512):
        cfg = DriveConfig(workers(1, 1 << 16), spec, batch=8, target_length=S, steps=S)
        fractions.append(drive_benchmark(cfg)["r_busy_fractions"][0])
    assert fractions == sorted(fractions), fractions
