import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import decode_from_scratch, matmul_reference
from splitdecode.attention import KvShard
from splitdecode.core import ConfigError, LayerWeights, WeightSet, new_model_spec, seed_random_weights
from splitdecode.dense import (
    MonolithicDecoder,
    bench_s_part,
    decode_step_monolithic,
    finish_block,
    greedy,
    matmul,
    project_qkv,
    read_profile_fragment,
    silu,
    write_profile_fragment,
)

TOY = new_model_spec(2, 64, 4, 256, 128)

# three sequences, twenty greedy steps; frozen from the reference run and
# confirmed against the cache-free float64 decoder in the oracles module
GOLDEN_PROMPTS = {0: 5, 1: 17, 2: 99}
GOLDEN_TOKENS = {
    0: [99, 26, 26, 26, 26, 26, 26, 26, 26, 26, 26, 26, 26, 26, 26, 26, 26, 26, 26, 26],
    1: [119, 117, 112, 112, 112, 103, 6, 127, 111, 32, 98, 97, 70, 19, 100, 112, 50, 9, 82, 20],
    2: [127, 127, 17, 110, 112, 41, 70, 25, 46, 127, 127, 127, 111, 118, 36, 107, 70, 25, 46, 127],
}


def degenerate_weights(h=8, f=8, vocab=4, identity_qkv=True):
    spec = new_model_spec(1, h, 2, f, vocab)
    eye = np.eye(h, dtype=np.float32)
    rng = np.random.default_rng(0)
    w_o = rng.standard_normal((h, h)).astype(np.float32)
    layer = LayerWeights(eye, eye, eye, w_o, np.zeros((h, f), np.float32),
                         np.zeros((f, h), np.float32))
    return WeightSet(spec, rng.standard_normal((vocab, h)).astype(np.float32), (layer,),
                     np.eye(h, vocab, dtype=np.float32))


def generate(decoder, prompts, steps):
    last = dict(prompts)
    out = {s: [] for s in prompts}
    for _ in range(steps):
        ids = list(prompts)
        nxt, _ = decoder.decode_step(ids, [last[s] for s in ids])
        for i, s in enumerate(ids):
            out[s].append(int(nxt[i]))
            last[s] = int(nxt[i])
    return out


def test_identity_projection():
    w = degenerate_weights()
    x = np.random.default_rng(1).standard_normal((3, 8)).astype(np.float32)
    for part in project_qkv(w, 0, x):
        np.testing.assert_array_equal(part, x)


def test_zero_input_projects_to_zero():
    w = seed_random_weights(TOY, 0)
    for part in project_qkv(w, 1, np.zeros((2, 64), np.float32)):
        assert not part.any()


def test_projection_matches_scalar_oracle():
    w = seed_random_weights(TOY, 0)
    x = np.random.default_rng(2).standard_normal((4, 64)).astype(np.float32)
    q, k, v = project_qkv(w, 0, x)
    lw = w.layers[0]
    for got, mat in ((q, lw.w_q), (k, lw.w_k), (v, lw.w_v)):
        assert np.abs(got - matmul_reference(x, mat)).max() <= 1e-5


def test_finish_block_degenerate_mlp():
    w = degenerate_weights()
    rng = np.random.default_rng(3)
    o, res = rng.standard_normal((2, 8)).astype(np.float32), rng.standard_normal((2, 8)).astype(np.float32)
    np.testing.assert_allclose(finish_block(w, 0, o, res), res + o @ w.layers[0].w_o, rtol=1e-6)
    zero = np.zeros((2, 8), np.float32)
    assert not finish_block(w, 0, zero, zero).any()


def test_finish_block_matches_scalar_oracle():
    w = seed_random_weights(TOY, 0)
    rng = np.random.default_rng(4)
    o, res = (rng.standard_normal((3, 64)).astype(np.float32) for _ in range(2))
    lw = w.layers[1]
    h = res + matmul_reference(o, lw.w_o)
    up = matmul_reference(h, lw.w_up)
    ref = h + matmul_reference(up / (1 + np.exp(-up)), lw.w_down)
    assert np.abs(finish_block(w, 1, o, res) - ref).max() <= 1e-5


def test_shape_mismatch_is_config_error():
    w = seed_random_weights(TOY, 0)
    with pytest.raises(ConfigError):
        project_qkv(w, 0, np.zeros((2, 63), np.float32))
    with pytest.raises(ConfigError):
        finish_block(w, 0, np.zeros((2, 64), np.float32), np.zeros((3, 64), np.float32))
    with pytest.raises(ConfigError):
        matmul(np.zeros((2, 3)), np.zeros((4, 5)))


@settings(max_examples=30, deadline=None)
@given(st.integers(1, 9), st.integers(0, 1000))
def test_matmul_rows_independent_of_batch(n, seed):
    rng = np.random.default_rng(seed)
    x = rng.standard_normal((n, 64)).astype(np.float32)
    w = rng.standard_normal((64, 48)).astype(np.float32)
    full = matmul(x, w)
    for i in range(n):
        np.testing.assert_array_equal(matmul(x[i:i + 1], w)[0], full[i])


def test_silu_reference_points():
    np.testing.assert_allclose(silu(np.array([0.0, 1.0, -1.0], np.float32)),
                               [0.0, 0.7310586, -0.26894143], rtol=1e-6)


def test_golden_monolithic_tokens():
    assert generate(MonolithicDecoder(seed_random_weights(TOY, 0)), GOLDEN_PROMPTS, 20) == GOLDEN_TOKENS


def test_cached_decode_matches_cache_free_oracle():
    w = seed_random_weights(new_model_spec(2, 32, 4, 64, 40), 11)
    prompts = {0: 1, 1: 7}
    assert generate(MonolithicDecoder(w), prompts, 12) == decode_from_scratch(w, prompts, 12)


def test_batching_does_not_change_per_sequence_math():
    w = seed_random_weights(TOY, 0)
    shard_all = KvShard.for_spec(TOY, 1 << 12)
    solo = {s: KvShard.for_spec(TOY, 1 << 12) for s in range(4)}
    tokens = [3, 50, 7, 120]
    for _ in range(6):
        nxt, h = decode_step_monolithic(w, shard_all, [0, 1, 2, 3], tokens)
        for s in range(4):
            n1, h1 = decode_step_monolithic(w, solo[s], [s], [tokens[s]])
            np.testing.assert_array_equal(h1[0], h[s])
            assert n1[0] == nxt[s]
        tokens = [int(t) for t in nxt]


def test_monolithic_is_deterministic():
    w = seed_random_weights(TOY, 2)
    a = generate(MonolithicDecoder(w), {0: 1, 5: 2}, 8)
    b = generate(MonolithicDecoder(seed_random_weights(TOY, 2)), {0: 1, 5: 2}, 8)
    assert a == b


def test_duplicate_sequence_rejected():
    with pytest.raises(ConfigError):
        MonolithicDecoder(seed_random_weights(TOY, 0)).decode_step([1, 1], [0, 0])


@settings(max_examples=50)
@given(st.integers(0, 2**32 - 1), st.floats(1e-3, 1e3))
def test_argmax_invariant_to_positive_scaling(seed, c):
    logits = np.random.default_rng(seed).standard_normal((3, 20)).astype(np.float32)
    np.testing.assert_array_equal(greedy(logits), greedy(logits * np.float32(c)))


def test_bench_s_part_single_size():
    table = bench_s_part(TOY, [4], repetitions=2)
    assert list(table) == [4] and table[4] > 0


def test_bench_s_part_rejects_unsorted():
    with pytest.raises(ConfigError):
        bench_s_part(TOY, [8, 4])


def test_throughput_proxy_rises_with_batch():
    spec = new_model_spec(1, 256, 8, 1024, 64)
    table = bench_s_part(spec, [1, 64], repetitions=7)
    assert 64 / table[64] > 1 / table[1]


def test_profile_fragment_roundtrip(tmp_path):
    path = tmp_path / "t.csv"
    write_profile_fragment(path, {1: 0.001, 8: 0.002, 64: 0.004, 256: 0.01}, "desk")
    assert path.read_text().splitlines()[0] == "batch_size,seconds_per_block,machine_tag"
    rows = read_profile_fragment(path)
    assert [r.batch_size for r in rows] == [1, 8, 64, 256]
    assert rows[-1].seconds_per_block == 0.01 and rows[0].machine_tag == "desk"
