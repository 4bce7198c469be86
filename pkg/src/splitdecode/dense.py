"""S-Part: parameter-bearing math for a batch of tokens, and the monolithic decoder.

One transformer block, for a stacked batch ``x`` of shape (B, model_dim):

    q, k, v = x @ W_q, x @ W_k, x @ W_v          (project_qkv)
    o       = attention(q, cached k, v)          (R-Part, see attention.py)
    h       = x + o @ W_o
    x_next  = h + silu(h @ W_up) @ W_down        (finish_block)

There is no layer normalization; weights are scaled so activations stay O(1)
for the shallow toy models used here.
"""

from __future__ import annotations

import csv
import platform
import statistics
import time
from collections.abc import Iterable, Sequence
from dataclasses import dataclass
from pathlib import Path

import numpy as np

from splitdecode.attention import KvShard, StorageFormat
from splitdecode.core import ConfigError, ModelSpec, WeightSet, seed_random_weights


def matmul(x: np.ndarray, w: np.ndarray) -> np.ndarray:
    """``x @ w`` whose rows do not depend on how many rows are stacked.

    OpenBLAS sends a single row through gemv, which sums in a different order
    than gemm; padding to two rows keeps batch-of-one bitwise equal to the
    same row inside a larger batch.
    """
    if x.ndim != 2:
        raise ConfigError(f"expected a 2-D batch, got shape {x.shape}")
    if x.shape[1] != w.shape[0]:
        raise ConfigError(f"shape mismatch: batch {x.shape} @ weight {w.shape}")
    if x.shape[0] == 1:
        return (np.concatenate([x, x]) @ w)[:1]
    return x @ w


def silu(x: np.ndarray) -> np.ndarray:
    # exp overflows to inf for very negative x, which correctly yields -0
    with np.errstate(over="ignore"):
        return x / (np.float32(1.0) + np.exp(-x))


def embed(weights: WeightSet, token_ids: Sequence[int]) -> np.ndarray:
    return weights.embedding[np.asarray(token_ids, dtype=np.int64)].astype(np.float32)


def project_qkv(weights: WeightSet, layer: int, x: np.ndarray
                ) -> tuple[np.ndarray, np.ndarray, np.ndarray]:
    if len(x) == 0:
        raise ConfigError("empty batch")
    lw = weights.layers[layer]
    return matmul(x, lw.w_q), matmul(x, lw.w_k), matmul(x, lw.w_v)


def finish_block(weights: WeightSet, layer: int, o: np.ndarray, residual: np.ndarray) -> np.ndarray:
    if o.shape != residual.shape:
        raise ConfigError(f"shape mismatch: O {o.shape} vs residual {residual.shape}")
    lw = weights.layers[layer]
    h = residual + matmul(o, lw.w_o)
    return h + matmul(silu(matmul(h, lw.w_up)), lw.w_down)


def logits(weights: WeightSet, x: np.ndarray) -> np.ndarray:
    return matmul(x, weights.head)


def greedy(logit_rows: np.ndarray) -> np.ndarray:
    # argmax breaks ties toward the lowest token id
    return np.argmax(logit_rows, axis=-1)


class MonolithicDecoder:
    """Single-process decoder: dense math and a local, full-width KV shard."""

    def __init__(self, weights: WeightSet, capacity: int = 1 << 20,
                 storage_format: StorageFormat | str = StorageFormat.SINGLE) -> None:
        self.weights = weights
        self.spec = weights.spec
        self.shard = KvShard.for_spec(self.spec, capacity, storage_format=storage_format)

    def decode_step(self, seq_ids: Sequence[int], token_ids: Sequence[int]
                    ) -> tuple[np.ndarray, np.ndarray]:
        """Run every layer for one token per sequence; returns (next ids, final hidden)."""
        if len(set(seq_ids)) != len(seq_ids):
            raise ConfigError("duplicate sequence id in batch")
        return decode_step_monolithic(self.weights, self.shard, seq_ids, token_ids)

    def drop(self, seq_ids: Iterable[int]) -> None:
        for seq in seq_ids:
            self.shard.drop_sequence(seq)

    def close(self) -> None:
        pass


def decode_step_monolithic(weights: WeightSet, shard: KvShard, seq_ids: Sequence[int],
                           token_ids: Sequence[int]) -> tuple[np.ndarray, np.ndarray]:
    x = embed(weights, token_ids)
    for layer in range(weights.spec.num_layers):
        q, k, v = project_qkv(weights, layer, x)
        o = np.empty_like(q)
        for i, seq in enumerate(seq_ids):
            shard.append_kv(seq, layer, k[i], v[i])
            o[i] = shard.attend_one(seq, layer, q[i])
        x = finish_block(weights, layer, o, x)
    return greedy(logits(weights, x)), x


def machine_tag() -> str:
    return f"{platform.node()}/{platform.machine()}/{platform.python_implementation()}"


def bench_s_part(spec: ModelSpec, batch_sizes: Sequence[int], repetitions: int = 5,
                 seed: int = 0, warmup: int = 1) -> dict[int, float]:
    """Median seconds for one block's S-Part (projections, W_o, MLP) per batch size.

    Raw medians are reported; no monotone smoothing.
    """
    if not batch_sizes:
        raise ConfigError("batch_sizes must be nonempty")
    if list(batch_sizes) != sorted(set(batch_sizes)):
        raise ConfigError("batch_sizes must be strictly ascending")
    if repetitions < 1:
        raise ValueError("need at least one repetition")
    one_layer = ModelSpec(1, spec.model_dim, spec.num_heads, spec.head_dim, spec.mlp_dim,
                          min(spec.vocab_size, 16))
    weights = seed_random_weights(one_layer, seed)
    rng = np.random.default_rng(seed)
    table = {}
    for b in batch_sizes:
        x = rng.standard_normal((b, spec.model_dim), dtype=np.float32)
        samples = []
        for rep in range(warmup + repetitions):
            t0 = time.perf_counter()
            q, _, _ = project_qkv(weights, 0, x)
            finish_block(weights, 0, q, x)
            if rep >= warmup:
                samples.append(time.perf_counter() - t0)
        table[b] = statistics.median(samples)
    return table


@dataclass(frozen=True)
class ProfileRow:
    batch_size: int
    seconds_per_block: float
    machine_tag: str


def write_profile_fragment(path: str | Path, table: dict[int, float], tag: str | None = None) -> None:
    """CSV rows ``batch_size, seconds_per_block, machine_tag``."""
    tag = machine_tag() if tag is None else tag
    with open(path, "w", newline="") as fh:
        w = csv.writer(fh)
        w.writerow(["batch_size", "seconds_per_block", "machine_tag"])
        for b in sorted(table):
            w.writerow([b, repr(float(table[b])), tag])


def read_profile_fragment(path: str | Path) -> list[ProfileRow]:
    with open(path, newline="") as fh:
        return [ProfileRow(int(r["batch_size"]), float(r["seconds_per_block"]), r["machine_tag"])
                for r in csv.DictReader(fh)]
