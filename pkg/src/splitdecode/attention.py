"""R-Part: per-worker KV storage and attention over it.

Attention for one sequence and one layer is computed as

    s_j = (q . k_j) / sqrt(head_dim)      for every stored position j
    a   = softmax(s)
    o   = sum_j a_j v_j

in float32, whatever the storage format. All reductions accumulate in
ascending index order through ``np.add.accumulate``, so a head's output
depends only on that head's data: a worker holding heads 0..3 and one
holding all heads produce the same bits for head 2.
"""

from __future__ import annotations

import enum
import logging
import statistics
import time
from collections.abc import Sequence
from dataclasses import dataclass, field

import numpy as np

from splitdecode.core import ConfigError, ModelSpec

log = logging.getLogger(__name__)


class CapacityExceeded(RuntimeError):
    pass


class UnknownSequence(KeyError):
    pass


class StorageFormat(str, enum.Enum):
    SINGLE = "single"
    HALF = "half"
    INT8 = "int8-scaled"

    @property
    def bytes_per_element(self) -> float:
        return {"single": 4, "half": 2, "int8-scaled": 1}[self.value]


def quantize_kv_int8(vector: np.ndarray) -> tuple[np.ndarray, np.float32]:
    """Symmetric per-vector int8 quantization, ``scale = max|x| / 127``.

    Rounding is numpy's round-half-to-even.
    """
    x = np.asarray(vector, dtype=np.float32)
    if not np.all(np.isfinite(x)):
        raise ValueError("cannot quantize non-finite values")
    peak = np.float32(np.max(np.abs(x))) if x.size else np.float32(0.0)
    if peak == 0:
        return np.zeros(x.shape, dtype=np.int8), np.float32(0.0)
    scale = np.float32(peak / np.float32(127.0))
    q = np.rint(x / scale)
    return np.clip(q, -127, 127).astype(np.int8), scale


def dequantize_kv_int8(data: np.ndarray, scale: float) -> np.ndarray:
    return np.asarray(data, dtype=np.float32) * np.float32(scale)


class _Growable:
    """Append-only (length, heads * head_dim) buffer in one storage format.

    int8 storage keeps one scale per head vector, so a shard covering a subset
    of heads stores exactly what a full-width shard stores for those heads.
    """

    def __init__(self, heads: int, head_dim: int, fmt: StorageFormat, initial: int = 16) -> None:
        self.fmt = fmt
        self.heads = heads
        self.head_dim = head_dim
        self.length = 0
        dtype = {StorageFormat.SINGLE: np.float32, StorageFormat.HALF: np.float16,
                 StorageFormat.INT8: np.int8}[fmt]
        self.data = np.empty((initial, heads, head_dim), dtype=dtype)
        self.scales = (np.empty((initial, heads), dtype=np.float32)
                       if fmt is StorageFormat.INT8 else None)

    def append(self, vec: np.ndarray) -> None:
        if self.length == self.data.shape[0]:
            self.data = np.concatenate([self.data, np.empty_like(self.data)])
            if self.scales is not None:
                self.scales = np.concatenate([self.scales, np.empty_like(self.scales)])
        rows = vec.reshape(self.heads, self.head_dim)
        if self.fmt is StorageFormat.INT8:
            for h in range(self.heads):
                self.data[self.length, h], self.scales[self.length, h] = quantize_kv_int8(rows[h])
        else:
            self.data[self.length] = rows  # float16 cast rounds to nearest even
        self.length += 1

    def decoded(self) -> np.ndarray:
        """float32 view of shape (length, heads, head_dim)."""
        raw = self.data[: self.length]
        if self.fmt is StorageFormat.INT8:
            return raw.astype(np.float32) * self.scales[: self.length, :, None]
        return raw.astype(np.float32, copy=False)

    @property
    def nbytes(self) -> int:
        n = self.length * self.heads * self.head_dim * self.data.itemsize
        return n + (4 * self.length * self.heads if self.scales is not None else 0)


@dataclass
class _SeqCache:
    keys: list[_Growable]
    values: list[_Growable]

    def length(self, layer: int) -> int:
        return self.keys[layer].length

    def tokens(self) -> int:
        return max(k.length for k in self.keys)


@dataclass
class KvShard:
    """KV storage for one head range of every sequence routed to a worker.

    ``capacity`` bounds ``token_count``: a token occupies one slot across all
    layers once its first layer has been appended.
    """

    num_layers: int
    head_dim: int
    head_start: int
    head_count: int
    capacity: int
    storage_format: StorageFormat = StorageFormat.SINGLE
    missing_drops: int = 0
    _seqs: dict[int, _SeqCache] = field(default_factory=dict, repr=False)
    _tokens: int = 0

    def __post_init__(self) -> None:
        self.storage_format = StorageFormat(self.storage_format)
        if self.capacity < 0:
            raise ConfigError("capacity must be non-negative")

    @classmethod
    def for_spec(cls, spec: ModelSpec, capacity: int, head_start: int = 0,
                 head_count: int | None = None,
                 storage_format: StorageFormat | str = StorageFormat.SINGLE) -> KvShard:
        head_count = spec.num_heads - head_start if head_count is None else head_count
        if head_start < 0 or head_count < 1 or head_start + head_count > spec.num_heads:
            raise ConfigError(f"head range [{head_start}, {head_start + head_count}) "
                              f"outside model with {spec.num_heads} heads")
        return cls(spec.num_layers, spec.head_dim, head_start, head_count, capacity,
                   StorageFormat(storage_format))

    @property
    def width(self) -> int:
        return self.head_dim * self.head_count

    @property
    def token_count(self) -> int:
        return self._tokens

    @property
    def sequences(self) -> list[int]:
        return list(self._seqs)

    def __contains__(self, seq: int) -> bool:
        return seq in self._seqs

    def length(self, seq: int, layer: int = 0) -> int:
        try:
            return self._seqs[seq].length(layer)
        except KeyError:
            raise UnknownSequence(seq) from None

    def new_tokens_needed(self, seq: int, layer: int) -> int:
        """Slots an append of ``(seq, layer)`` would consume (0 or 1)."""
        cache = self._seqs.get(seq)
        if cache is None:
            return 1
        return int(cache.length(layer) == cache.tokens())

    def has_room(self, needed: int) -> bool:
        return self._tokens + needed <= self.capacity

    def append_kv(self, seq: int, layer: int, k: np.ndarray, v: np.ndarray) -> None:
        if not 0 <= layer < self.num_layers:
            raise IndexError(f"layer {layer} out of range")
        k = np.asarray(k, dtype=np.float32).reshape(-1)
        v = np.asarray(v, dtype=np.float32).reshape(-1)
        if k.shape != (self.width,) or v.shape != (self.width,):
            raise ValueError(f"K/V must have length {self.width}, got {k.shape} and {v.shape}")
        needed = self.new_tokens_needed(seq, layer)
        if not self.has_room(needed):
            raise CapacityExceeded(
                f"capacity exceeded: {self._tokens} + {needed} > {self.capacity}"
            )
        cache = self._seqs.get(seq)
        if cache is None:
            make = lambda: _Growable(self.head_count, self.head_dim, self.storage_format)  # noqa: E731
            cache = _SeqCache([make() for _ in range(self.num_layers)],
                              [make() for _ in range(self.num_layers)])
            self._seqs[seq] = cache
        cache.keys[layer].append(k)
        cache.values[layer].append(v)
        self._tokens += needed

    def kv(self, seq: int, layer: int) -> tuple[np.ndarray, np.ndarray]:
        """Decoded float32 ``(length, heads, head_dim)`` K and V arrays."""
        try:
            cache = self._seqs[seq]
        except KeyError:
            raise UnknownSequence(seq) from None
        return cache.keys[layer].decoded(), cache.values[layer].decoded()

    def attend_one(self, seq: int, layer: int, q: np.ndarray) -> np.ndarray:
        keys, values = self.kv(seq, layer)
        if keys.shape[0] == 0:
            raise RuntimeError(f"sequence {seq} has no cached positions at layer {layer}")
        q = np.asarray(q, dtype=np.float32).reshape(self.head_count, self.head_dim)
        return attention_over(q, keys, values).reshape(-1)

    def attend_many(self, seqs: Sequence[int], layer: int, q: np.ndarray) -> np.ndarray:
        """Attend several sequences at once; row ``i`` equals ``attend_one(seqs[i], ...)`` bitwise.

        Caches are zero-padded to the longest one and every reduction runs
        sequentially along positions, so each row is read off at its own last
        position before any padding enters the sum.
        """
        q = np.asarray(q, dtype=np.float32).reshape(len(seqs), self.head_count, self.head_dim)
        caches = []
        for seq in seqs:
            keys, values = self.kv(seq, layer)
            if keys.shape[0] == 0:
                raise RuntimeError(f"sequence {seq} has no cached positions at layer {layer}")
            caches.append((keys, values))
        lengths = np.array([k.shape[0] for k, _ in caches])
        shape = (len(seqs), int(lengths.max(initial=0)), self.head_count, self.head_dim)
        keys = np.zeros(shape, dtype=np.float32)
        values = np.zeros(shape, dtype=np.float32)
        for i, (k, v) in enumerate(caches):
            keys[i, : len(k)] = k
            values[i, : len(v)] = v
        return attention_padded(q, keys, values, lengths).reshape(len(seqs), self.width)

    def attend(self, request: AttentionRequest) -> AttentionResponse:
        seqs = list(request.sequence_ids)
        if not seqs:
            return AttentionResponse(request.layer_index, [], [])
        out = self.attend_many(seqs, request.layer_index, request.q)
        return AttentionResponse(request.layer_index, seqs, list(out))

    def drop_sequence(self, seq: int) -> int:
        """Forget ``seq``; returns the freed token slots. Unknown ids are counted no-ops."""
        cache = self._seqs.pop(seq, None)
        if cache is None:
            self.missing_drops += 1
            log.warning("drop of unknown sequence %s", seq)
            return 0
        freed = cache.tokens()
        self._tokens -= freed
        return freed

    @property
    def nbytes(self) -> int:
        return sum(g.nbytes for c in self._seqs.values() for g in (*c.keys, *c.values))


def attention_over(q: np.ndarray, keys: np.ndarray, values: np.ndarray) -> np.ndarray:
    """Scaled dot-product attention of one query over ``L`` cached positions.

    q: (heads, d); keys, values: (L, heads, d). Returns (heads, d).
    """
    weights = attention_weights(q, keys)
    return np.add.accumulate(weights[..., None] * values, axis=0)[-1]


def attention_padded(q: np.ndarray, keys: np.ndarray, values: np.ndarray,
                     lengths: np.ndarray) -> np.ndarray:
    """Batched :func:`attention_over` on zero-padded caches.

    q: (n, heads, d); keys, values: (n, L, heads, d); lengths: (n,).
    """
    n, L = keys.shape[:2]
    scale = np.float32(1.0 / np.sqrt(q.shape[-1]))
    dots = np.add.accumulate(keys * q[:, None], axis=3)[..., -1]
    scores = dots * scale
    pad = np.arange(L)[None, :] >= lengths[:, None]
    scores[pad] = -np.inf
    weights = np.exp(scores - scores.max(axis=1, keepdims=True))
    last = (np.arange(n), lengths - 1)
    total = np.add.accumulate(weights, axis=1)[last]
    weights = weights / total[:, None]
    return np.add.accumulate(weights[..., None] * values, axis=1)[last]


def attention_weights(q: np.ndarray, keys: np.ndarray) -> np.ndarray:
    """Softmax weights, shape (L, heads); each column sums to one."""
    scale = np.float32(1.0 / np.sqrt(q.shape[-1]))
    dots = np.add.accumulate(keys * q, axis=2)[..., -1]
    scores = dots * scale
    weights = np.exp(scores - scores.max(axis=0))
    return weights / np.add.accumulate(weights, axis=0)[-1]


@dataclass
class AttentionRequest:
    layer_index: int
    sequence_ids: list[int]
    q: np.ndarray  # (count, width)
    k: np.ndarray
    v: np.ndarray

    def queries(self):
        return zip(self.sequence_ids, self.q)


@dataclass
class AttentionResponse:
    layer_index: int
    sequence_ids: list[int]
    outputs: list[np.ndarray] = field(default_factory=list)

    def stacked(self) -> np.ndarray:
        return np.stack(self.outputs) if self.outputs else np.empty((0, 0), np.float32)


def append_kv(shard: KvShard, seq: int, layer: int, k: np.ndarray, v: np.ndarray) -> KvShard:
    shard.append_kv(seq, layer, k, v)
    return shard


def attend(shard: KvShard, request: AttentionRequest) -> AttentionResponse:
    return shard.attend(request)


def drop_sequence(shard: KvShard, seq: int) -> KvShard:
    shard.drop_sequence(seq)
    return shard


def process_request(shard: KvShard, request: AttentionRequest) -> AttentionResponse:
    """Append every request's K/V, then attend; the batch is rejected whole on overflow."""
    needed = sum(shard.new_tokens_needed(s, request.layer_index) for s in request.sequence_ids)
    if not shard.has_room(needed):
        raise CapacityExceeded(
            f"capacity exceeded: {shard.token_count} + {needed} > {shard.capacity}"
        )
    for i, seq in enumerate(request.sequence_ids):
        shard.append_kv(seq, request.layer_index, request.k[i], request.v[i])
    return shard.attend(request)


def bench_r_part(spec: ModelSpec, batch: int, seq_len: int, repetitions: int,
                 storage_format: StorageFormat | str = StorageFormat.SINGLE,
                 seed: int = 0) -> float:
    """Median seconds per (token position x layer) of ``attend`` on this host."""
    if repetitions < 1:
        raise ValueError("need at least one repetition")
    if batch < 1 or seq_len < 1:
        raise ValueError("batch and seq_len must be >= 1")
    rng = np.random.default_rng(seed)
    shard = KvShard(1, spec.head_dim, 0, spec.num_heads, batch * seq_len,
                    StorageFormat(storage_format))
    for seq in range(batch):
        ks = rng.standard_normal((seq_len, spec.model_dim), dtype=np.float32)
        vs = rng.standard_normal((seq_len, spec.model_dim), dtype=np.float32)
        for j in range(seq_len):
            shard.append_kv(seq, 0, ks[j], vs[j])
    qs = rng.standard_normal((batch, spec.model_dim), dtype=np.float32)
    samples = []
    for _ in range(repetitions):
        t0 = time.perf_counter()
        for seq in range(batch):
            shard.attend_one(seq, 0, qs[seq])
        samples.append(time.perf_counter() - t0)
    return statistics.median(samples) / (batch * seq_len)
