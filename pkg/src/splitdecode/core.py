"""Model geometry, sequence bookkeeping and deterministic toy weights."""

from __future__ import annotations

import dataclasses
import hashlib
import json
from dataclasses import dataclass, field
from typing import Any

import numpy as np

# Named generator so every process derives bit-identical parameters from a seed.
RNG_ALGORITHM = "PCG64"


class ConfigError(ValueError):
    """Raised for invalid model or scenario configuration."""


@dataclass(frozen=True)
class ModelSpec:
    num_layers: int
    model_dim: int
    num_heads: int
    head_dim: int
    mlp_dim: int
    vocab_size: int

    def __post_init__(self) -> None:
        for f in dataclasses.fields(self):
            value = getattr(self, f.name)
            if not isinstance(value, (int, np.integer)) or isinstance(value, bool):
                raise ConfigError(f"{f.name} must be an integer, got {value!r}")
            if value < 1:
                raise ConfigError(f"{f.name} must be >= 1, got {value}")
        if self.model_dim != self.num_heads * self.head_dim:
            raise ConfigError(
                f"model_dim ({self.model_dim}) != num_heads ({self.num_heads}) "
                f"x head_dim ({self.head_dim})"
            )

    def to_dict(self) -> dict[str, int]:
        return dataclasses.asdict(self)

    def to_json(self) -> str:
        return json.dumps(self.to_dict(), sort_keys=True)

    @classmethod
    def from_dict(cls, data: dict[str, Any]) -> ModelSpec:
        names = {f.name for f in dataclasses.fields(cls)}
        missing = names - data.keys()
        extra = data.keys() - names
        if missing or extra:
            raise ConfigError(
                f"model spec fields mismatch: missing={sorted(missing)} extra={sorted(extra)}"
            )
        return cls(**{k: data[k] for k in names})

    @classmethod
    def from_json(cls, text: str) -> ModelSpec:
        return cls.from_dict(json.loads(text))


def new_model_spec(layers: int, model_dim: int, heads: int, mlp_dim: int, vocab: int) -> ModelSpec:
    """Build a spec, deriving ``head_dim`` from ``model_dim / heads``."""
    for name, value in [
        ("layers", layers),
        ("model_dim", model_dim),
        ("heads", heads),
        ("mlp_dim", mlp_dim),
        ("vocab", vocab),
    ]:
        if value < 1:
            raise ConfigError(f"{name} must be >= 1, got {value}")
    if model_dim % heads:
        raise ConfigError(f"model_dim not divisible by heads ({model_dim} % {heads} != 0)")
    return ModelSpec(layers, model_dim, heads, model_dim // heads, mlp_dim, vocab)


@dataclass
class SequenceState:
    id: int
    current_length: int
    target_length: int
    micro_batch_id: int = -1

    def __post_init__(self) -> None:
        if self.target_length < 1:
            raise ConfigError("target_length must be >= 1")
        if not 0 <= self.current_length <= self.target_length:
            raise ConfigError(
                f"current_length {self.current_length} outside [0, {self.target_length}]"
            )

    @property
    def finished(self) -> bool:
        return self.current_length == self.target_length

    def advance(self) -> None:
        if self.finished:
            raise RuntimeError(f"sequence {self.id} already reached its target length")
        self.current_length += 1


@dataclass(frozen=True)
class LayerWeights:
    w_q: np.ndarray  # (model_dim, model_dim), applied as x @ w_q
    w_k: np.ndarray
    w_v: np.ndarray
    w_o: np.ndarray
    w_up: np.ndarray  # (model_dim, mlp_dim)
    w_down: np.ndarray  # (mlp_dim, model_dim)


@dataclass(frozen=True)
class WeightSet:
    spec: ModelSpec
    embedding: np.ndarray  # (vocab_size, model_dim)
    layers: tuple[LayerWeights, ...]
    head: np.ndarray  # (model_dim, vocab_size)
    seed: int = field(default=0)

    def arrays(self) -> list[np.ndarray]:
        out = [self.embedding]
        for lw in self.layers:
            out.extend([lw.w_q, lw.w_k, lw.w_v, lw.w_o, lw.w_up, lw.w_down])
        out.append(self.head)
        return out

    def checksum(self) -> str:
        h = hashlib.sha256()
        for a in self.arrays():
            h.update(np.ascontiguousarray(a, dtype="<f4").tobytes())
        return h.hexdigest()


def seed_random_weights(spec: ModelSpec, seed: int) -> WeightSet:
    """Deterministic float32 weights scaled by ``1/sqrt(fan_in)``.

    The draw order is fixed (embedding, then per layer q, k, v, o, up, down,
    then the output head), so any process holding ``(spec, seed)`` rebuilds
    the same bits. Embedding entries are unit normal so token features start
    at unit scale.
    """
    rng = np.random.Generator(np.random.PCG64(seed))
    h, f = spec.model_dim, spec.mlp_dim

    def draw(rows: int, cols: int, scale: float | None = None) -> np.ndarray:
        w = rng.standard_normal((rows, cols), dtype=np.float32)
        w *= np.float32(1.0 / np.sqrt(rows) if scale is None else scale)
        w.setflags(write=False)
        return w

    embedding = draw(spec.vocab_size, h, scale=1.0)
    layers = []
    for _ in range(spec.num_layers):
        layers.append(
            LayerWeights(
                w_q=draw(h, h),
                w_k=draw(h, h),
                w_v=draw(h, h),
                w_o=draw(h, h),
                w_up=draw(h, f),
                w_down=draw(f, h),
            )
        )
    head = draw(h, spec.vocab_size)
    return WeightSet(spec=spec, embedding=embedding, layers=tuple(layers), head=head, seed=seed)
