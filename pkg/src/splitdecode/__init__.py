"""Decoding with the attention over the KV cache (R-Part) split from the dense
math (S-Part), load-stabilized batch scheduling, and a pipeline simulator."""

from splitdecode.core import ConfigError, ModelSpec, WeightSet, new_model_spec, seed_random_weights

__all__ = ["ConfigError", "ModelSpec", "WeightSet", "new_model_spec", "seed_random_weights"]
__version__ = "0.1.0"
