"""Named, counter-based random streams.

Every source of randomness in the project draws from a Philox generator
whose 128-bit key is derived by hashing ``(seed, purpose, *indices)``.
Streams are therefore independent per purpose: adding a new consumer under
a new purpose string never perturbs the draws of existing ones, and
per-index substreams (e.g. one per generated instance) are order-free.
"""

from __future__ import annotations

import hashlib

import numpy as np


def philox_key(seed: int, purpose: str, *indices: int) -> np.ndarray:
    """Derive a 2-word uint64 Philox key from a seed, a purpose label and
    optional integer indices."""
    tag = repr((int(seed), str(purpose), tuple(int(i) for i in indices)))
    digest = hashlib.sha256(tag.encode("utf-8")).digest()
    return np.frombuffer(digest[:16], dtype=np.uint64).copy()


def stream(seed: int, purpose: str, *indices: int) -> np.random.Generator:
    """A fresh generator for ``(seed, purpose, *indices)``. Deterministic
    across runs and platforms."""
    return np.random.Generator(np.random.Philox(key=philox_key(seed, purpose, *indices)))


def get_state(gen: np.random.Generator) -> dict:
    """JSON-serializable snapshot of a Philox generator's state."""
    state = gen.bit_generator.state
    return {
        "counter": [int(v) for v in state["state"]["counter"]],
        "key": [int(v) for v in state["state"]["key"]],
        "buffer": [int(v) for v in state["buffer"]],
        "buffer_pos": int(state["buffer_pos"]),
        "has_uint32": int(state["has_uint32"]),
        "uinteger": int(state["uinteger"]),
    }


def set_state(gen: np.random.Generator, snapshot: dict) -> None:
    """Restore a generator from a :func:`get_state` snapshot."""
    gen.bit_generator.state = {
        "bit_generator": "Philox",
        "state": {
            "counter": np.array(snapshot["counter"], dtype=np.uint64),
            "key": np.array(snapshot["key"], dtype=np.uint64),
        },
        "buffer": np.array(snapshot["buffer"], dtype=np.uint64),
        "buffer_pos": int(snapshot["buffer_pos"]),
        "has_uint32": int(snapshot["has_uint32"]),
        "uinteger": int(snapshot["uinteger"]),
    }
