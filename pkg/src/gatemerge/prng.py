"""Counter-based uniform streams for reproducible DARE masks.

A stream is keyed by ``(seed, concept_id, tensor_name)``. Its state is the
FNV-1a-64 hash of ``seed.to_bytes(8, "little") + concept_id + b"\\x00" +
tensor_name``; element ``i`` draws ``splitmix64(state + (i + 1) * GOLDEN)``
and keeps the top 53 bits as a float in ``[0, 1)``. Every element can be
computed independently, so masks do not depend on evaluation order.
"""

from __future__ import annotations

import numpy as np

MASK64 = 0xFFFFFFFFFFFFFFFF
GOLDEN = 0x9E3779B97F4A7C15
FNV_OFFSET = 0xCBF29CE484222325
FNV_PRIME = 0x100000001B3

_MIX1 = np.uint64(0xBF58476D1CE4E5B9)
_MIX2 = np.uint64(0x94D049BB133111EB)


def fnv1a64(data: bytes) -> int:
    h = FNV_OFFSET
    for byte in data:
        h ^= byte
        h = (h * FNV_PRIME) & MASK64
    return h


def splitmix64(z: int) -> int:
    """Scalar splitmix64 finalizer (no state increment)."""
    z &= MASK64
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & MASK64
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & MASK64
    z ^= z >> 31
    return z


def stream_state(seed: int, concept_id: str, tensor_name: str) -> int:
    if not 0 <= seed <= MASK64:
        raise ValueError(f"seed must be an unsigned 64-bit integer, got {seed}")
    key = (
        seed.to_bytes(8, "little")
        + concept_id.encode("utf-8")
        + b"\x00"
        + tensor_name.encode("utf-8")
    )
    return fnv1a64(key)


def uniform_stream(seed: int, concept_id: str, tensor_name: str, n: int) -> np.ndarray:
    """First ``n`` uniforms of the keyed stream, as float64 in ``[0, 1)``."""
    state = np.uint64(stream_state(seed, concept_id, tensor_name))
    counter = np.arange(1, n + 1, dtype=np.uint64)
    # uint64 array arithmetic wraps modulo 2**64
    z = state + counter * np.uint64(GOLDEN)
    z ^= z >> np.uint64(30)
    z *= _MIX1
    z ^= z >> np.uint64(27)
    z *= _MIX2
    z ^= z >> np.uint64(31)
    return (z >> np.uint64(11)).astype(np.float64) * 2.0**-53


def drop_mask(seed: int, concept_id: str, tensor_name: str, shape, p: float) -> np.ndarray:
    """Boolean mask, True where the element is dropped (``u < p``)."""
    n = int(np.prod(shape, dtype=np.int64))
    return (uniform_stream(seed, concept_id, tensor_name, n) < p).reshape(shape)
