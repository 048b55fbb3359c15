"""Counter-based random streams.

Every stream is a Philox generator keyed by ``(seed, domain, stream id)``.
Because Philox is counter based, the ``i``-th draw of a stream can be reached
directly with ``advance``, so chunked or parallel generation is bit-identical
to sequential generation.
"""

from __future__ import annotations

import numpy as np

FIELD = 1
WALK = 2
ENSEMBLE = 3
PLANT = 4

_MASK64 = (1 << 64) - 1
_BLOCK = 4  # 64-bit outputs per Philox counter increment


def _key(seed: int, domain: int, stream: int) -> int:
    if seed < 0 or seed > _MASK64:
        raise ValueError(f"seed must fit in 64 unsigned bits, got {seed}")
    if stream < 0 or stream >= 1 << 48:
        raise ValueError(f"stream id out of range: {stream}")
    return seed | ((domain & 0xFFFF) << 64) | (stream << 80)


def stream(seed: int, domain: int, stream_id: int = 0) -> np.random.Generator:
    return np.random.Generator(np.random.Philox(key=_key(seed, domain, stream_id)))


def uniforms(seed: int, domain: int, start: int, stop: int, stream_id: int = 0) -> np.ndarray:
    """Draws ``start..stop-1`` of a stream as doubles in [0, 1)."""
    if stop < start:
        raise ValueError("stop < start")
    bitgen = np.random.Philox(key=_key(seed, domain, stream_id))
    bitgen.advance(start // _BLOCK)
    skip = start % _BLOCK
    return np.random.Generator(bitgen).random(stop - start + skip)[skip:]


def derive_seed(seed: int, *path: int) -> int:
    """A child 64-bit seed, stable for a given ``(seed, *path)``."""
    ss = np.random.SeedSequence(entropy=seed, spawn_key=tuple(int(p) for p in path))
    return int(ss.generate_state(1, dtype=np.uint64)[0])
