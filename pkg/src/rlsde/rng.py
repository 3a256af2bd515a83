"""Counter-based random streams.

Every variate is a pure function of ``(seed, domain, stream, counter)``: a
SplitMix64-style hash chain turns the key into 53 uniform bits, and normals
come from the inverse normal CDF.  Nothing is stateful, so trajectories can
be generated in any order, in any chunking, on any number of workers and
still be bit-identical.
"""

from __future__ import annotations

import os
from concurrent.futures import ThreadPoolExecutor
from typing import Callable, Sequence, TypeVar

import numpy as np
from scipy.special import ndtri

# Stream domains keep the coefficient randomness independent of (X_0, W).
COEFFICIENT = 1
NOISE = 2
INITIAL = 3
JUMP_CLOCK = 4

_GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_MASK64 = (1 << 64) - 1


def _mix(x: np.ndarray) -> np.ndarray:
    x = x ^ (x >> np.uint64(30))
    x = x * _M1
    x = x ^ (x >> np.uint64(27))
    x = x * _M2
    return x ^ (x >> np.uint64(31))


def _u64(v) -> np.ndarray:
    if isinstance(v, int):
        return np.array([v & _MASK64], dtype=np.uint64)
    arr = np.asarray(v)
    if arr.dtype.kind not in "iu":
        arr = np.array([int(z) & _MASK64 for z in arr.ravel()], dtype=np.uint64).reshape(arr.shape)
    # int64 -> uint64 wraps two's complement, which is the intended masking
    return np.atleast_1d(arr.astype(np.uint64))


def hash_bits(seed: int, domain: int, streams, counters) -> np.ndarray:
    """64 hashed bits for every (stream, counter) pair; shape (len(streams), len(counters))."""
    s = _u64(streams).reshape(-1, 1)
    c = _u64(counters).reshape(1, -1)
    with np.errstate(over="ignore"):
        h = _mix(_u64(int(seed) & _MASK64) + _GOLDEN)
        h = _mix(h ^ (_u64(domain) * _GOLDEN + np.uint64(0x632BE59BD9B4E019)))
        h = _mix((h ^ s) + _GOLDEN)
        h = _mix((h ^ (c * _M2)) + _M1)
    return h


def uniforms(seed: int, domain: int, streams, counters) -> np.ndarray:
    """Uniform(0, 1) variates strictly inside the open interval."""
    bits = hash_bits(seed, domain, streams, counters) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * 2.0**-53


def normals(seed: int, domain: int, streams, counters) -> np.ndarray:
    """Standard normal variates; shape (len(streams), len(counters))."""
    return ndtri(uniforms(seed, domain, streams, counters))


_default_workers = int(os.environ.get("RLSDE_THREADS", "1") or 1)

T = TypeVar("T")


def set_default_workers(n: int) -> None:
    global _default_workers
    _default_workers = max(1, int(n))


def default_workers() -> int:
    return _default_workers


def map_chunks(
    fn: Callable[[np.ndarray], T],
    items: Sequence[int] | np.ndarray,
    chunk_size: int = 1024,
    workers: int | None = None,
) -> list[T]:
    """Apply ``fn`` to fixed-size chunks of ``items`` and return results in order.

    Chunk boundaries depend only on ``chunk_size``, never on the worker count,
    so reductions over the concatenated results are worker-count independent.
    """
    items = np.asarray(items)
    chunks = [items[i : i + chunk_size] for i in range(0, len(items), chunk_size)]
    workers = default_workers() if workers is None else max(1, int(workers))
    if workers == 1 or len(chunks) <= 1:
        return [fn(c) for c in chunks]
    with ThreadPoolExecutor(max_workers=workers) as pool:
        return list(pool.map(fn, chunks))
