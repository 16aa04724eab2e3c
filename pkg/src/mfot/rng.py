"""Counter-based random number generation.

Every draw is a pure function of (seed, stream, counters), so noise used by a
particle simulation can be replayed exactly and generated in any order.
Uniforms come from a splitmix64-style hash, normals from Box-Muller.
"""

from __future__ import annotations

import numpy as np

_GAMMA = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# stream tags, kept distinct so different consumers never collide
STREAM_NOISE = 1
STREAM_INIT = 2
STREAM_TARGET = 3
STREAM_BATCH = 4
STREAM_EVAL = 5


def _mix(z: np.ndarray) -> np.ndarray:
    with np.errstate(over="ignore"):
        z = (z + _GAMMA) & np.uint64(0xFFFFFFFFFFFFFFFF)
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
        return z ^ (z >> np.uint64(31))


def _hash_counters(seed: int, stream: int, counters: np.ndarray) -> np.ndarray:
    h = _mix(np.uint64(seed & 0xFFFFFFFFFFFFFFFF) + np.uint64(0))
    h = _mix(h ^ np.uint64(stream))
    out = np.full(counters.shape[:-1], h, dtype=np.uint64)
    for k in range(counters.shape[-1]):
        out = _mix(out ^ counters[..., k].astype(np.uint64))
    return out


def uniforms(seed: int, stream: int, counters: np.ndarray, salt: int = 0) -> np.ndarray:
    """Uniform(0,1) draws indexed by integer counter tuples.

    counters: integer array of shape (..., k); one draw per leading index.
    """
    counters = np.asarray(counters)
    h = _mix(_hash_counters(seed, stream, counters) ^ np.uint64(salt))
    # keep 53 bits, shift into (0, 1); never returns exactly 0
    return ((h >> np.uint64(11)).astype(np.float64) + 0.5) * (2.0 ** -53)


def normals(seed: int, stream: int, counters: np.ndarray) -> np.ndarray:
    """Standard normal draws indexed by counter tuples, via Box-Muller."""
    u1 = uniforms(seed, stream, counters, salt=0x1234_5678)
    u2 = uniforms(seed, stream, counters, salt=0x8765_4321)
    return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)


def noise_increments(seed: int, n_particles: int, n_steps: int, d: int,
                     dt: float) -> np.ndarray:
    """Brownian increments dW of shape (n_steps, n_particles, d), variance dt.

    The (n, i, j) entry depends only on (seed, n, i, j).
    """
    n_idx, i_idx, j_idx = np.meshgrid(
        np.arange(n_steps, dtype=np.uint64),
        np.arange(n_particles, dtype=np.uint64),
        np.arange(d, dtype=np.uint64),
        indexing="ij",
    )
    counters = np.stack([n_idx, i_idx, j_idx], axis=-1)
    return np.sqrt(dt) * normals(seed, STREAM_NOISE, counters)


def standard_normals(seed: int, stream: int, shape: tuple[int, ...],
                     tag: int = 0) -> np.ndarray:
    """Standard normal array with a flat counter layout plus a tag counter."""
    n = int(np.prod(shape)) if shape else 1
    idx = np.arange(n, dtype=np.uint64)
    counters = np.stack([np.full(n, tag, dtype=np.uint64), idx], axis=-1)
    return normals(seed, stream, counters).reshape(shape)


def uniform_box(seed: int, stream: int, n: int, lo: np.ndarray, hi: np.ndarray,
                tag: int = 0) -> np.ndarray:
    """n uniform points in the box [lo, hi]^d, shape (n, d)."""
    lo = np.atleast_1d(np.asarray(lo, dtype=float))
    hi = np.atleast_1d(np.asarray(hi, dtype=float))
    d = lo.shape[0]
    i_idx, j_idx = np.meshgrid(np.arange(n, dtype=np.uint64),
                               np.arange(d, dtype=np.uint64), indexing="ij")
    counters = np.stack([np.full_like(i_idx, tag), i_idx, j_idx], axis=-1)
    u = uniforms(seed, stream, counters)
    return lo + (hi - lo) * u
