"""Counter-based random numbers (Philox4x32-10), vectorized over counters.

Every draw is a pure function of ``(key, stream, index)`` so that samples can be
generated in any order, on any number of threads, and still be bit-identical.
"""

from __future__ import annotations

import numpy as np

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = np.uint64(0x9E3779B9)
_W1 = np.uint64(0xBB67AE85)
_MASK32 = np.uint64(0xFFFFFFFF)
_SHIFT32 = np.uint64(32)
_ROUNDS = 10


def philox4x32(counter: np.ndarray, key) -> np.ndarray:
    """Apply Philox4x32-10 to an ``(..., 4)`` array of 32-bit counter words.

    ``key`` is a pair of 32-bit words; each may be an array broadcasting
    against ``counter[..., 0]``. Returns an array of the same shape holding the
    four 32-bit output words (stored as uint64 so products do not overflow).
    """
    ctr = np.asarray(counter, dtype=np.uint64) & _MASK32
    c0, c1, c2, c3 = (ctr[..., i].copy() for i in range(4))
    k0 = np.asarray(key[0], dtype=np.uint64) & _MASK32
    k1 = np.asarray(key[1], dtype=np.uint64) & _MASK32
    for r in range(_ROUNDS):
        if r:
            k0 = (k0 + _W0) & _MASK32
            k1 = (k1 + _W1) & _MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        hi0, lo0 = p0 >> _SHIFT32, p0 & _MASK32
        hi1, lo1 = p1 >> _SHIFT32, p1 & _MASK32
        c0, c1, c2, c3 = hi1 ^ c1 ^ k0, lo1, hi0 ^ c3 ^ k1, lo0
    return np.stack([c0, c1, c2, c3], axis=-1)


def _split64(x) -> tuple[np.ndarray, np.ndarray]:
    x = np.asarray(x, dtype=np.uint64)
    return x & _MASK32, x >> _SHIFT32


def _counters(streams, n_blocks: int) -> np.ndarray:
    """Counter words ``(block_index, stream_id)`` with shape ``(len(streams), n_blocks, 4)``."""
    streams = np.atleast_1d(np.asarray(streams, dtype=np.uint64))
    s_lo, s_hi = _split64(streams)
    i_lo, i_hi = _split64(np.arange(n_blocks, dtype=np.uint64))
    ctr = np.empty((streams.size, n_blocks, 4), dtype=np.uint64)
    ctr[..., 0] = i_lo[None, :]
    ctr[..., 1] = i_hi[None, :]
    ctr[..., 2] = s_lo[:, None]
    ctr[..., 3] = s_hi[:, None]
    return ctr


def random_blocks(master_seed: int, streams, n_blocks: int) -> np.ndarray:
    """Raw 32-bit words for ``n_blocks`` consecutive counters of each stream.

    ``streams`` is an int or 1-d array of stream ids; the result has shape
    ``(len(streams), n_blocks, 4)``. The key is the 64-bit master seed, the
    128-bit counter is ``(block_index, stream_id)``.
    """
    ctr = _counters(streams, n_blocks)
    m = int(master_seed) & 0xFFFFFFFFFFFFFFFF
    return philox4x32(ctr, (m & 0xFFFFFFFF, m >> 32))


def _box_muller(w: np.ndarray) -> np.ndarray:
    u1 = _to_open_unit(w[..., 0], w[..., 1])
    u2 = _to_open_unit(w[..., 2], w[..., 3])
    r = np.sqrt(-2.0 * np.log(u1))
    theta = 2.0 * np.pi * u2
    z = np.empty(w.shape[:-1] + (2,))
    z[..., 0] = r * np.cos(theta)
    z[..., 1] = r * np.sin(theta)
    return z.reshape(w.shape[:-2] + (-1,))


def _to_open_unit(hi: np.ndarray, lo: np.ndarray) -> np.ndarray:
    # 53-bit mantissa, shifted by half an ulp so the result lies in (0, 1)
    k = (hi >> np.uint64(5)) * np.uint64(1 << 26) + (lo >> np.uint64(6))
    return (k.astype(np.float64) + 0.5) / float(1 << 53)


def uniform(master_seed: int, streams, n: int) -> np.ndarray:
    """Uniforms in (0, 1), shape ``(len(streams), n)``."""
    n_blocks = (n + 1) // 2
    w = random_blocks(master_seed, streams, n_blocks)
    u = np.empty(w.shape[:2] + (2,))
    u[..., 0] = _to_open_unit(w[..., 0], w[..., 1])
    u[..., 1] = _to_open_unit(w[..., 2], w[..., 3])
    return u.reshape(w.shape[0], -1)[:, :n]


def standard_normal(master_seed: int, streams, n: int) -> np.ndarray:
    """Standard normals via Box-Muller, shape ``(len(streams), n)``."""
    return _box_muller(random_blocks(master_seed, streams, (n + 1) // 2))[:, :n]


def standard_normal_many(master_seeds, streams, n: int) -> np.ndarray:
    """``standard_normal`` for several master seeds at once, shape ``(K, len(streams), n)``.

    Row ``k`` is bit-identical to ``standard_normal(master_seeds[k], streams, n)``.
    """
    # build from Python ints: a mixed list above 2**63 would otherwise go through float64
    seeds = np.array([int(m) & 0xFFFFFFFFFFFFFFFF for m in master_seeds], dtype=np.uint64)
    n_blocks = (n + 1) // 2
    ctr = _counters(streams, n_blocks)
    k_lo, k_hi = _split64(seeds)
    shape = (-1, 1, 1)
    w = philox4x32(ctr[None], (k_lo.reshape(shape), k_hi.reshape(shape)))
    return _box_muller(w)[..., :n]


def derive_seed(*parts) -> int:
    """Hash integers/strings into a 64-bit seed (order-sensitive)."""
    words = []
    for p in parts:
        if isinstance(p, str):
            words.extend(p.encode())
        elif isinstance(p, float):
            words.append(int(round(p * 1_000_000)))
        else:
            words.append(int(p))
    state = np.random.SeedSequence(words).generate_state(2, dtype=np.uint32)
    return int(state[0]) | (int(state[1]) << 32)
