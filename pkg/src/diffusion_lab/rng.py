"""Counter-based random streams (Philox4x32-10).

Every draw is a pure function of ``(master_seed, stream_id, counter)``, so a
path's randomness can be located in O(1) and simulations give identical
output for any chunking or worker count.

Layout of one Philox block:

* key   = (master_seed & 0xFFFFFFFF, master_seed >> 32)
* input = (counter_lo, counter_hi, stream_lo, stream_hi)
* output: four 32-bit words, packed into two 53-bit uniforms on [0, 1).

Counter consumption is fixed and data-independent:

* ``uniforms(k)`` consumes ``ceil(k / 2)`` blocks.
* ``normals(d)`` consumes ``ceil(d / 2)`` blocks; each block gives two
  normals through the Box-Muller transform
  ``r = sqrt(-2 log(1 - u1))``, ``z0 = r cos(2 pi u2)``, ``z1 = r sin(2 pi u2)``.
  When ``d`` is odd the final sine variate is discarded.

This choice is frozen: changing it changes every golden output.
"""

from __future__ import annotations

import numpy as np

MASK32 = np.uint64(0xFFFFFFFF)
MASK64 = (1 << 64) - 1

_M0 = np.uint64(0xD2511F53)
_M1 = np.uint64(0xCD9E8D57)
_W0 = 0x9E3779B9
_W1 = 0xBB67AE85
_ROUNDS = 10

_TWO_PI = 2.0 * np.pi
_INV_2_53 = 1.0 / 9007199254740992.0


def philox4x32(counter, key, rounds: int = _ROUNDS) -> np.ndarray:
    """Philox4x32 block function, vectorized over leading axes.

    ``counter`` has shape ``(..., 4)`` and ``key`` shape ``(..., 2)``
    (broadcastable); all entries are 32-bit words. Returns uint64 array of
    shape ``(..., 4)`` holding 32-bit words.
    """
    ctr = np.asarray(counter, dtype=np.uint64) & MASK32
    k = np.asarray(key, dtype=np.uint64) & MASK32
    c0, c1, c2, c3 = ctr[..., 0], ctr[..., 1], ctr[..., 2], ctr[..., 3]
    k0, k1 = k[..., 0], k[..., 1]
    for r in range(rounds):
        if r:
            k0 = (k0 + np.uint64(_W0)) & MASK32
            k1 = (k1 + np.uint64(_W1)) & MASK32
        p0 = _M0 * c0
        p1 = _M1 * c2
        c0, c1, c2, c3 = (
            (p1 >> np.uint64(32)) ^ c1 ^ k0,
            p1 & MASK32,
            (p0 >> np.uint64(32)) ^ c3 ^ k1,
            p0 & MASK32,
        )
    return np.stack(np.broadcast_arrays(c0, c1, c2, c3), axis=-1)


def _check_u64(name: str, value: int) -> int:
    value = int(value)
    if not 0 <= value <= MASK64:
        raise ValueError(f"{name} must be an unsigned 64-bit integer, got {value}")
    return value


class StreamBatch:
    """A batch of streams sharing a master seed and a counter position.

    Row ``i`` of every draw equals what ``Stream(master_seed, stream_ids[i])``
    would return at the same counter. Owned by one worker at a time.
    """

    def __init__(self, master_seed: int, stream_ids, counter: int = 0):
        self.master_seed = _check_u64("master_seed", master_seed)
        ids = np.atleast_1d(np.asarray(stream_ids, dtype=np.uint64))
        if ids.ndim != 1:
            raise ValueError("stream_ids must be one-dimensional")
        self.stream_ids = ids
        self.counter = _check_u64("counter", counter)
        self._key = np.array(
            [self.master_seed & 0xFFFFFFFF, self.master_seed >> 32], dtype=np.uint64
        )
        self._s_lo = ids & MASK32
        self._s_hi = ids >> np.uint64(32)

    def __len__(self) -> int:
        return len(self.stream_ids)

    def _blocks(self, nblocks: int) -> np.ndarray:
        """Raw words for ``nblocks`` consecutive counters, shape (P, nblocks, 4)."""
        if self.counter + nblocks > MASK64 + 1:
            raise OverflowError("stream counter exhausted")
        ctrs = np.arange(nblocks, dtype=np.uint64) + np.uint64(self.counter)
        p = len(self.stream_ids)
        words = np.empty((p, nblocks, 4), dtype=np.uint64)
        words[:, :, 0] = (ctrs & MASK32)[None, :]
        words[:, :, 1] = (ctrs >> np.uint64(32))[None, :]
        words[:, :, 2] = self._s_lo[:, None]
        words[:, :, 3] = self._s_hi[:, None]
        self.counter += nblocks
        return philox4x32(words, self._key)

    def _uniform_pairs(self, nblocks: int) -> np.ndarray:
        w = self._blocks(nblocks)
        hi = (w[..., 0::2] >> np.uint64(5)) << np.uint64(26)
        lo = w[..., 1::2] >> np.uint64(6)
        return (hi | lo).astype(np.float64) * _INV_2_53

    def uniforms(self, k: int) -> np.ndarray:
        """Uniform variates on [0, 1), shape (P, k)."""
        if k < 1:
            raise ValueError("k must be >= 1")
        u = self._uniform_pairs((k + 1) // 2)
        return u.reshape(len(self), -1)[:, :k]

    def normals(self, d: int) -> np.ndarray:
        """Standard normal vectors, shape (P, d)."""
        if d < 1:
            raise ValueError("dimension must be >= 1")
        u = self._uniform_pairs((d + 1) // 2)
        r = np.sqrt(-2.0 * np.log1p(-u[..., 0]))
        theta = _TWO_PI * u[..., 1]
        z = np.stack([r * np.cos(theta), r * np.sin(theta)], axis=-1)
        return z.reshape(len(self), -1)[:, :d]


class Stream:
    """A single keyed stream; thin wrapper over a one-row :class:`StreamBatch`."""

    def __init__(self, master_seed: int, stream_id: int, counter: int = 0):
        self._batch = StreamBatch(master_seed, [_check_u64("stream_id", stream_id)], counter)
        self.stream_id = int(stream_id)

    @property
    def master_seed(self) -> int:
        return self._batch.master_seed

    @property
    def counter(self) -> int:
        return self._batch.counter

    @property
    def key(self) -> tuple[int, int, int]:
        return (self.master_seed, self.stream_id, self.counter)

    def uniforms(self, k: int) -> np.ndarray:
        return self._batch.uniforms(k)[0]

    def normals(self, d: int) -> np.ndarray:
        return self._batch.normals(d)[0]

    def __repr__(self) -> str:
        return f"Stream(master_seed={self.master_seed}, stream_id={self.stream_id}, counter={self.counter})"


def derive_stream(master_seed: int, stream_id: int) -> Stream:
    """Stream whose output depends only on ``(master_seed, stream_id)``."""
    return Stream(master_seed, stream_id)


def standard_normal_vector(stream: Stream, d: int) -> np.ndarray:
    """``d`` independent N(0, 1) draws; advances the counter by ``ceil(d / 2)``."""
    return stream.normals(d)


# Role tags occupy the top 16 bits of a stream id so that different
# processes driven by one master seed never share randomness.
ROLE_SHIFT = 48


def path_stream_ids(role: int, start: int, stop: int) -> np.ndarray:
    if stop > (1 << ROLE_SHIFT):
        raise ValueError("too many paths for the stream-id layout")
    return (np.uint64(role) << np.uint64(ROLE_SHIFT)) | np.arange(start, stop, dtype=np.uint64)
