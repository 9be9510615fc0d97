"""Counter-based random streams.

Every draw is a pure function of ``(seed, path, step, mark, stream)``.  Blocks
of paths can therefore be generated in any order, on any number of threads,
and always reproduce the same ensemble.  The mixing function is the SplitMix64
finalizer applied twice with seed-derived keys.
"""

import zlib

import numpy as np

_MASK = (1 << 64) - 1
_GAMMA = 0x9E3779B97F4A7C15
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)
_S30, _S27, _S31 = np.uint64(30), np.uint64(27), np.uint64(31)
_S11 = np.uint64(11)

#: number of independent draws reserved per (path, step, mark) counter
N_STREAMS = 4


def _mix_int(x):
    x &= _MASK
    x = ((x ^ (x >> 30)) * 0xBF58476D1CE4E5B9) & _MASK
    x = ((x ^ (x >> 27)) * 0x94D049BB133111EB) & _MASK
    return x ^ (x >> 31)


def _mix(x):
    # in-place on a uint64 array; wrap-around multiplication is intended
    x ^= x >> _S30
    x *= _M1
    x ^= x >> _S27
    x *= _M2
    x ^= x >> _S31
    return x


class CounterRNG:
    """Keyed hash generator over a logical (path, step, mark) lattice."""

    def __init__(self, seed, n_steps, n_marks):
        seed = int(seed)
        if not -(1 << 63) <= seed < (1 << 64):
            raise ValueError("seed must fit in 64 bits")
        self.seed = seed
        self.n_steps = int(n_steps)
        self.n_marks = int(n_marks)
        self._key1 = np.uint64(_mix_int((seed & _MASK) ^ 0x5851F42D4C957F2D))
        self._key2 = np.uint64(_mix_int(int(self._key1) + _GAMMA))

    def _bits(self, path_start, path_stop, stream):
        if not 0 <= stream < N_STREAMS:
            raise ValueError("stream index out of range")
        per_path = self.n_steps * self.n_marks
        counters = np.arange(path_start * per_path, path_stop * per_path, dtype=np.uint64)
        counters *= np.uint64(N_STREAMS)
        counters += np.uint64(stream)
        counters *= np.uint64(_GAMMA)
        counters += self._key1
        x = _mix(counters)
        x ^= self._key2
        x = _mix(x)
        return x.reshape(path_stop - path_start, self.n_steps, self.n_marks)

    def uniform(self, path_start, path_stop, stream=0):
        """Uniforms on the open interval (0, 1), shape (paths, steps, marks)."""
        x = self._bits(path_start, path_stop, stream) >> _S11
        return (x.astype(np.float64) + 0.5) * 2.0 ** -53

    def normal(self, path_start, path_stop, stream=0):
        """Standard normals from two consecutive streams (Box-Muller)."""
        u1 = self.uniform(path_start, path_stop, stream)
        u2 = self.uniform(path_start, path_stop, stream + 1)
        return np.sqrt(-2.0 * np.log(u1)) * np.cos(2.0 * np.pi * u2)

    def poisson(self, mean, path_start, path_stop, stream=0):
        """Poisson counts by inverse transform; ``mean`` broadcasts to the block."""
        u = self.uniform(path_start, path_stop, stream)
        return poisson_inverse(u, mean)


def poisson_inverse(u, mean):
    """Inverse-CDF Poisson sampler, vectorized over the active set."""
    mean = np.broadcast_to(np.asarray(mean, dtype=np.float64), u.shape)
    if np.any(mean < 0) or np.any(mean > 500):
        raise ValueError("Poisson mean per cell must lie in [0, 500]")
    counts = np.zeros(u.shape, dtype=np.int32)
    flat_u = u.ravel()
    flat_m = mean.ravel() if mean.flags.c_contiguous else np.ascontiguousarray(mean).ravel()
    flat_c = counts.ravel()
    prob = np.exp(-flat_m)
    cdf = prob.copy()
    active = np.flatnonzero(flat_u > cdf)
    k = 0
    while active.size:
        k += 1
        prob_a = prob[active] * flat_m[active] / k
        prob[active] = prob_a
        cdf[active] += prob_a
        flat_c[active] = k
        still = flat_u[active] > cdf[active]
        # guard against cdf stalling below u from rounding in the far tail
        if k > 1000:
            break
        active = active[still]
    return counts


def derive_seed(seed, label):
    """Independent 63-bit seed for a named sub-experiment of ``seed``."""
    key = zlib.crc32(str(label).encode("utf-8"))
    return _mix_int(((int(seed) & _MASK) * _GAMMA + key) & _MASK) >> 1
