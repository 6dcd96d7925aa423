"""Log-space primitives and seeded randomness.

Random streams come from numpy's PCG64 bit generator (O'Neill's permuted
congruential generator, 128-bit state). Given the same seed, ``Rng`` yields
the same stream on every platform numpy supports.
"""

import numpy as np

__all__ = [
    "Rng",
    "log_sum_exp",
    "log_softmax_rows",
    "softmax_rows",
    "rng_standard_normal",
]


def log_sum_exp(v, axis=None):
    """Stable ``log(sum(exp(v)))``.

    Returns exactly ``-inf`` when every entry is ``-inf``. With ``axis=None``
    the input is flattened and must be nonempty.
    """
    v = np.asarray(v, dtype=np.float64)
    if v.size == 0:
        raise ValueError("empty reduction")
    mx = np.max(v, axis=axis, keepdims=True)
    safe = np.where(np.isfinite(mx), mx, 0.0)
    with np.errstate(divide="ignore"):
        out = np.log(np.sum(np.exp(v - safe), axis=axis, keepdims=True)) + safe
    if axis is None:
        return float(out.reshape(()))
    return np.squeeze(out, axis=axis)


def log_softmax_rows(m):
    m = np.asarray(m, dtype=np.float64)
    mx = m.max(axis=-1, keepdims=True)
    z = m - mx
    return z - np.log(np.exp(z).sum(axis=-1, keepdims=True))


def softmax_rows(m):
    """Row-wise softmax over the last axis."""
    m = np.asarray(m, dtype=np.float64)
    e = np.exp(m - m.max(axis=-1, keepdims=True))
    return e / e.sum(axis=-1, keepdims=True)


class Rng:
    """Single-owner seeded generator (PCG64).

    ``state`` / ``set_state`` expose the full generator state as six unsigned
    64-bit words so it can be stored in a checkpoint.
    """

    def __init__(self, seed=0):
        self.seed = int(seed) & 0xFFFFFFFFFFFFFFFF
        self.gen = np.random.Generator(np.random.PCG64(self.seed))

    def standard_normal(self, size):
        return self.gen.standard_normal(size)

    def uniform(self, low, high, size):
        return self.gen.uniform(low, high, size)

    def random(self, size=None):
        return self.gen.random(size)

    def permutation(self, n):
        return self.gen.permutation(n)

    def integers(self, low, high=None, size=None):
        return self.gen.integers(low, high, size)

    def choice(self, n, p):
        return int(self.gen.choice(n, p=p))

    def state(self):
        st = self.gen.bit_generator.state
        mask = (1 << 64) - 1
        s, inc = st["state"]["state"], st["state"]["inc"]
        return np.array(
            [s >> 64, s & mask, inc >> 64, inc & mask,
             st["has_uint32"], st["uinteger"]],
            dtype=np.uint64,
        )

    def set_state(self, words):
        w = [int(x) for x in np.asarray(words, dtype=np.uint64)]
        self.gen.bit_generator.state = {
            "bit_generator": "PCG64",
            "state": {"state": (w[0] << 64) | w[1], "inc": (w[2] << 64) | w[3]},
            "has_uint32": w[4],
            "uinteger": w[5],
        }


def rng_standard_normal(rng, n):
    if n < 1:
        raise ValueError("n must be >= 1")
    return rng.standard_normal(n)
