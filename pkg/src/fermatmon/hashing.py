"""Keyed 64-bit hashing shared by every sketch.

All sketches in a deployment must agree bit-for-bit on where a flow lands, so
the scalar and the vectorised versions below compute exactly the same mixer
(the splitmix64 finalizer applied to ``x ^ seed``).
"""
import numpy as np

MASK64 = (1 << 64) - 1

_C1 = 0xBF58476D1CE4E5B9
_C2 = 0x94D049BB133111EB


def mix64(x, seed):
    z = (x ^ seed) & MASK64
    z = ((z ^ (z >> 30)) * _C1) & MASK64
    z = ((z ^ (z >> 27)) * _C2) & MASK64
    return z ^ (z >> 31)


def mix64_array(xs, seed):
    """Vectorised :func:`mix64`; returns ``uint64``."""
    z = np.asarray(xs, dtype=np.uint64) ^ np.uint64(seed & MASK64)
    z = (z ^ (z >> np.uint64(30))) * np.uint64(_C1)
    z = (z ^ (z >> np.uint64(27))) * np.uint64(_C2)
    return z ^ (z >> np.uint64(31))


def derive_seeds(master, n, salt=0):
    """Expand one experiment seed into ``n`` distinct 64-bit seeds."""
    out = []
    state = (master * 0x9E3779B97F4A7C15 + salt) & MASK64
    while len(out) < n:
        state = (state + 0x9E3779B97F4A7C15) & MASK64
        s = mix64(state, 0)
        if s not in out:
            out.append(s)
    return out
