"""Deterministic Gaussian sampling on a counter-based generator.

All randomness in the package flows through :func:`standard_normal_matrix`:
uniform bits come from the Philox4x64-10 counter PRNG keyed by the caller's
seed, and normals are produced by the Box-Muller transform.  Fixed seed means
a bitwise-identical matrix, independent of platform and of how many draws
other components have made.
"""

import numpy as np

# Salt for deriving auxiliary streams (fresh columns after a rank-deficient
# sketch, the y-side vectors of an adjoint test) from a user seed.
_SALT = 0x9E3779B97F4A7C15


def _uniforms(count, seed):
    gen = np.random.Generator(np.random.Philox(key=np.uint64(seed & 0xFFFFFFFFFFFFFFFF)))
    return gen.random(count)


def standard_normal(count, seed):
    """Return `count` i.i.d. standard normals as a 1-D array."""
    pairs = (count + 1) // 2
    u = _uniforms(2 * pairs, seed)
    # Box-Muller; shift u1 into (0, 1] so the log is finite.
    u1 = 1.0 - u[:pairs]
    u2 = u[pairs:]
    radius = np.sqrt(-2.0 * np.log(u1))
    z = np.concatenate([radius * np.cos(2.0 * np.pi * u2),
                        radius * np.sin(2.0 * np.pi * u2)])
    return z[:count]


def standard_normal_matrix(n, m, seed):
    """Return an n-by-m matrix of i.i.d. standard normals (C-order fill)."""
    if n < 1 or m < 1:
        raise ValueError(f"matrix dimensions must be positive, got {n}x{m}")
    return standard_normal(n * m, seed).reshape(n, m)


def derived_seed(seed, salt=1):
    """A decorrelated companion seed for auxiliary draws."""
    return (int(seed) ^ (_SALT * int(salt))) & 0xFFFFFFFFFFFFFFFF
