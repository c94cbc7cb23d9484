"""Counter-based splitmix64 generator usable inside numba kernels.

Streams are keyed by small integer tuples so a draw never depends on how
many draws other walks, trees or tree nodes consumed.
"""

import numpy as np
from numba import njit

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
M1 = np.uint64(0xBF58476D1CE4E5B9)
M2 = np.uint64(0x94D049BB133111EB)
INV53 = 1.0 / 9007199254740992.0


@njit(cache=True)
def next_u64(state):
    state[0] += GOLDEN
    z = state[0]
    z = (z ^ (z >> np.uint64(30))) * M1
    z = (z ^ (z >> np.uint64(27))) * M2
    return z ^ (z >> np.uint64(31))


@njit(cache=True)
def uniform(state):
    return float(next_u64(state) >> np.uint64(11)) * INV53


@njit(cache=True)
def randint(state, k):
    i = int(uniform(state) * k)
    return i if i < k else k - 1


@njit(cache=True)
def seeded(seed, a, b):
    state = np.empty(1, dtype=np.uint64)
    state[0] = np.uint64(seed) * M1
    next_u64(state)
    state[0] ^= np.uint64(a) * M2
    next_u64(state)
    state[0] ^= np.uint64(b) * GOLDEN
    next_u64(state)
    return state
