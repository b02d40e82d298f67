"""Independent reference implementations used to freeze expected values."""

import math

M64 = (1 << 64) - 1
GOLDEN = 0x9E3779B97F4A7C15


def splitmix_signs(seed, j, d):
    """Scalar SplitMix64 on Python ints: the +/-1 stream for (seed, j)."""
    state = (seed ^ ((j + 1) * GOLDEN)) & M64
    out = []
    while len(out) < d:
        state = (state + GOLDEN) & M64
        z = state
        z = ((z ^ (z >> 30)) * 0xBF58476D1CE4E5B9) & M64
        z = ((z ^ (z >> 27)) * 0x94D049BB133111EB) & M64
        z ^= z >> 31
        out.extend(1 if (z >> t) & 1 else -1 for t in range(64))
    return out[:d]


def normal_cdf(x):
    return 0.5 * math.erfc(-x / math.sqrt(2))
