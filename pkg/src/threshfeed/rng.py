"""Counter-based random numbers.

Every draw is a pure function of ``(seed, purpose, stream, counter)``: a
SplitMix64 sequence started at a key derived from the first three values and
read at position ``counter``. Nothing is stateful, so any block of trials can be
generated in any order or on any thread and the values never change.
"""

import numpy as np

GOLDEN = np.uint64(0x9E3779B97F4A7C15)
_M1 = np.uint64(0xBF58476D1CE4E5B9)
_M2 = np.uint64(0x94D049BB133111EB)

# stream namespaces
CHANNEL = 0
AUXILIARY = 1
QUANTILE_TABLE = 2
PROBES = 3


def mix64(z):
    """SplitMix64 output finalizer, applied elementwise to uint64 arrays."""
    z = np.asarray(z, dtype=np.uint64)
    with np.errstate(over="ignore"):
        z = (z ^ (z >> np.uint64(30))) * _M1
        z = (z ^ (z >> np.uint64(27))) * _M2
    return z ^ (z >> np.uint64(31))


def stream_key(seed, purpose, stream):
    """64-bit key for one (seed, purpose, stream) substream."""
    seed = np.uint64(int(seed) & 0xFFFFFFFFFFFFFFFF)
    with np.errstate(over="ignore"):
        k = mix64(np.array([seed + GOLDEN * np.uint64(purpose + 1)], dtype=np.uint64))
        k = mix64(k + GOLDEN * np.uint64(int(stream) + 1))
    return k[0]


def random_bits(key, counters):
    """Raw 64-bit outputs at the given counter positions of a substream."""
    counters = np.asarray(counters, dtype=np.uint64)
    with np.errstate(over="ignore"):
        return mix64(np.uint64(key) + GOLDEN * (counters + np.uint64(1)))


def uniforms(key, counters):
    """Doubles strictly inside (0, 1), one per counter."""
    bits = random_bits(key, counters) >> np.uint64(11)
    return (bits.astype(np.float64) + 0.5) * (1.0 / 9007199254740992.0)


def uniform_block(seed, purpose, stream, start, count, width):
    """A ``(count, width)`` array of uniforms for rows ``start .. start+count-1``.

    Row ``t`` always holds counters ``t*width .. t*width+width-1`` so a row's
    values do not depend on how the rows are blocked.
    """
    key = stream_key(seed, purpose, stream)
    rows = np.arange(start, start + count, dtype=np.uint64)[:, None]
    cols = np.arange(width, dtype=np.uint64)[None, :]
    return uniforms(key, rows * np.uint64(width) + cols)
