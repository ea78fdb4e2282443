import numpy as np

from threshfeed import rng


def test_uniform_block_matches_elementwise_counters():
    block = rng.uniform_block(5, rng.CHANNEL, 3, start=10, count=4, width=2)
    key = rng.stream_key(5, rng.CHANNEL, 3)
    counters = np.arange(20, 28, dtype=np.uint64)
    np.testing.assert_array_equal(block.ravel(), rng.uniforms(key, counters))


def test_uniforms_open_interval_and_stream_separation():
    a = rng.uniform_block(1, rng.CHANNEL, 0, 0, 10000, 1)
    b = rng.uniform_block(1, rng.CHANNEL, 1, 0, 10000, 1)
    c = rng.uniform_block(1, rng.AUXILIARY, 0, 0, 10000, 1)
    assert a.min() > 0 and a.max() < 1
    assert not np.array_equal(a, b) and not np.array_equal(a, c)
    assert abs(np.corrcoef(a.ravel(), b.ravel())[0, 1]) < 0.05


def test_blocking_does_not_change_values():
    whole = rng.uniform_block(9, rng.CHANNEL, 2, 0, 100, 3)
    parts = np.vstack([rng.uniform_block(9, rng.CHANNEL, 2, s, 25, 3) for s in range(0, 100, 25)])
    np.testing.assert_array_equal(whole, parts)
