"""Named substream determinism."""

import numpy as np

from mlfewshot.seeding import substream


def test_same_path_same_stream():
    a = substream(7, "sample", 3, 1, 0).standard_normal(8)
    b = substream(7, "sample", 3, 1, 0).standard_normal(8)
    assert np.array_equal(a, b)


def test_different_components_differ():
    base = substream(7, "sample", 3, 1, 0).standard_normal(8)
    for other in [substream(8, "sample", 3, 1, 0),
                  substream(7, "dropout", 3, 1, 0),
                  substream(7, "sample", 4, 1, 0),
                  substream(7, "sample", 3, 2, 0),
                  substream(7, "sample", 3, 1, 1)]:
        assert not np.array_equal(base, other.standard_normal(8))


def test_attempts_give_fresh_draws():
    draws = [substream(0, "sample", 0, 0, attempt).integers(0, 1 << 30)
             for attempt in range(5)]
    assert len(set(int(d) for d in draws)) == 5
