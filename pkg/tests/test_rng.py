"""Substream derivation and order-preserving parallel map."""

import numpy as np
import pytest

from second_opinions.rng import ordered_map, substream


def test_substream_is_deterministic():
    a = substream(42, "stage", 3).random(8)
    b = substream(42, "stage", 3).random(8)
    np.testing.assert_array_equal(a, b)


def test_substream_keys_change_the_stream():
    base = substream(42, "stage", 3).random(8)
    assert not np.array_equal(base, substream(42, "stage", 4).random(8))
    assert not np.array_equal(base, substream(42, "other", 3).random(8))
    assert not np.array_equal(base, substream(43, "stage", 3).random(8))


def test_substream_distinguishes_int_and_str_keys():
    assert not np.array_equal(substream(0, 1).random(4), substream(0, "1").random(4))


def test_substream_key_order_matters():
    assert not np.array_equal(
        substream(0, "a", "b").random(4), substream(0, "b", "a").random(4)
    )


def test_substream_prefix_is_not_a_collision():
    # ("ab",) vs ("a", "b"): per-key hashing must keep these apart
    assert not np.array_equal(substream(0, "ab").random(4), substream(0, "a", "b").random(4))


@pytest.mark.parametrize("threads", [1, 2, 4])
def test_ordered_map_matches_serial_map(threads):
    items = list(range(50))
    assert ordered_map(lambda v: v * v, items, threads=threads) == [v * v for v in items]


def test_ordered_map_preserves_order_under_uneven_work():
    import time

    def slow_then_fast(i):
        time.sleep(0.01 if i == 0 else 0)
        return i

    assert ordered_map(slow_then_fast, list(range(8)), threads=4) == list(range(8))


def test_ordered_map_propagates_exceptions():
    def boom(i):
        if i == 3:
            raise RuntimeError("boom")
        return i

    with pytest.raises(RuntimeError, match="boom"):
        ordered_map(boom, list(range(6)), threads=2)
