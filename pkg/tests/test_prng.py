import zlib

import numpy as np
import pytest
from numpy.testing import assert_array_equal

from scratch_tickets.prng import Prng


def test_same_seed_and_path_repeat():
    assert_array_equal(Prng(3).split("a", 1).uniform(0, 1, 5), Prng(3).split("a", 1).uniform(0, 1, 5))


def test_split_does_not_consume_parent():
    reference = Prng(3).uniform(0, 1, 4)
    parent = Prng(3)
    parent.split("child").uniform(0, 1, 100)
    assert_array_equal(parent.uniform(0, 1, 4), reference)


def test_distinct_keys_give_distinct_streams():
    root = Prng(0)
    draws = [root.split(key).uniform(0, 1, 8) for key in ("a", "b", 0, 1)]
    for i in range(len(draws)):
        for j in range(i + 1, len(draws)):
            assert not np.array_equal(draws[i], draws[j])


def test_string_keys_are_stable():
    assert Prng(0).split("weights").path == (zlib.crc32(b"weights"),)
    assert Prng(0).split("a").split(2).path == (zlib.crc32(b"a"), 2)


def test_negative_keys_rejected():
    with pytest.raises(ValueError):
        Prng(0).split(-1)


def test_signs_and_choice():
    signs = Prng(1).signs((1000,))
    assert set(np.unique(signs)) == {-1.0, 1.0}

    assert Prng(2).choice(3, np.array([0.0, 1.0, 0.0])) == 1
    assert 0 <= Prng(2).integer(10) < 10
