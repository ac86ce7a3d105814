import hashlib

import numpy as np
from hypothesis import given
from hypothesis import strategies as st

from hdbeta.rng import derive_seed, generator


def test_derive_seed_matches_sha256_prefix():
    digest = hashlib.sha256(b"7/chain/2").digest()
    assert derive_seed(7, "chain", 2) == int.from_bytes(digest[:8], "little")


@given(st.integers(0, 2**31), st.text(max_size=8))
def test_streams_are_reproducible(seed, label):
    a = generator(seed, label).standard_normal(5)
    b = generator(seed, label).standard_normal(5)
    assert np.array_equal(a, b)


def test_labels_give_distinct_streams():
    a = generator(1, "chain", 0).random(8)
    b = generator(1, "chain", 1).random(8)
    c = generator(2, "chain", 0).random(8)
    assert not np.array_equal(a, b)
    assert not np.array_equal(a, c)
