import numpy as np
import pytest

from gatemerge.oracle import ref_uniform
from gatemerge.prng import GOLDEN, drop_mask, fnv1a64, splitmix64, stream_state, uniform_stream


def _contract_uniform(seed, concept_id, tensor_name, i):
    # written from the published PRNG contract, independent of gatemerge.prng
    M = (1 << 64) - 1
    h = 0xCBF29CE484222325
    for b in seed.to_bytes(8, "little") + concept_id.encode() + b"\0" + tensor_name.encode():
        h = ((h ^ b) * 0x100000001B3) & M
    z = (h + (i + 1) * 0x9E3779B97F4A7C15) & M
    z ^= z >> 30
    z = (z * 0xBF58476D1CE4E5B9) & M
    z ^= z >> 27
    z = (z * 0x94D049BB133111EB) & M
    z ^= z >> 31
    return (z >> 11) / 2.0**53


def test_fnv1a64_known_vectors():
    assert fnv1a64(b"") == 0xCBF29CE484222325
    assert fnv1a64(b"a") == 0xAF63DC4C8601EC8C
    assert fnv1a64(b"foobar") == 0x85944171F73967E8


def test_splitmix64_known_first_output():
    # splitmix64 seeded with 0 yields 0xE220A8397B1DCDAF first
    assert splitmix64(GOLDEN) == 0xE220A8397B1DCDAF


@pytest.mark.parametrize("seed,cid,name", [(0, "bo", "q_proj"), (2**64 - 1, "zed", "layers.3.v"), (42, "é", "")])
def test_vectorized_stream_matches_contract(seed, cid, name):
    u = uniform_stream(seed, cid, name, 300)
    expected = [_contract_uniform(seed, cid, name, i) for i in range(300)]
    assert u.tolist() == expected
    assert [ref_uniform(seed, cid, name, i) for i in range(5)] == expected[:5]


def test_stream_range_and_key_separation():
    u = uniform_stream(1, "a", "t", 10_000)
    assert u.min() >= 0.0 and u.max() < 1.0
    assert abs(u.mean() - 0.5) < 0.01
    assert not np.array_equal(u[:50], uniform_stream(1, "b", "t", 50))
    assert not np.array_equal(u[:50], uniform_stream(2, "a", "t", 50))
    # the 0x00 separator keeps ("ab", "c") and ("a", "bc") apart
    assert stream_state(0, "ab", "c") != stream_state(0, "a", "bc")


def test_stream_is_prefix_stable():
    assert np.array_equal(uniform_stream(3, "c", "t", 10), uniform_stream(3, "c", "t", 100)[:10])


def test_drop_mask_shape_and_extremes():
    assert drop_mask(0, "c", "t", (3, 4), 0.0).shape == (3, 4)
    assert not drop_mask(0, "c", "t", (3, 4), 0.0).any()


def test_seed_out_of_range():
    with pytest.raises(ValueError):
        stream_state(-1, "c", "t")
    with pytest.raises(ValueError):
        stream_state(2**64, "c", "t")
