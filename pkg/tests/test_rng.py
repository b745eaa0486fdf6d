import numpy as np
from hypothesis import given, settings
from hypothesis import strategies as st

from splitstream.rng import Rng, mix64

from oracles import splitmix64

# frozen from the pure-Python oracle
SEED0 = [0xE220A8397B1DCDAF, 0x6E789E6AA1B965F4, 0x06C45D188009454F]
SEED1234567 = [0x599ED017FB08FC85, 0x2C73F08458540FA5]


def test_reference_values():
    assert Rng(0).next_u64(3).tolist() == SEED0
    assert Rng(1234567).next_u64(2).tolist() == SEED1234567
    assert splitmix64(0, 3) == SEED0


@settings(max_examples=50)
@given(st.integers(0, 2**64 - 1), st.integers(1, 40))
def test_matches_scalar_oracle(seed, n):
    assert Rng(seed).next_u64(n).tolist() == splitmix64(seed, n)


def test_counter_continues_across_calls():
    a = Rng(9)
    b = Rng(9)
    assert a.next_u64(3).tolist() + a.next_u64(4).tolist() == b.next_u64(7).tolist()


def test_mix64_vectorized():
    z = np.array([0, 1, 2**63], dtype=np.uint64)
    assert mix64(z).dtype == np.uint64
    assert mix64(z).tolist() == [int(mix64(np.array([v], np.uint64))[0]) for v in z]


def test_children_are_deterministic_and_distinct():
    root = Rng(5)
    assert root.child("init", 3).next_u64(4).tolist() == Rng(5).child("init", 3).next_u64(4).tolist()
    streams = {tuple(root.child(*t).next_u64(2).tolist()) for t in [("a",), ("b",), ("a", 0), ("a", 1), (0,), (1,)]}
    assert len(streams) == 6
    # deriving a child does not advance the parent
    assert root.counter == 0


def test_uniform_range_and_moments():
    u = Rng(1).uniform(100_000, -2.0, 3.0)
    assert u.min() >= -2.0 and u.max() < 3.0
    assert abs(u.mean() - 0.5) < 0.03


def test_normal_moments():
    z = Rng(2).normal(200_001, 1.5, 2.0)
    assert len(z) == 200_001
    assert abs(z.mean() - 1.5) < 0.02
    assert abs(z.std() - 2.0) < 0.02


@given(st.integers(0, 2**32), st.integers(0, 300))
def test_permutation_is_a_permutation(seed, n):
    p = Rng(seed).permutation(n)
    assert sorted(p.tolist()) == list(range(n))


def test_integers_bounds():
    k = Rng(3).integers(10_000, 7)
    assert k.min() == 0 and k.max() == 6
