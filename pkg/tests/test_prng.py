"""Determinism and distribution checks for the xoshiro256** generator."""

import numpy as np
import pytest

from vltseg.prng import Prng, ValidationError


def test_same_seed_identical_sequences():
    a = Prng(1234)
    b = Prng(1234)
    assert [a.next_u64() for _ in range(50)] == [b.next_u64() for _ in range(50)]


def test_same_seed_identical_tensors():
    a = Prng(7).uniform(-1, 1, (4, 5))
    b = Prng(7).uniform(-1, 1, (4, 5))
    assert np.array_equal(a, b)


def test_different_seeds_differ():
    assert Prng(1).next_u64() != Prng(2).next_u64()


def test_uniform_sample_mean():
    draws = Prng(42).uniform(0.0, 1.0, (10_000,))
    assert draws.min() >= 0.0 and draws.max() < 1.0
    assert abs(draws.mean() - 0.5) < 0.02


def test_uniform_respects_bounds():
    draws = Prng(5).uniform(-3.0, 2.0, (5_000,))
    assert draws.min() >= -3.0 and draws.max() < 2.0


def test_normal_sample_std():
    draws = Prng(42).normal(0.0, 1.0, (10_000,))
    assert abs(draws.std() - 1.0) < 0.05
    assert abs(draws.mean()) < 0.05


def test_invalid_ranges_rejected():
    with pytest.raises(ValidationError):
        Prng(0).uniform(1.0, 1.0, (2,))
    with pytest.raises(ValidationError):
        Prng(0).normal(0.0, 0.0, (2,))


def test_spawn_streams_are_independent_and_deterministic():
    root = Prng(99)
    c1 = root.spawn(0)
    c2 = root.spawn(1)
    again = Prng(99).spawn(0)
    assert c1.next_u64() == again.next_u64()
    assert c1.next_u64() != c2.next_u64()


def test_shuffle_deterministic():
    items1 = list(range(20))
    items2 = list(range(20))
    Prng(3).shuffle(items1)
    Prng(3).shuffle(items2)
    assert items1 == items2
    assert sorted(items1) == list(range(20))
