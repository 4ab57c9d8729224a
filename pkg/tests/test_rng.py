"""Determinism and stream-splitting of the seeded RNG."""

import numpy as np

from rfsk.rng import Rng


def test_same_seed_same_stream():
    a = Rng(42).normal((16,))
    b = Rng(42).normal((16,))
    assert np.array_equal(a, b)


def test_different_seeds_differ():
    assert not np.array_equal(Rng(1).normal((16,)), Rng(2).normal((16,)))


def test_child_streams_are_independent_of_draw_order():
    r1 = Rng(7)
    _ = r1.normal((100,))  # consume from the parent
    c1 = r1.child("weights").normal((8,))
    c2 = Rng(7).child("weights").normal((8,))
    assert np.array_equal(c1, c2)


def test_children_with_different_tags_differ():
    r = Rng(7)
    assert not np.array_equal(r.child("a").normal((8,)), r.child("b").normal((8,)))
    assert not np.array_equal(r.child(0).normal((8,)), r.child(1).normal((8,)))


def test_nested_children_are_path_addressed():
    a = Rng(3).child("x").child(4).normal((4,))
    b = Rng(3).child("x").child(4).normal((4,))
    assert np.array_equal(a, b)


def test_dtypes_and_std():
    r = Rng(11)
    x = r.normal((1000,), std=0.02, dtype=np.float32)
    assert x.dtype == np.float32
    assert abs(float(x.std()) - 0.02) < 0.005
    y = Rng(11).child("u").uniform((100,), low=-1, high=1)
    assert y.min() >= -1 and y.max() <= 1


def test_integers_and_permutation_deterministic():
    assert np.array_equal(Rng(5).integers(0, 100, (10,)), Rng(5).integers(0, 100, (10,)))
    assert np.array_equal(Rng(5).permutation(10), Rng(5).permutation(10))
