from __future__ import annotations

import math

import numpy as np
import pytest

from pushsum_fl.errors import DimensionMismatchError, NonFiniteError
from pushsum_fl.vecmath import (
    SeededRng,
    Stream,
    as_param_vector,
    axpy,
    dot,
    finite_diff_grad,
    l2_norm,
)


def test_axpy_examples():
    np.testing.assert_array_equal(axpy(0.0, np.array([5.0, 7.0]), np.array([1.0, 2.0])), [1.0, 2.0])
    np.testing.assert_array_equal(axpy(1.0, np.array([1.0, 1.0]), np.array([2.0, 3.0])), [3.0, 4.0])
    np.testing.assert_allclose(axpy(-0.1, np.array([10.0, 20.0]), np.array([1.0, 2.0])), [0.0, 0.0], atol=1e-15)


def test_axpy_does_not_mutate():
    x, y = np.array([1.0, 2.0]), np.array([3.0, 4.0])
    axpy(2.0, x, y)
    np.testing.assert_array_equal(x, [1.0, 2.0])
    np.testing.assert_array_equal(y, [3.0, 4.0])


def test_dimension_mismatch_names_both_dims():
    with pytest.raises(DimensionMismatchError) as err:
        dot(np.ones(2), np.ones(3))
    assert (err.value.left, err.value.right) == (2, 3)


@pytest.mark.parametrize("x, expected", [((0.0, 0.0, 0.0), 0.0), ((3.0, 4.0), 5.0), ((1.0, 1.0, 1.0, 1.0), 2.0)])
def test_l2_norm(x, expected):
    assert l2_norm(np.array(x)) == expected


def test_as_param_vector_rejects_nan_and_empty():
    with pytest.raises(NonFiniteError):
        as_param_vector([1.0, math.nan])
    with pytest.raises(ValueError):
        as_param_vector([])


def test_finite_diff_quadratic_and_constant():
    g = finite_diff_grad(lambda x: 0.5 * float(np.dot(x, x)), np.array([2.0, -1.0]))
    np.testing.assert_allclose(g, [2.0, -1.0], atol=1e-8)
    g = finite_diff_grad(lambda x: 3.0, np.array([0.3, 4.0, -2.0]))
    np.testing.assert_allclose(g, 0.0, atol=1e-10)


def test_finite_diff_reports_coordinate():
    def f(x):
        return math.inf if x[1] > 0.5 else float(x.sum())

    with pytest.raises(NonFiniteError) as err:
        finite_diff_grad(f, np.array([0.0, 0.5]), h=0.1)
    assert err.value.index == 1


@pytest.mark.parametrize("dim", [1, 10, 1000, 10**6])
def test_squared_norm_tracks_dot(dim):
    x = np.random.default_rng(dim).normal(size=dim)
    d = dot(x, x)
    assert abs(l2_norm(x) ** 2 - d) <= 4 * np.spacing(d)


def test_finite_diff_error_shrinks_quadratically():
    x = np.array([0.7, -1.2, 2.0])

    def cubic(v):
        return float(np.sum(v**3) + 0.5 * np.dot(v, v))

    exact = 3 * x**2 + x
    coarse = np.max(np.abs(finite_diff_grad(cubic, x, h=1e-2) - exact))
    fine = np.max(np.abs(finite_diff_grad(cubic, x, h=5e-3) - exact))
    assert fine * 3 <= coarse

    # degree two: no truncation term at all
    for h in (1e-2, 5e-3):
        g = finite_diff_grad(lambda v: 0.5 * float(np.dot(v, v)) - v[0], x, h=h)
        np.testing.assert_allclose(g, x - np.array([1.0, 0.0, 0.0]), atol=1e-9)


def test_streams_are_keyed_not_ordered():
    rng = SeededRng(42)
    a = rng.stream(Stream.MINIBATCH, client=3, round_idx=7, iteration=1).random(5)
    rng.stream(Stream.TOPOLOGY, round_idx=2).random(100)
    b = SeededRng(42).stream(Stream.MINIBATCH, client=3, round_idx=7, iteration=1).random(5)
    np.testing.assert_array_equal(a, b)
    c = rng.stream(Stream.MINIBATCH, client=4, round_idx=7, iteration=1).random(5)
    assert not np.array_equal(a, c)


def test_negative_stream_key_rejected():
    with pytest.raises(ValueError):
        SeededRng(0).stream(Stream.DATA, client=-1)
