import numpy as np
import pytest
from hypothesis import given, settings, strategies as st

from mfglab.errors import InvalidInputError
from mfglab.functions import (Bump, CosineRidge, Gaussian, Quadratic, SoftNorm, SumFunction, Zero, from_dict)

from oracles import central_diff

FUNCS = [Quadratic(2.0), SoftNorm(1.5), Gaussian(0.7, 1.3), Bump(1.0, 2.0), CosineRidge(0.4),
         SumFunction((Quadratic(1.0), Gaussian(0.5, 1.0)))]


@pytest.mark.parametrize("f", FUNCS, ids=lambda f: f.name)
@pytest.mark.parametrize("d", [1, 2, 3])
def test_derivatives_match_finite_differences(f, d, rng):
    for q in rng.uniform(-2.2, 2.2, size=(6, d)):
        g = central_diff(f.value, q, 1e-5)
        assert np.allclose(g, f.grad(q), atol=1e-7)
        H = central_diff(f.grad, q, 1e-5)
        assert np.allclose(H, f.hess(q), atol=1e-6)
        T = central_diff(f.hess, q, 1e-5)
        assert np.allclose(T, f.third(q), atol=1e-5)


@pytest.mark.parametrize("f", FUNCS, ids=lambda f: f.name)
def test_batched_shapes(f):
    q = np.zeros((4, 3, 2))
    assert f.value(q).shape == (4, 3)
    assert f.grad(q).shape == (4, 3, 2)
    assert f.hess(q).shape == (4, 3, 2, 2)
    assert f.third(q).shape == (4, 3, 2, 2, 2)


def test_bump_profile():
    b = Bump(1.0, 2.0)
    assert b.value(np.zeros(2)) == 1.0
    assert b.value(np.array([2.0, 0.0])) == 0.0
    assert b.value(np.array([3.0, 1.0])) == 0.0
    assert b.value(np.array([1.5, 0.0])) == pytest.approx(0.5)


def test_bump_smooth_across_junctions():
    b = Bump(1.0, 2.0)
    for r0 in (1.0, 2.0):
        left = np.array([[r0 - 1e-7]])
        right = np.array([[r0 + 1e-7]])
        assert np.allclose(b.grad(left), b.grad(right), atol=1e-5)
        assert np.allclose(b.hess(left), b.hess(right), atol=1e-5)


@given(st.lists(st.floats(-3, 3), min_size=2, max_size=2))
def test_bump_is_even(x):
    q = np.array(x)
    assert Bump(1.0, 2.0).value(q) == Bump(1.0, 2.0).value(-q)


def test_bump_rejects_bad_radii():
    with pytest.raises(InvalidInputError):
        Bump(2.0, 1.0)


def test_convexity_moduli():
    assert Quadratic(3.0).convexity_modulus == 3.0
    assert Gaussian(1.0, 1.0).convexity_modulus == -2.0
    assert (Quadratic(3.0) + Gaussian(1.0, 1.0)).convexity_modulus == 1.0


@pytest.mark.parametrize("f", FUNCS, ids=lambda f: f.name)
def test_dict_round_trip(f):
    g = from_dict(f.to_dict())
    q = np.array([0.3, -1.1])
    assert g.value(q) == f.value(q)


def test_from_dict_zero_and_errors():
    assert isinstance(from_dict(None), Zero)
    assert isinstance(from_dict(0), Zero)
    with pytest.raises(InvalidInputError):
        from_dict({"name": "nope"})
    with pytest.raises(InvalidInputError):
        from_dict({"name": "quadratic", "bogus": 1})
    with pytest.raises(InvalidInputError):
        from_dict([1, 2])
