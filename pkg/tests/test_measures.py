import numpy as np
import pytest
from hypothesis import given, settings, strategies as st
from hypothesis.extra.numpy import arrays

from mfglab.errors import InvalidInputError
from mfglab.measures import (EmpiricalMeasure, WeightedMeasure, assignment_coupling, brute_force_coupling,
                             classical_interpolate, displacement_interpolate, optimal_coupling, second_moment,
                             w2_distance)

from oracles import brute_w2

coords = st.floats(-5, 5, allow_nan=False, width=64)


def clouds(count):
    @st.composite
    def build(draw):
        m = draw(st.integers(1, 6))
        d = draw(st.integers(1, 3))
        return [draw(arrays(float, (m, d), elements=coords)) for _ in range(count)]
    return build()


def test_single_particle():
    w, c = w2_distance(EmpiricalMeasure([[0.0, 0.0]]), EmpiricalMeasure([[3.0, 4.0]]))
    assert w == 5.0 and c.perm == (0,)


def test_sorted_matching_in_one_dimension():
    mu, nu = EmpiricalMeasure([0.0, 2.0]), EmpiricalMeasure([1.0, 3.0])
    w, c = w2_distance(mu, nu)
    assert w == pytest.approx(1.0) and c.perm == (0, 1)
    assert brute_force_coupling(mu.points, nu.points).cost == pytest.approx(1.0)


def test_identical_measures(rng):
    pts = rng.standard_normal((5, 2))
    w, c = w2_distance(EmpiricalMeasure(pts), EmpiricalMeasure(pts))
    assert w == 0.0 and c.perm == tuple(range(5))


def test_ties_break_to_smallest_permutation():
    a = np.array([[0.0], [0.0]])
    assert brute_force_coupling(a, a).perm == (0, 1)


@settings(max_examples=200, deadline=None)
@given(clouds(2))
def test_assignment_equals_brute_force(pair):
    a, b = pair
    assert assignment_coupling(a, b).cost == brute_force_coupling(a, b).cost
    assert brute_force_coupling(a, b).cost == pytest.approx(brute_w2(a, b), abs=1e-12)


@settings(max_examples=100, deadline=None)
@given(clouds(3))
def test_triangle_inequality(triple):
    mus = [EmpiricalMeasure(x) for x in triple]
    ab, bc, ac = (w2_distance(mus[i], mus[j])[0] for i, j in ((0, 1), (1, 2), (0, 2)))
    assert ac <= ab + bc + 1e-9


@settings(max_examples=100, deadline=None)
@given(clouds(2))
def test_symmetric_and_zero_iff_same_multiset(pair):
    a, b = (EmpiricalMeasure(x) for x in pair)
    assert w2_distance(a, b)[0] == pytest.approx(w2_distance(b, a)[0], abs=1e-12)
    shuffled = EmpiricalMeasure(pair[0][::-1])
    assert w2_distance(a, shuffled)[0] == 0.0


@settings(max_examples=100, deadline=None)
@given(clouds(2), st.floats(0, 1), st.floats(0, 1))
def test_geodesic_constant_speed(pair, s, u):
    mu, nu = (EmpiricalMeasure(x) for x in pair)
    w, c = w2_distance(mu, nu)
    s, u = sorted((s, u))
    gs = displacement_interpolate(mu, nu, s, c)
    gu = displacement_interpolate(mu, nu, u, c)
    assert w2_distance(mu, gs)[0] == pytest.approx(s * w, abs=1e-9)
    assert w2_distance(gs, gu)[0] == pytest.approx((u - s) * w, abs=1e-9)


def test_interpolation_examples():
    mu, nu = EmpiricalMeasure([0.0, 2.0]), EmpiricalMeasure([1.0, 3.0])
    assert displacement_interpolate(mu, nu, 0.0) == mu
    assert np.allclose(displacement_interpolate(mu, nu, 0.5).points.ravel(), [0.5, 2.5])
    mid = displacement_interpolate(EmpiricalMeasure([0.0]), EmpiricalMeasure([2.0]), 0.5)
    assert mid.points[0, 0] == 1.0
    with pytest.raises(InvalidInputError):
        displacement_interpolate(mu, nu, 1.5)


def test_classical_interpolation():
    mu, nu = EmpiricalMeasure([0.0]), EmpiricalMeasure([1.0])
    mix = classical_interpolate(mu, nu, 0.25)
    assert np.allclose(mix.points.ravel(), [0, 1]) and np.allclose(mix.weights, [0.75, 0.25])
    start = classical_interpolate(EmpiricalMeasure([0.0, 1.0]), EmpiricalMeasure([2.0, 3.0]), 0.0)
    assert np.allclose(start.weights[:2], 0.5)
    assert second_moment(classical_interpolate(EmpiricalMeasure([0.0]), EmpiricalMeasure([2.0]), 0.5)) == 2.0


def test_second_moment():
    assert second_moment(EmpiricalMeasure([[0.0]])) == 0.0
    assert second_moment(EmpiricalMeasure([[3.0, 4.0]])) == 25.0
    assert second_moment(EmpiricalMeasure([0.0, 2.0])) == 2.0


def test_serialization(rng):
    mu = EmpiricalMeasure(rng.standard_normal((4, 2)))
    assert EmpiricalMeasure.from_json(mu.to_json()) == mu
    lines = mu.to_csv().split("\r\n")
    assert lines[0] == "index,x0,x1"
    assert float(lines[1].split(",")[1]) == mu.points[0, 0]


def test_points_are_read_only():
    mu = EmpiricalMeasure([1.0, 2.0])
    with pytest.raises(ValueError):
        mu.points[0, 0] = 5.0


def test_validation():
    with pytest.raises(InvalidInputError):
        EmpiricalMeasure([[np.nan]])
    with pytest.raises(InvalidInputError):
        WeightedMeasure([0.0, 1.0], [0.5, 0.6])
    with pytest.raises(InvalidInputError):
        w2_distance(EmpiricalMeasure([0.0]), EmpiricalMeasure([0.0, 1.0]))
    with pytest.raises(InvalidInputError):
        optimal_coupling(EmpiricalMeasure([[0.0, 1.0]]), EmpiricalMeasure([[0.0, 1.0]]), method="sort")
