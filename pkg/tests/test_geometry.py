import math

import numpy as np
import pytest
from hypothesis import given, settings
from hypothesis import strategies as st

from oracles import hull_polytope, pontryagin_grid_mismatches, random_polygon_pair
from swarm_mpc.geometry import (Disc, EmptyDifference, HPolytope, NonpositiveRadius,
                                build_safe_set, contains, inscribe_polytope, pontryagin_diff,
                                polygon_area, translate)

UNIT = HPolytope.box([-1, -1], [1, 1])


def regular_vertices(radius, n):
    """Vertices of the regular n-gon whose facet normals sit at 2 pi k / n."""
    ang = math.pi / n + 2 * math.pi * np.arange(n) / n
    return radius * np.column_stack([np.cos(ang), np.sin(ang)])


# -- translate ---------------------------------------------------------------

def test_translate_identity():
    T = translate(UNIT, [0, 0])
    assert np.array_equal(T.A, UNIT.A) and np.array_equal(T.b, UNIT.b)


def test_translate_offset_box():
    T = translate(UNIT, [2, 0])
    assert np.allclose(T.vertices().min(axis=0), [1, -1])
    assert np.allclose(T.vertices().max(axis=0), [3, 1])


def test_translate_16gon_shifts_vertices():
    P = inscribe_polytope(Disc([0, 0], 3.0), 16)
    moved = translate(P, [1, 1]).vertices()
    expect = regular_vertices(3.0, 16) + 1.0
    # same vertex set, compared order-free
    d = np.linalg.norm(moved[:, None] - expect[None], axis=2)
    assert d.min(axis=1).max() < 1e-9 and d.min(axis=0).max() < 1e-9


@given(st.floats(-50, 50), st.floats(-50, 50))
def test_translate_keeps_normals_bitwise(x, y):
    P = inscribe_polytope(Disc([0, 0], 2.0), 8)
    assert np.array_equal(translate(P, [x, y]).A, P.A)


# -- pontryagin difference ----------------------------------------------------

def test_pontryagin_boxes():
    R = pontryagin_diff(HPolytope.box([-3, -3], [3, 3]), UNIT)
    assert np.allclose(np.sort(R.vertices(), axis=0), np.sort(HPolytope.box([-2, -2], [2, 2]).vertices(), axis=0))


def test_pontryagin_point_identity():
    P = inscribe_polytope(Disc([0, 0], 3.0), 16)
    point = HPolytope.box([0, 0], [0, 0])
    assert np.allclose(pontryagin_diff(P, point).b, P.b)


def test_pontryagin_empty_raises():
    with pytest.raises(EmptyDifference):
        pontryagin_diff(UNIT, HPolytope.box([-2, -2], [2, 2]))


def test_pontryagin_16gons_grid():
    bad, inside = pontryagin_grid_mismatches(regular_vertices(3.0, 16), regular_vertices(1.0, 16))
    assert inside > 0 and bad == 0


def test_pontryagin_random_pairs_grid():
    rng = np.random.default_rng(7)
    for _ in range(20):
        P, Q = random_polygon_pair(rng)
        bad, inside = pontryagin_grid_mismatches(P, Q)
        assert bad == 0


def test_pontryagin_minkowski_consistency():
    rng = np.random.default_rng(3)
    P, _ = hull_polytope(regular_vertices(3.0, 16))
    Q, Qv = hull_polytope(np.array([[0.6, 0.1], [-0.4, 0.5], [-0.3, -0.6], [0.5, -0.4]]))
    R = pontryagin_diff(P, Q)
    pts = rng.uniform(-3, 3, (5000, 2))
    inside = [q for q in pts if contains(R, q)][:1000]
    assert len(inside) >= 500
    for q in inside:
        assert all(contains(P, q + v) for v in Qv)


# -- inscribe_polytope / safe set --------------------------------------------------

@pytest.mark.parametrize("n", [4, 8])
def test_inscribe_offsets_match_support(n):
    P = inscribe_polytope(Disc([0, 0], 2.0), n)
    v = regular_vertices(2.0, n)
    support = np.max(P.A @ v.T, axis=1)
    assert np.allclose(P.b, support, atol=1e-12)
    assert np.allclose(P.b, 2.0 * math.cos(math.pi / n))
    assert np.allclose(np.linalg.norm(P.A, axis=1), 1.0)


def test_inscribe_area_converges():
    P = inscribe_polytope(Disc([0, 0], 1.7), 64)
    area = polygon_area(P.vertices())
    assert abs(area - math.pi * 1.7 ** 2) / (math.pi * 1.7 ** 2) < 0.01


def test_inscribe_needs_three_facets():
    with pytest.raises(ValueError):
        inscribe_polytope(Disc([0, 0], 1.0), 2)


@given(st.floats(0.1, 10.0), st.integers(3, 40))
@settings(max_examples=50)
def test_inscribed_is_under_approximation(r, n):
    P = inscribe_polytope(Disc([0, 0], r), n)
    v = P.vertices()
    assert len(v) == n
    assert np.allclose(np.linalg.norm(v, axis=1), r, rtol=1e-9)
    mids = 0.5 * (v + np.roll(v, -1, axis=0))
    assert np.all(np.linalg.norm(mids, axis=1) < r)


def test_safe_set_intersection_parameters():
    S = build_safe_set(Disc([0, 0], 3.0), 1.0, 8)
    v = regular_vertices(2.0, 8)
    assert np.allclose(S.b, np.max(S.A @ v.T, axis=1))


def test_safe_set_zero_footprint():
    S = build_safe_set(Disc([0, 0], 3.0), 0.0, 8)
    assert np.allclose(S.b, 3.0 * math.cos(math.pi / 8))


def test_safe_set_too_large_vehicle():
    with pytest.raises(NonpositiveRadius):
        build_safe_set(Disc([0, 0], 3.0), 3.0, 8)


# -- contains ---------------------------------------------------------------------

def test_contains_unit_box():
    assert contains(UNIT, [0, 0])
    assert not contains(UNIT, [1.5, 0])


def test_contains_radius_199_octagon():
    # circumradius 2: the apothem is 2 cos(pi/8) ~ 1.848, so radius 1.99 lies
    # inside only towards a vertex, not along a facet normal
    P = inscribe_polytope(Disc([0, 0], 2.0), 8)
    normal = P.A[3]
    q = 1.99 * normal
    assert contains(P, q) == bool(np.all(P.A @ q <= P.b + 1e-9)) == False  # noqa: E712
    vert = regular_vertices(2.0, 8)[3] / 2.0
    assert contains(P, 1.99 * vert)
    assert contains(P, 1.99 * math.cos(math.pi / 8) * normal)


def test_contains_tolerance():
    assert contains(UNIT, [1 + 5e-10, 0])
    assert not contains(UNIT, [1 + 5e-9, 0])


def test_disc_requires_positive_radius():
    with pytest.raises(NonpositiveRadius):
        Disc([0, 0], 0.0)


def test_boundedness():
    assert UNIT.is_bounded()
    assert not HPolytope(np.array([[1.0, 0], [0, 1.0], [-1.0, 0]]), np.ones(3)).is_bounded()
