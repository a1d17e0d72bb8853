import math

import numpy as np
import pytest
import scipy.sparse as sp
from hypothesis import given, settings
from hypothesis import strategies as st
from scipy.optimize import nnls

from swarm_mpc.collision import (PolyShape, SphereShape, min_pairwise_distance,
                                 polytope_clearance_residuals, polytope_distance,
                                 sphere_clearance, sphere_clearance_grad)
from swarm_mpc.solver import NlpInstance, solve

coords = st.floats(-20, 20)


def test_sphere_coincident():
    assert sphere_clearance([1, 1], [1, 1], SphereShape(1.0, 0.0)) == pytest.approx(4.0)


def test_sphere_touching():
    assert sphere_clearance([0, 0], [2, 0], SphereShape(1.0, 0.0)) == pytest.approx(0.0)


def test_sphere_with_margin():
    assert sphere_clearance([0, 0], [0, 3], SphereShape(1.0, 0.1)) == pytest.approx(-9 + 2.1 ** 2)


def test_sphere_shape_validation():
    with pytest.raises(ValueError):
        SphereShape(0.0)
    with pytest.raises(ValueError):
        SphereShape(1.0, -0.1)


@given(coords, coords, coords, coords)
def test_sphere_symmetric(a, b, c, d):
    s = SphereShape(0.7, 0.1)
    assert sphere_clearance([a, b], [c, d], s) == sphere_clearance([c, d], [a, b], s)


@given(coords, coords, coords, coords)
@settings(max_examples=50)
def test_sphere_gradient_fd(a, b, c, d):
    s = SphereShape(1.0, 0.1)
    pi, pj = np.array([a, b]), np.array([c, d])
    gi, gj = sphere_clearance_grad(pi, pj)
    h = 1e-6
    for k in range(2):
        e = np.zeros(2)
        e[k] = h
        fdi = (sphere_clearance(pi + e, pj, s) - sphere_clearance(pi - e, pj, s)) / (2 * h)
        fdj = (sphere_clearance(pi, pj + e, s) - sphere_clearance(pi, pj - e, s)) / (2 * h)
        assert abs(gi[k] - fdi) <= 1e-6 * max(1.0, abs(fdi))
        assert abs(gj[k] - fdj) <= 1e-6 * max(1.0, abs(fdj))


UNIT = PolyShape.rectangle(0.5, 0.5)


def test_certificate_separated_unit_boxes():
    # facets ordered +x, +y, -x, -y; i uses its +x facet, j its -x facet
    lam = np.array([1.0, 0, 0, 0])
    mu = np.array([0, 0, 1.0, 0])
    r = polytope_clearance_residuals(np.array([0.0, 0]), np.array([10.0, 0]), UNIT, UNIT, lam, mu, 0.1)
    assert r[0] == pytest.approx(9 - 0.1)
    assert np.allclose(r[1:3], 0.0)
    assert r[3] <= 1e-12


def test_certificate_zero_duals():
    r = polytope_clearance_residuals(np.zeros(2), np.array([10.0, 0]), UNIT, UNIT,
                                     np.zeros(4), np.zeros(4), 0.25)
    assert r[0] == pytest.approx(-0.25)


def test_certificate_dimension_mismatch():
    with pytest.raises(ValueError):
        polytope_clearance_residuals(np.zeros(2), np.ones(2), UNIT, UNIT, np.zeros(3), np.zeros(4), 0.1)


def _certificate_nlp(x_i, x_j, shape_i, shape_j, d_min, eps=1e-6):
    Wi, Wj = shape_i.world(x_i), shape_j.world(x_j)
    Fi, Fj = Wi.n_facets, Wj.n_facets
    Aj = shape_j.template.A

    def eq(z):
        M = np.hstack([Wi.A.T, Wj.A.T])
        return M @ z, sp.csr_matrix(M)

    def ineq(z):
        lam, mu = z[:Fi], z[Fi:]
        v = Aj.T @ mu
        vals = np.array([d_min + eps + Wi.b @ lam + Wj.b @ mu, v @ v - 1.0])
        J = np.vstack([np.concatenate([Wi.b, Wj.b]), np.concatenate([np.zeros(Fi), 2 * Aj @ v])])
        return vals, sp.csr_matrix(J)

    n = Fi + Fj
    return NlpInstance(n, lambda z: (0.0, np.zeros(n)), eq, ineq, np.zeros(n), np.full(n, np.inf))


def test_overlapping_boxes_have_no_certificate():
    xi, xj = np.array([0.0, 0.0]), np.array([0.6, 0.3])
    assert polytope_distance(UNIT.world(xi), UNIT.world(xj)) == 0.0
    z, rep = solve(_certificate_nlp(xi, xj, UNIT, UNIT, 0.1), np.ones(8), max_iter=100)
    assert not rep.feasible and rep.status == "infeasible"


def test_separated_boxes_have_certificate():
    xi, xj = np.array([0.0, 0.0]), np.array([3.0, 0.5])
    z, rep = solve(_certificate_nlp(xi, xj, UNIT, UNIT, 0.1), np.ones(8), max_iter=100)
    assert rep.feasible
    r = polytope_clearance_residuals(xi, xj, UNIT, UNIT, z[:4], z[4:], 0.1)
    assert r[0] >= 1e-6 - 1e-8 and np.all(np.abs(r[1:3]) < 1e-6) and r[3] <= 1e-6


def _separated(P, Q):
    """Separating-axis test over the edge normals of both polygons."""
    for A in (P.A, Q.A):
        for a in A:
            if np.max(P.vertices() @ a) < np.min(Q.vertices() @ a) or \
               np.max(Q.vertices() @ a) < np.min(P.vertices() @ a):
                return True
    return False


def test_valid_certificate_implies_disjoint():
    rng = np.random.default_rng(5)
    seen = 0
    for _ in range(300):
        si = PolyShape.rectangle(rng.uniform(0.3, 1.2), rng.uniform(0.2, 0.8), heading_index=2)
        sj = PolyShape.rectangle(rng.uniform(0.3, 1.2), rng.uniform(0.2, 0.8), heading_index=2)
        xi = np.array([0.0, 0.0, rng.uniform(0, 2 * math.pi)])
        xj = np.array([*rng.uniform(-3, 3, 2), rng.uniform(0, 2 * math.pi)])
        Wi, Wj = si.world(xi), sj.world(xj)
        mu = rng.uniform(0, 1, 4) * (rng.random(4) < 0.6)
        lam, res = nnls(Wi.A.T, -Wj.A.T @ mu)
        if res > 1e-9:
            continue
        scale = np.linalg.norm(sj.template.A.T @ mu)
        if scale == 0:
            continue
        lam, mu = lam / scale, mu / scale
        r = polytope_clearance_residuals(xi, xj, si, sj, lam, mu, 0.0)
        if r[0] > 0:
            seen += 1
            assert _separated(Wi, Wj)
            assert polytope_distance(Wi, Wj) >= r[0] - 1e-9
    assert seen >= 10


def test_min_pairwise_two():
    assert min_pairwise_distance([[0, 0], [2, 0]]) == pytest.approx(2.0)


def test_min_pairwise_triangle():
    assert min_pairwise_distance([[0, 0], [3, 0], [0, 4]]) == pytest.approx(3.0)


def test_min_pairwise_random_matches_scan():
    rng = np.random.default_rng(1)
    P = rng.uniform(-10, 10, (8, 2))
    best = min(math.dist(P[i], P[j]) for i in range(8) for j in range(i + 1, 8))
    assert min_pairwise_distance(P) == pytest.approx(best, rel=1e-12)


def test_min_pairwise_needs_two():
    with pytest.raises(ValueError):
        min_pairwise_distance([[0, 0]])
