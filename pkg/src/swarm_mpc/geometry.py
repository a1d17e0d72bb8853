"""Planar convex sets: H-polytopes, discs, support functions, safe-set construction."""
from __future__ import annotations

import math
from dataclasses import dataclass

import numpy as np
from scipy.optimize import linprog

TOL = 1e-9


class EmptyDifference(ValueError):
    """Raised when a Pontryagin difference has no points."""


class NonpositiveRadius(ValueError):
    """Raised when shrinking a disc by the vehicle footprint leaves nothing."""


@dataclass(frozen=True, eq=False)
class HPolytope:
    """The set ``{q : A q <= b}`` in the plane."""

    A: np.ndarray
    b: np.ndarray

    def __post_init__(self):
        A = np.asarray(self.A, dtype=float)
        b = np.asarray(self.b, dtype=float).reshape(-1)
        if A.ndim != 2 or A.shape[1] != 2 or A.shape[0] != b.size:
            raise ValueError(f"incompatible shapes A{A.shape} b{b.shape}")
        object.__setattr__(self, "A", A)
        object.__setattr__(self, "b", b)

    @classmethod
    def from_halfspaces(cls, A, b) -> "HPolytope":
        """Build a polytope, scaling every row to a unit normal."""
        A = np.asarray(A, dtype=float)
        b = np.asarray(b, dtype=float).reshape(-1)
        norms = np.linalg.norm(A, axis=1)
        if np.any(norms == 0.0):
            raise ValueError("zero normal row")
        return cls(A / norms[:, None], b / norms)

    @classmethod
    def box(cls, lo, hi) -> "HPolytope":
        lo = np.asarray(lo, float)
        hi = np.asarray(hi, float)
        A = np.array([[1.0, 0.0], [0.0, 1.0], [-1.0, 0.0], [0.0, -1.0]])
        return cls(A, np.array([hi[0], hi[1], -lo[0], -lo[1]]))

    @property
    def n_facets(self) -> int:
        return self.A.shape[0]

    def is_bounded(self) -> bool:
        if self.n_facets < 3:
            return False
        ang = np.sort(np.arctan2(self.A[:, 1], self.A[:, 0]))
        gaps = np.diff(np.concatenate([ang, [ang[0] + 2 * math.pi]]))
        return bool(np.max(gaps) < math.pi - 1e-12)

    def contains(self, q, tol: float = TOL) -> bool:
        return contains(self, q, tol)

    def vertices(self) -> np.ndarray:
        """Vertices in counter-clockwise order (empty array if the set is empty)."""
        A, b = self.A, self.b
        m = A.shape[0]
        i, j = np.triu_indices(m, k=1)
        det = A[i, 0] * A[j, 1] - A[i, 1] * A[j, 0]
        ok = np.abs(det) > 1e-12
        i, j, det = i[ok], j[ok], det[ok]
        x = (b[i] * A[j, 1] - A[i, 1] * b[j]) / det
        y = (A[i, 0] * b[j] - b[i] * A[j, 0]) / det
        pts = np.column_stack([x, y])
        if pts.size == 0:
            return np.zeros((0, 2))
        feas = np.all(pts @ A.T <= b + 1e-9 * np.maximum(1.0, np.abs(b)), axis=1)
        pts = pts[feas]
        if pts.size == 0:
            return np.zeros((0, 2))
        uniq = []
        for p in pts:
            if not any(np.max(np.abs(p - u)) < 1e-9 for u in uniq):
                uniq.append(p)
        pts = np.array(uniq)
        c = pts.mean(axis=0)
        order = np.argsort(np.arctan2(pts[:, 1] - c[1], pts[:, 0] - c[0]))
        return pts[order]

    def support(self, direction) -> float:
        """Support function ``max_{q in P} direction . q`` via vertex enumeration."""
        v = self.vertices()
        if v.size == 0:
            raise EmptyDifference("support of an empty set")
        return float(np.max(v @ np.asarray(direction, float)))

    def area(self) -> float:
        return polygon_area(self.vertices())

    def chebyshev_radius(self) -> float:
        """Largest inscribed ball radius; negative means the set is empty."""
        norms = np.linalg.norm(self.A, axis=1)
        A_ub = np.column_stack([self.A, norms])
        res = linprog(c=[0.0, 0.0, -1.0], A_ub=A_ub, b_ub=self.b,
                      bounds=[(None, None), (None, None), (None, 1e6)], method="highs")
        if res.status == 2:
            return -np.inf
        return float(-res.fun)


@dataclass(frozen=True, eq=False)
class Disc:
    center: np.ndarray
    radius: float

    def __post_init__(self):
        object.__setattr__(self, "center", np.asarray(self.center, dtype=float).reshape(2))
        if not self.radius > 0:
            raise NonpositiveRadius(f"disc radius must be positive, got {self.radius}")
        object.__setattr__(self, "radius", float(self.radius))


def polygon_area(vertices: np.ndarray) -> float:
    """Shoelace area of a counter-clockwise vertex list."""
    if len(vertices) < 3:
        return 0.0
    x, y = vertices[:, 0], vertices[:, 1]
    return 0.5 * float(np.dot(x, np.roll(y, -1)) - np.dot(y, np.roll(x, -1)))


def translate(P: HPolytope, p) -> HPolytope:
    """Return ``P + p``; the facet normals are reused unchanged."""
    p = np.asarray(p, dtype=float)
    return HPolytope(P.A, P.b + P.A @ p)


def pontryagin_diff(P: HPolytope, Q: HPolytope) -> HPolytope:
    """``P (-) Q = {x : x + q in P for all q in Q}``, by shrinking each facet offset."""
    qv = Q.vertices()
    if qv.size == 0:
        raise EmptyDifference("subtrahend is empty")
    h = np.max(P.A @ qv.T, axis=1)
    out = HPolytope(P.A, P.b - h)
    if out.chebyshev_radius() < -1e-12:
        raise EmptyDifference("Pontryagin difference is empty")
    return out


def inscribe_polytope(S: Disc, n_facets: int) -> HPolytope:
    """Regular ``n_facets``-gon with its vertices on the circle, centred at the origin.

    Facet normals sit at angles ``2 pi k / n``, so the first normal is +x.
    """
    if n_facets < 3:
        raise ValueError("need at least 3 facets")
    ang = 2.0 * math.pi * np.arange(n_facets) / n_facets
    A = np.column_stack([np.cos(ang), np.sin(ang)])
    b = np.full(n_facets, S.radius * math.cos(math.pi / n_facets))
    return HPolytope(A, b)


def build_safe_set(comm: Disc, vehicle_radius: float, n_facets: int = 8) -> HPolytope:
    """Inscribed polygon of the communication disc shrunk by the vehicle footprint."""
    if vehicle_radius < 0:
        raise ValueError("vehicle radius must be nonnegative")
    r = comm.radius - vehicle_radius
    if r <= 0:
        raise NonpositiveRadius(
            f"communication radius {comm.radius} does not exceed vehicle radius {vehicle_radius}")
    return inscribe_polytope(Disc(np.zeros(2), r), n_facets)


def contains(P: HPolytope, q, tol: float = TOL) -> bool:
    q = np.asarray(q, dtype=float)
    return bool(np.all(P.A @ q <= P.b + tol))


def intersects(P: HPolytope, Q: HPolytope) -> bool:
    """Feasibility LP on ``P and Q``; touching sets count as intersecting."""
    A = np.vstack([P.A, Q.A])
    b = np.concatenate([P.b, Q.b]) + TOL
    res = linprog(c=[0.0, 0.0], A_ub=A, b_ub=b, bounds=[(None, None)] * 2, method="highs")
    return res.status == 0
