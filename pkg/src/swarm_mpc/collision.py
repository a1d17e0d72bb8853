"""Pairwise collision-avoidance constraint functions.

Two forms are provided: the disc over-approximation (one smooth scalar per
pair) and the dual certificate for rotated convex polytopes, whose multipliers
become extra decision variables of the enclosing NLP.
"""
from __future__ import annotations

from dataclasses import dataclass
from typing import Optional

import numpy as np

from .geometry import HPolytope, intersects

MARGIN_EPS = 1e-6


@dataclass(frozen=True)
class SphereShape:
    sigma: float
    d_min: float = 0.1

    def __post_init__(self):
        if not self.sigma > 0:
            raise ValueError("sigma must be positive")
        if self.d_min < 0:
            raise ValueError("d_min must be nonnegative")


@dataclass(frozen=True, eq=False)
class PolyShape:
    """Vehicle footprint ``R(theta) T + p`` for a template polytope ``T``.

    ``heading_index`` selects the state entry used as the rotation angle; with
    ``None`` the footprint only translates.
    """

    template: HPolytope
    heading_index: Optional[int] = None

    @classmethod
    def rectangle(cls, half_length: float, half_width: float,
                  heading_index: Optional[int] = None) -> "PolyShape":
        return cls(HPolytope.box([-half_length, -half_width], [half_length, half_width]),
                   heading_index)

    def rotation(self, x) -> np.ndarray:
        if self.heading_index is None:
            return np.eye(2)
        th = float(np.asarray(x)[self.heading_index])
        c, s = np.cos(th), np.sin(th)
        return np.array([[c, -s], [s, c]])

    def translation(self, x) -> np.ndarray:
        return np.asarray(x, float)[:2]

    def world(self, x) -> HPolytope:
        """The occupied set as ``{y : G y <= g}`` in world coordinates."""
        R = self.rotation(x)
        G = self.template.A @ R.T
        return HPolytope(G, self.template.b + G @ self.translation(x))


def sphere_clearance(p_i, p_j, shape: SphereShape, sigma_j: Optional[float] = None) -> float:
    """``-|p_i - p_j|^2 + (sigma_i + sigma_j + d_min)^2``; nonpositive means clear."""
    s_j = shape.sigma if sigma_j is None else sigma_j
    d = np.asarray(p_i, float) - np.asarray(p_j, float)
    return float(-(d @ d) + (shape.sigma + s_j + shape.d_min) ** 2)


def sphere_clearance_grad(p_i, p_j) -> tuple[np.ndarray, np.ndarray]:
    d = np.asarray(p_i, float) - np.asarray(p_j, float)
    return -2.0 * d, 2.0 * d


def polytope_clearance_residuals(x_i, x_j, shape_i: PolyShape, shape_j: PolyShape,
                                 lam, mu, d_min: float) -> np.ndarray:
    """Stacked certificate residuals ``[margin, align_x, align_y, norm]``.

    ``margin = -g_i.lam - g_j.mu - d_min`` must be positive, the alignment
    ``G_i^T lam + G_j^T mu`` must vanish and ``norm = |A_j^T mu| - 1`` must be
    nonpositive, where ``{G y <= g}`` is each footprint in world coordinates.
    """
    lam = np.asarray(lam, float)
    mu = np.asarray(mu, float)
    Wi, Wj = shape_i.world(x_i), shape_j.world(x_j)
    if lam.shape != (Wi.n_facets,) or mu.shape != (Wj.n_facets,):
        raise ValueError("dual vectors must match the facet counts")
    margin = -Wi.b @ lam - Wj.b @ mu - d_min
    align = Wi.A.T @ lam + Wj.A.T @ mu
    norm = np.linalg.norm(shape_j.template.A.T @ mu) - 1.0
    return np.concatenate([[margin], align, [norm]])


def polytope_distance(P: HPolytope, Q: HPolytope) -> float:
    """Euclidean distance between two bounded polygons (0 when they overlap)."""
    if intersects(P, Q):
        return 0.0
    vp, vq = P.vertices(), Q.vertices()
    best = np.inf
    for a0, a1 in zip(vp, np.roll(vp, -1, axis=0)):
        for q in vq:
            best = min(best, _point_segment(q, a0, a1))
    for b0, b1 in zip(vq, np.roll(vq, -1, axis=0)):
        for p in vp:
            best = min(best, _point_segment(p, b0, b1))
    return float(best)


def _point_segment(p, a, b) -> float:
    ab = b - a
    t = np.clip(np.dot(p - a, ab) / max(np.dot(ab, ab), 1e-300), 0.0, 1.0)
    return float(np.linalg.norm(p - (a + t * ab)))


def min_pairwise_distance(positions) -> float:
    P = np.asarray(positions, float).reshape(-1, 2)
    if len(P) < 2:
        raise ValueError("need at least two agents")
    diff = P[:, None, :] - P[None, :, :]
    dist = np.sqrt(np.sum(diff ** 2, axis=-1))
    iu = np.triu_indices(len(P), k=1)
    return float(np.min(dist[iu]))
