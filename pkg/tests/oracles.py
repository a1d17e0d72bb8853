"""Brute-force reference computations shared by several test modules."""
import numpy as np
from scipy.optimize import linprog
from scipy.spatial import ConvexHull

from swarm_mpc.geometry import HPolytope, pontryagin_diff


def di_reachable(x0, q, N, T_s, a_max, v_max, A_c, b_c, obstacles=(), mode="rate"):
    """LP check: can a double integrator at ``x0`` come to rest at ``q`` in ``N`` steps?

    Obstacles ``(centre, clearance)`` are kept out by the halfspace through the
    clearance circle facing ``q``, a sufficient (inner) condition.
    Variables per stage j = 1..N: p(j), v(j); inputs u(0..N-1).
    """
    x0 = np.asarray(x0, float)
    q = np.asarray(q, float)
    nP = 2 * N
    iu = lambda j: slice(4 * N + 2 * j, 4 * N + 2 * j + 2)  # noqa: E731
    ip = lambda j: slice(2 * (j - 1), 2 * j)  # noqa: E731
    iv = lambda j: slice(nP + 2 * (j - 1), nP + 2 * j)  # noqa: E731
    nv = 6 * N
    A_eq, b_eq = [], []
    I2 = np.eye(2)
    for j in range(N):
        # p(j+1) = p(j) + T v(j) + T^2/2 u(j);  v(j+1) = v(j) + T u(j)
        row_p = np.zeros((2, nv))
        row_v = np.zeros((2, nv))
        row_p[:, ip(j + 1)] = I2
        row_p[:, iu(j)] = -0.5 * T_s ** 2 * I2
        row_v[:, iv(j + 1)] = I2
        row_v[:, iu(j)] = -T_s * I2
        if j == 0:
            rhs_p = x0[:2] + T_s * x0[2:]
            rhs_v = x0[2:]
        else:
            row_p[:, ip(j)] = -I2
            row_p[:, iv(j)] = -T_s * I2
            row_v[:, iv(j)] = -I2
            rhs_p = rhs_v = np.zeros(2)
        A_eq += [row_p, row_v]
        b_eq += [rhs_p, rhs_v]
    term = np.zeros((4, nv))
    term[:2, ip(N)] = I2
    term[2:, iv(N)] = I2
    A_eq.append(term)
    b_eq.append(np.r_[q, 0.0, 0.0])
    A_ub, b_ub = [], []
    F = A_c.shape[0]
    for j in range(1, N + 1):
        row = np.zeros((F, nv))
        row[:, ip(j)] = A_c
        if mode == "rate":
            if j > 1:
                row[:, ip(j - 1)] = -A_c
                rhs = b_c / N
            else:
                rhs = b_c / N + A_c @ x0[:2]
        else:
            rhs = b_c + A_c @ x0[:2]
        A_ub.append(row)
        b_ub.append(rhs)
        for c, clear in obstacles:
            c = np.asarray(c, float)
            nrm = (q - c) / np.linalg.norm(q - c)
            row = np.zeros((1, nv))
            row[0, ip(j)] = -nrm
            A_ub.append(row)
            b_ub.append([-(clear + nrm @ c)])
    bounds = [(None, None)] * nP + [(-v_max, v_max)] * nP + [(-a_max, a_max)] * (2 * N)
    res = linprog(np.zeros(nv), A_ub=np.vstack(A_ub), b_ub=np.concatenate(b_ub),
                  A_eq=np.vstack(A_eq), b_eq=np.concatenate(b_eq), bounds=bounds, method="highs")
    return res.status == 0


def grid_best_steady_position(x0, ref_pos, N, T_s, a_max, v_max, A_c, b_c, obstacles=(),
                              mode="rate", h=0.05):
    """Lattice point (spacing ``h``) closest to ``ref_pos`` that passes :func:`di_reachable`."""
    x0 = np.asarray(x0, float)
    ref_pos = np.asarray(ref_pos, float)
    reach = float(np.max(b_c))
    ax = np.arange(-np.ceil(reach / h), np.ceil(reach / h) + 1) * h
    G = np.stack(np.meshgrid(ax, ax, indexing="ij"), axis=-1).reshape(-1, 2) + x0[:2]
    inside = np.all((G - x0[:2]) @ A_c.T <= b_c + 1e-12, axis=1)
    for c, clear in obstacles:
        inside &= np.linalg.norm(G - np.asarray(c), axis=1) >= clear
    G = G[inside]
    order = np.argsort(np.sum((G - ref_pos) ** 2, axis=1), kind="stable")
    for idx in order:
        if di_reachable(x0, G[idx], N, T_s, a_max, v_max, A_c, b_c, obstacles, mode):
            return G[idx]
    return None


def bfs_components(nodes, edges):
    """Connected components by breadth-first search, as sorted tuples."""
    adj = {v: set() for v in nodes}
    for a, b in edges:
        adj[a].add(b)
        adj[b].add(a)
    seen, out = set(), []
    for v in nodes:
        if v in seen:
            continue
        comp, frontier = [], [v]
        seen.add(v)
        while frontier:
            nxt = []
            for u in frontier:
                comp.append(u)
                for w in adj[u]:
                    if w not in seen:
                        seen.add(w)
                        nxt.append(w)
            frontier = nxt
        out.append(tuple(sorted(comp)))
    return sorted(out)


def hull_polytope(points):
    h = ConvexHull(points)
    return HPolytope(h.equations[:, :2], -h.equations[:, 2]), points[h.vertices]


def pontryagin_grid_mismatches(P_pts, Q_pts, step=0.01):
    """Lattice points where ``pontryagin_diff`` disagrees with vertex-shift membership,
    and the number of lattice points inside the difference."""
    P, Pv = hull_polytope(P_pts)
    Q, Qv = hull_polytope(Q_pts)
    R = pontryagin_diff(P, Q)
    lo, hi = Pv.min(axis=0) - 0.05, Pv.max(axis=0) + 0.05
    gx = np.arange(lo[0], hi[0], step)
    gy = np.arange(lo[1], hi[1], step)
    G = np.stack(np.meshgrid(gx, gy), axis=-1).reshape(-1, 2)
    # brute force: q is in the difference iff every vertex of Q shifted by q lies in P
    shifted = G[:, None, :] + Qv[None, :, :]
    oracle = np.all(np.einsum("gvk,fk->gvf", shifted, P.A) <= P.b + 1e-9, axis=(1, 2))
    mine = np.all(G @ R.A.T <= R.b + 1e-9, axis=1)
    return int(np.sum(oracle != mine)), int(oracle.sum())


def random_polygon_pair(rng):
    """A random convex polygon (5 to 11 vertices) and a small one to subtract."""
    n = rng.integers(5, 12)
    ang = np.sort(rng.uniform(0, 2 * np.pi, n))
    P = rng.uniform(1.2, 2.0, n)[:, None] * np.column_stack([np.cos(ang), np.sin(ang)])
    P += rng.uniform(-0.5, 0.5, 2)
    m = rng.integers(3, 7)
    base = 2 * np.pi * np.arange(m) / m + rng.uniform(0, 2 * np.pi)
    qa = base + rng.uniform(-0.3, 0.3, m)
    Q = rng.uniform(0.2, 0.5, m)[:, None] * np.column_stack([np.cos(qa), np.sin(qa)])
    return P, Q


def random_graph(rng, max_nodes=50):
    """Random node order and edge set with up to ``max_nodes`` nodes."""
    n = int(rng.integers(1, max_nodes + 1))
    p = rng.uniform(0, 0.15)
    edges = frozenset((i, j) for i in range(n) for j in range(i + 1, n) if rng.random() < p)
    nodes = tuple(int(v) for v in rng.permutation(n))
    return nodes, edges
