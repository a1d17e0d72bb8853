"""Two-trajectory finite-horizon optimal control problem for one cluster.

Every agent of a cluster predicts a *tracking* trajectory (pulled towards its
reference) and a *safe* trajectory (confined to its safe set and ending at an
artificial equilibrium). Both share the first input. The cluster problem is
transcribed by multiple shooting into an :class:`~swarm_mpc.solver.NlpInstance`.
"""
from __future__ import annotations

from dataclasses import dataclass, field
from typing import Optional, Sequence

import numpy as np
import scipy.sparse as sp

from .collision import MARGIN_EPS, PolyShape
from .dynamics import AgentModel, Equilibrium
from .geometry import HPolytope
from .solver import NlpInstance, SolveReport, solve

UNBOUNDED = None  # safe-cost bound sentinel: convergence constraint inactive


class EmptyReachableSet(RuntimeError):
    """No admissible steady state is reachable from the given state."""


# -- configuration -----------------------------------------------------------

_DEFAULT_WEIGHTS = {
    "bicycle": dict(Q_t=[1.0, 1.0, 0.1, 0.1, 0.01], R_t=[0.1, 0.1],
                    Q_s=[1.0, 1.0, 0.1, 0.1, 0.01], R_s=[0.1, 0.1],
                    T_O=[1.0, 1.0, 0.1, 0.1, 0.01]),
    "double_integrator": dict(Q_t=[1.0, 1.0, 0.1, 0.1], R_t=[0.1, 0.1],
                              Q_s=[1.0, 1.0, 0.1, 0.1], R_s=[0.1, 0.1],
                              T_O=[1.0, 1.0, 0.1, 0.1]),
}


def _as_matrix(w, size: int, name: str) -> np.ndarray:
    w = np.asarray(w, dtype=float)
    M = np.diag(w) if w.ndim == 1 else w
    if M.shape != (size, size):
        raise ValueError(f"{name} must be {size}x{size}")
    if not np.allclose(M, M.T):
        raise ValueError(f"{name} must be symmetric")
    if np.min(np.linalg.eigvalsh(M)) <= 0:
        raise ValueError(f"{name} must be positive definite")
    return M


@dataclass(frozen=True)
class Weights:
    Q_t: np.ndarray
    R_t: np.ndarray
    Q_s: np.ndarray
    R_s: np.ndarray
    T_O: np.ndarray


@dataclass(frozen=True)
class OcpConfig:
    N: int = 10
    beta: float = 10.0
    d_min: float = 0.1
    n_facets: int = 8
    weights: Optional[dict] = None  # Q_t, R_t, Q_s, R_s, T_O (diagonals or matrices)
    collision: str = "sphere"  # "sphere" | "polytope"
    safe_set_mode: str = "rate"  # "rate" | "direct"
    tol_feas: float = 1e-8
    tol_opt: float = 1e-4
    max_iter: int = 40

    def __post_init__(self):
        if self.N < 2:
            raise ValueError("horizon N must be >= 2")
        if self.beta < 0:
            raise ValueError("beta must be nonnegative")
        if self.d_min < 0:
            raise ValueError("d_min must be nonnegative")
        if self.n_facets < 3:
            raise ValueError("n_facets must be >= 3")
        if self.collision not in ("sphere", "polytope"):
            raise ValueError(f"unknown collision form {self.collision!r}")
        if self.safe_set_mode not in ("rate", "direct"):
            raise ValueError(f"unknown safe-set mode {self.safe_set_mode!r}")

    def resolved_weights(self, model: AgentModel) -> Weights:
        src = dict(_DEFAULT_WEIGHTS.get(model.name, {}))
        if self.weights:
            src.update(self.weights)
        missing = {"Q_t", "R_t", "Q_s", "R_s", "T_O"} - set(src)
        if missing:
            raise ValueError(f"no weights for model {model.name!r}: {sorted(missing)}")
        n, m = model.n, model.m
        return Weights(_as_matrix(src["Q_t"], n, "Q_t"), _as_matrix(src["R_t"], m, "R_t"),
                       _as_matrix(src["Q_s"], n, "Q_s"), _as_matrix(src["R_s"], m, "R_s"),
                       _as_matrix(src["T_O"], n, "T_O"))


# -- problem data and solutions ----------------------------------------------

@dataclass(eq=False)
class AgentProblem:
    id: int
    model: AgentModel
    x0: np.ndarray
    ref: Equilibrium
    safe_set: HPolytope  # template centred at the origin: {q : A_c q <= b_c}
    sigma: float
    J_bound: Optional[float] = UNBOUNDED
    shape: Optional[PolyShape] = None

    @property
    def p0(self) -> np.ndarray:
        return self.model.position(self.x0)


@dataclass(eq=False)
class Obstacle:
    """A neighbour whose predicted positions are fixed data, shape ``(N+1, 2)``."""

    positions: np.ndarray
    sigma: float


@dataclass(eq=False)
class FhocpProblem:
    agents: list
    pairs: Optional[list] = None  # index pairs into ``agents``; default: all pairs
    obstacles: list = field(default_factory=list)

    def __post_init__(self):
        if not self.agents:
            raise ValueError("empty cluster")
        if self.pairs is None:
            k = len(self.agents)
            self.pairs = [(a, b) for a in range(k) for b in range(a + 1, k)]
        for ag in self.agents:
            if np.asarray(ag.x0).shape != (ag.model.n,):
                raise ValueError(f"agent {ag.id}: x0 has wrong dimension")


@dataclass(eq=False)
class AgentSolution:
    U_t: np.ndarray  # (N, m)
    U_s: np.ndarray  # (N, m)
    X_t: np.ndarray  # (N+1, n)
    X_s: np.ndarray  # (N+1, n)
    x_bar: np.ndarray
    u_bar: np.ndarray
    J: float = np.nan
    J_s: float = np.nan


@dataclass(eq=False)
class FhocpSolution:
    agents: dict  # id -> AgentSolution
    status: str
    report: Optional[SolveReport] = None
    duals: dict = field(default_factory=dict)  # (id_a, id_b, traj) -> (lam (N+1,Fa), mu (N+1,Fb))


# -- costs -------------------------------------------------------------------

def _qf(M, D) -> np.ndarray:
    D = np.asarray(D, float)
    return np.einsum("...i,ij,...j->...", D, M, D)


def tracking_cost(X_t, U_t, x_bar_s, ref: Equilibrium, cfg: OcpConfig,
                  model: AgentModel) -> float:
    """Tracking stage costs for ``j < N`` plus ``beta`` times the offset cost."""
    X_t = np.asarray(X_t, float)
    U_t = np.asarray(U_t, float)
    if U_t.shape[0] != cfg.N or X_t.shape[0] not in (cfg.N, cfg.N + 1):
        raise ValueError("trajectory lengths do not match the horizon")
    w = cfg.resolved_weights(model)
    stage = _qf(w.Q_t, X_t[:cfg.N] - ref.x_bar).sum() + _qf(w.R_t, U_t - ref.u_bar).sum()
    return float(stage + cfg.beta * _qf(w.T_O, np.asarray(x_bar_s) - ref.x_bar))


def safe_stage_cost(x, u, x_bar, u_bar, w: Weights) -> np.ndarray:
    return _qf(w.Q_s, np.asarray(x) - x_bar) + _qf(w.R_s, np.asarray(u) - u_bar)


def offset_cost(x_bar, ref: Equilibrium, w: Weights) -> float:
    return float(_qf(w.T_O, np.asarray(x_bar, float) - ref.x_bar))


def safe_cost(X_s, U_s, x_bar_s, u_bar_s, ref: Equilibrium, cfg: OcpConfig,
              model: AgentModel) -> float:
    X_s = np.asarray(X_s, float)
    U_s = np.asarray(U_s, float)
    if U_s.shape[0] != cfg.N or X_s.shape[0] not in (cfg.N, cfg.N + 1):
        raise ValueError("trajectory lengths do not match the horizon")
    w = cfg.resolved_weights(model)
    stage = safe_stage_cost(X_s[:cfg.N], U_s, x_bar_s, u_bar_s, w).sum()
    return float(stage + offset_cost(x_bar_s, ref, w))


def update_safe_bound(prev: Optional[AgentSolution], ref: Equilibrium, cfg: OcpConfig,
                      model: AgentModel) -> Optional[float]:
    """Previous safe cost minus its first stage; ``UNBOUNDED`` without history."""
    if prev is None:
        return UNBOUNDED
    w = cfg.resolved_weights(model)
    J_s = safe_cost(prev.X_s, prev.U_s, prev.x_bar, prev.u_bar, ref, cfg, model)
    first = float(safe_stage_cost(prev.X_s[0], prev.U_s[0], prev.x_bar, prev.u_bar, w))
    return J_s - first


def candidate_solution(prev: AgentSolution, model: AgentModel) -> AgentSolution:
    """Shift the previous safe trajectory by one step and close it at its equilibrium.

    Tracking and safe parts of the candidate coincide.
    """
    U = np.vstack([prev.U_s[1:], prev.u_bar[None, :]])
    X = np.vstack([prev.X_s[1:], prev.x_bar[None, :]])
    return AgentSolution(U.copy(), U.copy(), X.copy(), X.copy(),
                         prev.x_bar.copy(), prev.u_bar.copy())


def warm_start(prev: AgentSolution, model: AgentModel, x0) -> AgentSolution:
    """Initial guess for the next solve: the candidate for the safe part and the
    shifted previous tracking plan (re-simulated from ``x0`` with the candidate's
    first input, which the two parts share) for the tracking part."""
    cand = candidate_solution(prev, model)
    U_t = np.vstack([cand.U_s[:1], prev.U_t[2:], prev.U_t[-1:]])
    X_t = model.rollout(x0, U_t)
    return AgentSolution(U_t, cand.U_s, X_t, cand.X_s, cand.x_bar, cand.u_bar)


def rest_guess(ag: AgentProblem, N: int) -> AgentSolution:
    """Zero input clipped to the box, rolled out from ``x0``."""
    m = ag.model
    u = np.clip(np.zeros(m.m), m.u_lb, m.u_ub)
    U = np.tile(u, (N, 1))
    X = m.rollout(ag.x0, U)
    return AgentSolution(U.copy(), U.copy(), X.copy(), X.copy(), X[-1].copy(), u.copy())


def shift_duals(duals: dict) -> dict:
    out = {}
    for key, (lam, mu) in duals.items():
        out[key] = (np.vstack([lam[1:], lam[-1:]]), np.vstack([mu[1:], mu[-1:]]))
    return out


# -- transcription -----------------------------------------------------------

class _Block:
    """Variable layout of one agent: u0 | U_t[1:] | U_s[1:] | X_t | X_s | x_bar | u_bar."""

    def __init__(self, model: AgentModel, N: int, offset: int):
        n, m = model.n, model.m
        o = offset
        self.u0 = np.arange(o, o + m)
        o += m
        ut = np.arange(o, o + (N - 1) * m).reshape(N - 1, m)
        o += (N - 1) * m
        us = np.arange(o, o + (N - 1) * m).reshape(N - 1, m)
        o += (N - 1) * m
        self.X = {"t": np.arange(o, o + (N + 1) * n).reshape(N + 1, n)}
        o += (N + 1) * n
        self.X["s"] = np.arange(o, o + (N + 1) * n).reshape(N + 1, n)
        o += (N + 1) * n
        self.xbar = np.arange(o, o + n)
        o += n
        self.ubar = np.arange(o, o + m)
        o += m
        self.U = {"t": np.vstack([self.u0[None, :], ut]), "s": np.vstack([self.u0[None, :], us])}
        self.start, self.stop = offset, o


class _Triplets:
    def __init__(self):
        self.rows, self.cols, self.vals, self.values = [], [], [], []
        self.count = 0

    def add(self, values, rows_local, cols, vals):
        """``rows_local`` index into ``values`` (a 1-D block of new rows)."""
        values = np.atleast_1d(np.asarray(values, float))
        self.values.append(values)
        self.rows.append(np.asarray(rows_local).ravel() + self.count)
        self.cols.append(np.asarray(cols).ravel())
        self.vals.append(np.asarray(vals, float).ravel())
        self.count += values.size

    def build(self, n):
        if not self.values:
            return np.zeros(0), sp.csr_matrix((0, n))
        vals = np.concatenate(self.values)
        J = sp.coo_matrix((np.concatenate(self.vals),
                           (np.concatenate(self.rows), np.concatenate(self.cols))),
                          shape=(vals.size, n)).tocsr()
        return vals, J


def _add_equilibrium(T: _Triplets, model: AgentModel, z, xi, ui):
    res, Jx, Ju = model.equilibrium_equations(z[xi], z[ui])
    r = np.arange(res.size)
    n, m = xi.size, ui.size
    T.add(res, np.concatenate([np.repeat(r, n), np.repeat(r, m)]),
          np.concatenate([np.tile(xi, res.size), np.tile(ui, res.size)]),
          np.concatenate([Jx.ravel(), Ju.ravel()]))


def _rot(th):
    c, s = np.cos(th), np.sin(th)
    return np.array([[c, -s], [s, c]]), np.array([[-s, -c], [c, -s]])


class FhocpTranscription:
    """Multiple-shooting NLP for one cluster problem."""

    def __init__(self, problem: FhocpProblem, cfg: OcpConfig):
        self.problem = problem
        self.cfg = cfg
        N = cfg.N
        self.blocks = []
        self.weights = []
        o = 0
        for ag in problem.agents:
            blk = _Block(ag.model, N, o)
            self.blocks.append(blk)
            self.weights.append(cfg.resolved_weights(ag.model))
            o = blk.stop
        self.dual_index = {}
        if cfg.collision == "polytope":
            for a, b in problem.pairs:
                sa, sb = self._shape(a), self._shape(b)
                for traj in ("t", "s"):
                    fa, fb = sa.template.n_facets, sb.template.n_facets
                    lam = np.arange(o, o + (N + 1) * fa).reshape(N + 1, fa)
                    o += (N + 1) * fa
                    mu = np.arange(o, o + (N + 1) * fb).reshape(N + 1, fb)
                    o += (N + 1) * fb
                    self.dual_index[(a, b, traj)] = (lam, mu)
        self.n_vars = o
        self._H_obj, self._g_const = self._objective_hessian()
        self._H_safe = [self._safe_cost_hessian(i) for i in range(len(self.blocks))]
        self._safe_rows = []
        self._dyn_rows = []

    def _shape(self, idx) -> PolyShape:
        ag = self.problem.agents[idx]
        if ag.shape is not None:
            return ag.shape
        return PolyShape.rectangle(0.8 * ag.sigma, 0.5 * ag.sigma, ag.model.heading_index)

    # objective ------------------------------------------------------------
    def _objective_hessian(self):
        rows, cols, vals = [], [], []
        N = self.cfg.N

        def put(idx, M):
            r, c = np.meshgrid(idx, idx, indexing="ij")
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append((2.0 * M).ravel())

        for blk, w in zip(self.blocks, self.weights):
            for j in range(N):
                put(blk.X["t"][j], w.Q_t)
                put(blk.U["t"][j], w.R_t)
            put(blk.xbar, self.cfg.beta * w.T_O)
        n = self.n_vars
        H = sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                          shape=(n, n)).tocsc()
        return H, None

    def _safe_cost_hessian(self, i):
        blk, w = self.blocks[i], self.weights[i]
        N = self.cfg.N
        rows, cols, vals = [], [], []

        def put(ri, ci, M):
            r, c = np.meshgrid(ri, ci, indexing="ij")
            rows.append(r.ravel())
            cols.append(c.ravel())
            vals.append(M.ravel())

        for j in range(N):
            xj, uj = blk.X["s"][j], blk.U["s"][j]
            put(xj, xj, 2 * w.Q_s)
            put(xj, blk.xbar, -2 * w.Q_s)
            put(blk.xbar, xj, -2 * w.Q_s)
            put(uj, uj, 2 * w.R_s)
            put(uj, blk.ubar, -2 * w.R_s)
            put(blk.ubar, uj, -2 * w.R_s)
        put(blk.xbar, blk.xbar, 2 * N * w.Q_s + 2 * w.T_O)
        put(blk.ubar, blk.ubar, 2 * N * w.R_s)
        n = self.n_vars
        return sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                             shape=(n, n)).tocsc()

    def objective(self, z):
        f = 0.0
        g = np.zeros(self.n_vars)
        N = self.cfg.N
        for ag, blk, w in zip(self.problem.agents, self.blocks, self.weights):
            dx = z[blk.X["t"][:N]] - ag.ref.x_bar
            du = z[blk.U["t"]] - ag.ref.u_bar
            dr = z[blk.xbar] - ag.ref.x_bar
            f += _qf(w.Q_t, dx).sum() + _qf(w.R_t, du).sum() + self.cfg.beta * _qf(w.T_O, dr)
            np.add.at(g, blk.X["t"][:N], 2 * dx @ w.Q_t)
            np.add.at(g, blk.U["t"], 2 * du @ w.R_t)
            g[blk.xbar] += 2 * self.cfg.beta * (w.T_O @ dr)
        return float(f), g

    # constraints ------------------------------------------------------------
    def equalities(self, z):
        T = _Triplets()
        N = self.cfg.N
        self._dyn_rows = []
        for a, (ag, blk) in enumerate(zip(self.problem.agents, self.blocks)):
            model = ag.model
            n, m = model.n, model.m
            for traj in ("t", "s"):
                xi, ui = blk.X[traj], blk.U[traj]
                # initial condition
                T.add(z[xi[0]] - ag.x0, np.arange(n), xi[0], np.ones(n))
                self._dyn_rows.append((a, traj, T.count))
                X, U = z[xi], z[ui]
                A, B = model.jacobians(X[:N], U)
                res = X[1:] - model.step(X[:N], U)
                r = np.arange(N * n).reshape(N, n)
                rr = np.concatenate([
                    r.ravel(),
                    np.repeat(r, n, axis=1).ravel(),
                    np.repeat(r, m, axis=1).ravel(),
                ])
                cc = np.concatenate([
                    xi[1:].ravel(),
                    np.repeat(xi[:N][:, None, :], n, axis=1).ravel(),
                    np.repeat(ui[:, None, :], n, axis=1).ravel(),
                ])
                vv = np.concatenate([np.ones(N * n), -A.ravel(), -B.ravel()])
                T.add(res.ravel(), rr, cc, vv)
            # terminal equilibrium: x_s(N) = x_bar, x_bar = f(x_bar, u_bar)
            xN = blk.X["s"][N]
            T.add(z[xN] - z[blk.xbar],
                  np.concatenate([np.arange(n), np.arange(n)]),
                  np.concatenate([xN, blk.xbar]),
                  np.concatenate([np.ones(n), -np.ones(n)]))
            if model.equilibrium_map is None:
                self._dyn_rows.append((a, "bar", T.count))
            _add_equilibrium(T, model, z, blk.xbar, blk.ubar)
        if self.cfg.collision == "polytope":
            self._polytope_alignment(z, T)
        return T.build(self.n_vars)

    def inequalities(self, z):
        T = _Triplets()
        N, cfg = self.cfg.N, self.cfg
        agents = self.problem.agents
        if cfg.collision == "sphere":
            for a, b in self.problem.pairs:
                ra = (agents[a].sigma + agents[b].sigma + cfg.d_min) ** 2
                for traj in ("t", "s"):
                    pa = self.blocks[a].X[traj][:, :2]
                    pb = self.blocks[b].X[traj][:, :2]
                    d = z[pa] - z[pb]
                    val = ra - np.sum(d * d, axis=1)
                    rows = np.repeat(np.arange(N + 1), 2)
                    T.add(val, np.concatenate([rows, rows]),
                          np.concatenate([pa.ravel(), pb.ravel()]),
                          np.concatenate([(-2 * d).ravel(), (2 * d).ravel()]))
        else:
            self._polytope_margin(z, T)
        for i, ag in enumerate(agents):
            blk = self.blocks[i]
            for ob in self.problem.obstacles:
                rad = (ag.sigma + ob.sigma + cfg.d_min) ** 2
                for traj in ("t", "s"):
                    pa = blk.X[traj][:, :2]
                    d = z[pa] - ob.positions
                    T.add(rad - np.sum(d * d, axis=1), np.repeat(np.arange(N + 1), 2),
                          pa.ravel(), (-2 * d).ravel())
        self._safe_rows = []
        for i, ag in enumerate(agents):
            blk = self.blocks[i]
            Ac, bc = ag.safe_set.A, ag.safe_set.b
            F = Ac.shape[0]
            ps = blk.X["s"][:, :2]
            P = z[ps]
            if cfg.safe_set_mode == "rate":
                val = (P[1:] - P[:-1]) @ Ac.T - bc / N  # (N, F)
                r = np.arange(N * F).reshape(N, F)
                rr = np.repeat(r, 2, axis=1).ravel()
                rows = np.concatenate([rr, rr])
                cols = np.concatenate([np.repeat(ps[1:][:, None, :], F, axis=1).ravel(),
                                       np.repeat(ps[:-1][:, None, :], F, axis=1).ravel()])
                coef = np.tile(Ac.ravel(), N)
                T.add(val.ravel(), rows, cols, np.concatenate([coef, -coef]))
            else:
                val = (P[1:] - ag.p0) @ Ac.T - bc
                r = np.arange(N * F).reshape(N, F)
                T.add(val.ravel(), np.repeat(r, 2, axis=1).ravel(),
                      np.repeat(ps[1:][:, None, :], F, axis=1).ravel(), np.tile(Ac.ravel(), N))
            if ag.J_bound is not UNBOUNDED:
                val, grad_idx, grad = self._safe_cost_and_grad(z, i)
                self._safe_rows.append((i, T.count))
                T.add(val - ag.J_bound, np.zeros(grad_idx.size, int), grad_idx, grad)
        return T.build(self.n_vars)

    def _safe_cost_and_grad(self, z, i):
        ag, blk, w = self.problem.agents[i], self.blocks[i], self.weights[i]
        N = self.cfg.N
        xb, ub_ = z[blk.xbar], z[blk.ubar]
        dx = z[blk.X["s"][:N]] - xb
        du = z[blk.U["s"]] - ub_
        dr = xb - ag.ref.x_bar
        val = _qf(w.Q_s, dx).sum() + _qf(w.R_s, du).sum() + _qf(w.T_O, dr)
        gx = 2 * dx @ w.Q_s
        gu = 2 * du @ w.R_s
        gxb = -gx.sum(axis=0) + 2 * w.T_O @ dr
        gub = -gu.sum(axis=0)
        idx = np.concatenate([blk.X["s"][:N].ravel(), blk.U["s"].ravel(), blk.xbar, blk.ubar])
        grad = np.concatenate([gx.ravel(), gu.ravel(), gxb, gub])
        return float(val), idx, grad

    # polytope certificates ------------------------------------------------------
    def _pair_geometry(self, z, idx, traj):
        """World-frame data for every stage: rotation, its derivative, translation."""
        ag = self.problem.agents[idx]
        shape = self._shape(idx)
        X = z[self.blocks[idx].X[traj]]
        hi = shape.heading_index
        out = []
        for j in range(self.cfg.N + 1):
            if hi is None:
                R, dR = np.eye(2), np.zeros((2, 2))
            else:
                R, dR = _rot(X[j, hi])
            out.append((R, dR, X[j, :2]))
        return shape, out, hi, ag

    def _polytope_alignment(self, z, T):
        for (a, b, traj), (li, mi) in self.dual_index.items():
            sa, ga, ha, _ = self._pair_geometry(z, a, traj)
            sb, gb, hb, _ = self._pair_geometry(z, b, traj)
            xa, xb = self.blocks[a].X[traj], self.blocks[b].X[traj]
            Aa, Ab = sa.template.A, sb.template.A
            for j in range(self.cfg.N + 1):
                lam, mu = z[li[j]], z[mi[j]]
                Ra, dRa, _ = ga[j]
                Rb, dRb, _ = gb[j]
                val = Ra @ (Aa.T @ lam) + Rb @ (Ab.T @ mu)
                rows, cols, vals = [], [], []
                Ja, Jb = Ra @ Aa.T, Rb @ Ab.T
                for r in range(2):
                    rows += [r] * (li.shape[1] + mi.shape[1])
                    cols += list(li[j]) + list(mi[j])
                    vals += list(Ja[r]) + list(Jb[r])
                if ha is not None:
                    da = dRa @ (Aa.T @ lam)
                    rows += [0, 1]
                    cols += [xa[j, ha]] * 2
                    vals += list(da)
                if hb is not None:
                    db = dRb @ (Ab.T @ mu)
                    rows += [0, 1]
                    cols += [xb[j, hb]] * 2
                    vals += list(db)
                T.add(val, rows, cols, vals)

    def _polytope_margin(self, z, T):
        d_min = self.cfg.d_min
        for (a, b, traj), (li, mi) in self.dual_index.items():
            sa, ga, ha, _ = self._pair_geometry(z, a, traj)
            sb, gb, hb, _ = self._pair_geometry(z, b, traj)
            xa, xb = self.blocks[a].X[traj], self.blocks[b].X[traj]
            Aa, ba = sa.template.A, sa.template.b
            Ab, bb = sb.template.A, sb.template.b
            for j in range(self.cfg.N + 1):
                lam, mu = z[li[j]], z[mi[j]]
                Ra, dRa, ta = ga[j]
                Rb, dRb, tb = gb[j]
                ga_vec = ba + Aa @ (Ra.T @ ta)
                gb_vec = bb + Ab @ (Rb.T @ tb)
                margin = -ga_vec @ lam - gb_vec @ mu
                # d_min + eps - margin <= 0
                cols = list(li[j]) + list(mi[j]) + list(xa[j, :2]) + list(xb[j, :2])
                vals = list(ga_vec) + list(gb_vec) + list(Ra @ (Aa.T @ lam)) + list(Rb @ (Ab.T @ mu))
                if ha is not None:
                    cols.append(xa[j, ha])
                    vals.append(float(lam @ Aa @ (dRa.T @ ta)))
                if hb is not None:
                    cols.append(xb[j, hb])
                    vals.append(float(mu @ Ab @ (dRb.T @ tb)))
                T.add(d_min + MARGIN_EPS - margin, [0] * len(cols), cols, vals)
                v = Ab.T @ mu
                T.add(v @ v - 1.0, [0] * mi.shape[1], mi[j], 2 * Ab @ v)

    # bounds, hessian ----------------------------------------------------------
    def bounds(self):
        lb = np.full(self.n_vars, -np.inf)
        ub = np.full(self.n_vars, np.inf)
        for ag, blk in zip(self.problem.agents, self.blocks):
            m = ag.model
            for traj in ("t", "s"):
                lb[blk.U[traj]] = m.u_lb
                ub[blk.U[traj]] = m.u_ub
                lb[blk.X[traj][1:]] = m.x_lb
                ub[blk.X[traj][1:]] = m.x_ub
            lb[blk.xbar], ub[blk.xbar] = m.x_lb, m.x_ub
            lb[blk.ubar], ub[blk.ubar] = m.u_lb, m.u_ub
        for li, mi in self.dual_index.values():
            lb[li.ravel()] = 0.0
            lb[mi.ravel()] = 0.0
        return lb, ub

    def hessian(self, z, y_eq, y_in):
        """Objective Hessian plus the dynamics curvature, projected stage-wise onto
        the PSD cone. The convergence rows are handled exactly by the subproblem."""
        H = self._H_obj
        if y_eq.size == 0 or not np.any(y_eq):
            return H
        N = self.cfg.N
        rows, cols, vals = [], [], []
        for a, traj, start in self._dyn_rows:
            model = self.problem.agents[a].model
            blk = self.blocks[a]
            n = model.n
            if traj == "bar":
                X, U = z[blk.xbar][None], z[blk.ubar][None]
                w = -y_eq[start:start + n][None]
                idx = np.concatenate([blk.xbar, blk.ubar])[None]
            else:
                X, U = z[blk.X[traj][:N]], z[blk.U[traj]]
                w = -y_eq[start:start + N * n].reshape(N, n)
                idx = np.hstack([blk.X[traj][:N], blk.U[traj]])
            Hd = model.weighted_hessian(X, U, w)
            if Hd is None:
                continue
            lam, V = np.linalg.eigh(Hd)
            Hd = np.einsum("kij,kj,klj->kil", V, np.maximum(lam, 0.0), V)
            k = idx.shape[1]
            rows.append(np.repeat(idx, k, axis=1).ravel())
            cols.append(np.tile(idx, (1, k)).ravel())
            vals.append(Hd.ravel())
        if rows:
            n_v = self.n_vars
            H = H + sp.coo_matrix((np.concatenate(vals), (np.concatenate(rows), np.concatenate(cols))),
                                  shape=(n_v, n_v)).tocsc()
        return H

    def _safe_cost_factor(self, i):
        """Sparse ``L`` with ``|L^T d|^2`` equal to the quadratic part of the safe
        cost, built from Cholesky factors of its weight matrices."""
        blk, w = self.blocks[i], self.weights[i]
        N = self.cfg.N
        rows, cols, vals = [], [], []
        r = 0

        def put(C, idx, ref_idx=None):
            nonlocal r
            Ct = C.T
            k = Ct.shape[0]
            for a in range(k):
                nz = np.flatnonzero(Ct[a])
                rows.extend([r + a] * nz.size)
                cols.extend(idx[nz])
                vals.extend(Ct[a, nz])
                if ref_idx is not None:
                    rows.extend([r + a] * nz.size)
                    cols.extend(ref_idx[nz])
                    vals.extend(-Ct[a, nz])
            r += k

        Cq, Cr, Ct_ = (np.linalg.cholesky(M) for M in (w.Q_s, w.R_s, w.T_O))
        for j in range(N):
            put(Cq, blk.X["s"][j], blk.xbar)
            put(Cr, blk.U["s"][j], blk.ubar)
        put(Ct_, blk.xbar)
        Lt = sp.coo_matrix((vals, (rows, cols)), shape=(r, self.n_vars))
        return Lt.T.tocsr()

    def nlp(self) -> NlpInstance:
        lb, ub = self.bounds()
        # evaluate once so the row map of the convergence constraints exists
        self.inequalities(np.clip(np.zeros(self.n_vars), lb, ub))
        quad = {row: self._safe_cost_factor(i) for i, row in self._safe_rows}
        return NlpInstance(self.n_vars, self.objective, self.equalities, self.inequalities,
                           lb, ub, self.hessian, quad or None)

    # packing ------------------------------------------------------------------
    def pack(self, sols: Sequence[AgentSolution], duals: Optional[dict] = None) -> np.ndarray:
        z = np.zeros(self.n_vars)
        for blk, s in zip(self.blocks, sols):
            z[blk.U["t"]] = s.U_t
            z[blk.U["s"][1:]] = s.U_s[1:]
            z[blk.X["t"]] = s.X_t
            z[blk.X["s"]] = s.X_s
            z[blk.xbar] = s.x_bar
            z[blk.ubar] = s.u_bar
        ids = [ag.id for ag in self.problem.agents]
        for (a, b, traj), (li, mi) in self.dual_index.items():
            key = (ids[a], ids[b], traj)
            if duals and key in duals:
                lam, mu = duals[key]
            else:
                lam, mu = self._initial_certificate(z, a, b, traj)
            z[li] = lam
            z[mi] = mu
        return z

    def _initial_certificate(self, z, a, b, traj):
        from scipy.optimize import linprog
        sa, sb = self._shape(a), self._shape(b)
        Xa, Xb = z[self.blocks[a].X[traj]], z[self.blocks[b].X[traj]]
        fa, fb = sa.template.n_facets, sb.template.n_facets
        lam = np.zeros((self.cfg.N + 1, fa))
        mu = np.zeros((self.cfg.N + 1, fb))
        for j in range(self.cfg.N + 1):
            Wa, Wb = sa.world(Xa[j]), sb.world(Xb[j])
            c = np.concatenate([Wa.b, Wb.b])
            A_eq = np.hstack([Wa.A.T, Wb.A.T])
            Ab = sb.template.A.T
            A_ub = np.vstack([np.hstack([np.zeros((2, fa)), Ab]),
                              np.hstack([np.zeros((2, fa)), -Ab])])
            res = linprog(c, A_ub=A_ub, b_ub=np.full(4, 1 / np.sqrt(2)), A_eq=A_eq,
                          b_eq=np.zeros(2), bounds=[(0, None)] * (fa + fb), method="highs")
            if res.status == 0:
                lam[j], mu[j] = res.x[:fa], res.x[fa:]
        return lam, mu

    def unpack(self, z, status: str, report: Optional[SolveReport] = None,
               rollout: bool = True) -> FhocpSolution:
        """Extract trajectories; with ``rollout`` the states are re-simulated from
        the inputs so that they satisfy the dynamics to machine precision."""
        out = {}
        N = self.cfg.N
        for ag, blk in zip(self.problem.agents, self.blocks):
            model = ag.model
            U_t, U_s = z[blk.U["t"]].copy(), z[blk.U["s"]].copy()
            if rollout:
                X_t = model.rollout(ag.x0, U_t)
                X_s = model.rollout(ag.x0, U_s)
                x_bar = X_s[N].copy()
            else:
                X_t, X_s = z[blk.X["t"]].copy(), z[blk.X["s"]].copy()
                x_bar = z[blk.xbar].copy()
            u_bar = z[blk.ubar].copy()
            s = AgentSolution(U_t, U_s, X_t, X_s, x_bar, u_bar)
            s.J = tracking_cost(X_t, U_t, x_bar, ag.ref, self.cfg, model)
            s.J_s = safe_cost(X_s, U_s, x_bar, u_bar, ag.ref, self.cfg, model)
            out[ag.id] = s
        ids = [ag.id for ag in self.problem.agents]
        duals = {(ids[a], ids[b], t): (z[li].copy(), z[mi].copy())
                 for (a, b, t), (li, mi) in self.dual_index.items()}
        return FhocpSolution(out, status, report, duals)


def build_fhocp(problem: FhocpProblem, cfg: OcpConfig) -> FhocpTranscription:
    return FhocpTranscription(problem, cfg)


def solve_fhocp(problem: FhocpProblem, cfg: OcpConfig, warm: Sequence[AgentSolution],
                duals: Optional[dict] = None) -> FhocpSolution:
    tr = build_fhocp(problem, cfg)
    nlp = tr.nlp()
    z0 = tr.pack(warm, duals)
    z, report = solve(nlp, z0, tol_feas=cfg.tol_feas, tol_opt=cfg.tol_opt, max_iter=cfg.max_iter)
    status = report.status if report.feasible else "failed"
    if report.feasible and report.status != "optimal":
        status = "feasible"
    return tr.unpack(z, status, report)


# -- independent residual evaluation ---------------------------------------------

def constraint_residuals(problem: FhocpProblem, cfg: OcpConfig, sol: FhocpSolution) -> dict:
    """Constraint violations of ``sol`` for ``problem``, evaluated directly from
    the trajectories (positive numbers are violations, per constraint family)."""
    N = cfg.N
    res = {k: 0.0 for k in ("initial", "shared_input", "dynamics", "terminal", "state_box",
                            "input_box", "coupling", "safe_set", "convergence")}
    agents = problem.agents
    sols = [sol.agents[ag.id] for ag in agents]
    for ag, s in zip(agents, sols):
        m = ag.model
        for X, U in ((s.X_t, s.U_t), (s.X_s, s.U_s)):
            res["initial"] = max(res["initial"], float(np.max(np.abs(X[0] - ag.x0))))
            res["dynamics"] = max(res["dynamics"], float(np.max(np.abs(X[1:] - m.step(X[:N], U)))))
            res["state_box"] = max(res["state_box"], float(np.max(np.maximum(X[1:] - m.x_ub, m.x_lb - X[1:]))))
            res["input_box"] = max(res["input_box"], float(np.max(np.maximum(U - m.u_ub, m.u_lb - U))))
        res["shared_input"] = max(res["shared_input"], float(np.max(np.abs(s.U_t[0] - s.U_s[0]))))
        res["terminal"] = max(res["terminal"], float(np.max(np.abs(s.X_s[N] - s.x_bar))),
                              float(np.max(np.abs(m.step(s.x_bar, s.u_bar) - s.x_bar))))
        Ac, bc = ag.safe_set.A, ag.safe_set.b
        P = s.X_s[:, :2]
        if cfg.safe_set_mode == "rate":
            v = (P[1:] - P[:-1]) @ Ac.T - bc / N
        else:
            v = (P[1:] - ag.p0) @ Ac.T - bc
        res["safe_set"] = max(res["safe_set"], float(np.max(v)))
        if ag.J_bound is not UNBOUNDED:
            J_s = safe_cost(s.X_s, s.U_s, s.x_bar, s.u_bar, ag.ref, cfg, m)
            res["convergence"] = max(res["convergence"], J_s - ag.J_bound)
        for ob in problem.obstacles:
            need = ag.sigma + ob.sigma + cfg.d_min
            for X in (s.X_t, s.X_s):
                dist = np.linalg.norm(X[:, :2] - ob.positions, axis=1)
                res["coupling"] = max(res["coupling"], float(np.max(need ** 2 - dist ** 2)))
    for a, b in problem.pairs:
        need = agents[a].sigma + agents[b].sigma + cfg.d_min
        for key in ("X_t", "X_s"):
            Pa = getattr(sols[a], key)[:, :2]
            Pb = getattr(sols[b], key)[:, :2]
            dist = np.linalg.norm(Pa - Pb, axis=1)
            res["coupling"] = max(res["coupling"], float(np.max(need ** 2 - dist ** 2)))
    return res


def max_residual(res: dict) -> float:
    return max(0.0, max(res.values()))


# -- optimal reachable steady state ----------------------------------------------

def optimal_reachable_steady_state(model: AgentModel, x0, ref: Equilibrium, N: int,
                                   safe_set: HPolytope, cfg: OcpConfig,
                                   obstacles: Sequence[Obstacle] = (),
                                   sigma: float = 1.0, J_bound: Optional[float] = UNBOUNDED,
                                   guesses: Sequence[np.ndarray] = ()) -> Equilibrium:
    """Steady state closest to ``ref`` (in offset cost) that ``x0`` can reach in
    ``N`` steps while staying in the safe set around its start and clear of the
    given neighbour trajectories.

    Several initial guesses are tried (rest, then each entry of ``guesses``:
    a target position or a solution whose safe inputs seed the rollout); the
    best local solution is returned.
    """
    x0 = np.asarray(x0, float)
    n, m = model.n, model.m
    w = cfg.resolved_weights(model)
    nv = N * m + (N + 1) * n + m
    Ui = np.arange(N * m).reshape(N, m)
    Xi = np.arange(N * m, N * m + (N + 1) * n).reshape(N + 1, n)
    Ubar = np.arange(nv - m, nv)
    p0 = model.position(x0)
    Ac, bc = safe_set.A, safe_set.b

    def obj(z):
        d = z[Xi[N]] - ref.x_bar
        g = np.zeros(nv)
        g[Xi[N]] = 2 * w.T_O @ d
        return float(_qf(w.T_O, d)), g

    def eq(z):
        T = _Triplets()
        T.add(z[Xi[0]] - x0, np.arange(n), Xi[0], np.ones(n))
        X, U = z[Xi], z[Ui]
        A, B = model.jacobians(X[:N], U)
        r = np.arange(N * n).reshape(N, n)
        T.add((X[1:] - model.step(X[:N], U)).ravel(),
              np.concatenate([r.ravel(), np.repeat(r, n, axis=1).ravel(), np.repeat(r, m, axis=1).ravel()]),
              np.concatenate([Xi[1:].ravel(), np.repeat(Xi[:N][:, None, :], n, axis=1).ravel(),
                              np.repeat(Ui[:, None, :], n, axis=1).ravel()]),
              np.concatenate([np.ones(N * n), -A.ravel(), -B.ravel()]))
        _add_equilibrium(T, model, z, Xi[N], Ubar)
        return T.build(nv)

    def ineq(z):
        T = _Triplets()
        P = z[Xi[:, :2]]
        F = Ac.shape[0]
        r = np.arange(N * F).reshape(N, F)
        if cfg.safe_set_mode == "rate":
            # same per-step form as the safe trajectory of the FHOCP
            vals = (P[1:] - P[:-1]) @ Ac.T - bc / N
            rr = np.repeat(r, 2, axis=1).ravel()
            T.add(vals.ravel(), np.concatenate([rr, rr]),
                  np.concatenate([np.repeat(Xi[1:, None, :2], F, axis=1).ravel(),
                                  np.repeat(Xi[:N, None, :2], F, axis=1).ravel()]),
                  np.concatenate([np.tile(Ac.ravel(), N), np.tile(-Ac.ravel(), N)]))
        else:
            T.add(((P[1:] - p0) @ Ac.T - bc).ravel(), np.repeat(r, 2, axis=1).ravel(),
                  np.repeat(Xi[1:, None, :2], F, axis=1).ravel(), np.tile(Ac.ravel(), N))
        for ob in obstacles:
            d = P - ob.positions
            need = (sigma + ob.sigma + cfg.d_min) ** 2
            T.add(need - np.sum(d * d, axis=1), np.repeat(np.arange(N + 1), 2),
                  Xi[:, :2].ravel(), (-2 * d).ravel())
        if J_bound is not UNBOUNDED:
            X, U = z[Xi], z[Ui]
            xb, ub_ = X[N], z[Ubar]
            dx, du = X[:N] - xb, U - ub_
            val = _qf(w.Q_s, dx).sum() + _qf(w.R_s, du).sum() + _qf(w.T_O, xb - ref.x_bar)
            gx = 2 * dx @ w.Q_s
            gu = 2 * du @ w.R_s
            g = np.zeros(nv)
            g[Xi[:N]] += gx
            g[Ui] += gu
            g[Xi[N]] += -gx.sum(axis=0) + 2 * w.T_O @ (xb - ref.x_bar)
            g[Ubar] += -gu.sum(axis=0)
            nz = np.flatnonzero(g)
            T.add(val - J_bound, np.zeros(nz.size, int), nz, g[nz])
        return T.build(nv)

    lb = np.full(nv, -np.inf)
    ub = np.full(nv, np.inf)
    lb[Ui], ub[Ui] = model.u_lb, model.u_ub
    lb[Xi[1:]], ub[Xi[1:]] = model.x_lb, model.x_ub
    lb[Ubar], ub[Ubar] = model.u_lb, model.u_ub

    def hess(z, ye, yi):
        M = sp.lil_matrix((nv, nv))
        idx = Xi[N]
        M[np.ix_(idx, idx)] = 2 * w.T_O
        return M.tocsc()

    nlp = NlpInstance(nv, obj, eq, ineq, lb, ub, hess)
    inits = [_straight_guess(model, x0, None, N)]
    for g in guesses:
        # a previous safe plan is used as is, a position as a straight run
        inits.append(np.asarray(g.U_s, float) if hasattr(g, "U_s") else _straight_guess(model, x0, g, N))
    best = None
    for U0 in inits:
        X0 = model.rollout(x0, U0)
        z0 = np.zeros(nv)
        z0[Ui], z0[Xi] = U0, X0
        z0[Ubar] = np.clip(np.zeros(m), model.u_lb, model.u_ub)
        z, rep = solve(nlp, z0, tol_feas=1e-8, tol_opt=1e-6, max_iter=200, regularization=1e-4)
        if rep.feasible and (best is None or rep.objective < best[1]):
            best = (z, rep.objective)
    if best is None:
        raise EmptyReachableSet("no admissible reachable steady state found")
    z = best[0]
    return Equilibrium(z[Xi[N]].copy(), z[Ubar].copy())


def _straight_guess(model: AgentModel, x0, goal, N):
    """A crude open-loop input sequence: rest, or a double-integrator style push."""
    U = np.tile(np.clip(np.zeros(model.m), model.u_lb, model.u_ub), (N, 1))
    if goal is None or model.name != "double_integrator":
        return U
    T_s = model.params["T_s"]
    half = N // 2
    dp = np.asarray(goal, float)[:2] - np.asarray(x0)[:2]
    a = dp / (max(half, 1) * max(N - half - 1, 1) * T_s ** 2)
    U[:half] = np.clip(a, model.u_lb, model.u_ub)
    U[half:N - 1] = np.clip(-a, model.u_lb, model.u_ub)
    return U
