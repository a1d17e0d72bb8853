"""Sequential quadratic programming for the sparse NLPs assembled by :mod:`swarm_mpc.ocp`.

Problems have the form::

    min f(z)  s.t.  c_E(z) = 0,  c_I(z) <= 0,  lb <= z <= ub

Each iteration linearises the constraints around the current iterate, solves a
convex QP for the step (Clarabel, sparse interior point), and backtracks on an
l1 exact-penalty merit function. Iterates always stay inside the variable box.
"""
from __future__ import annotations

import logging
import os
from dataclasses import dataclass, field
from typing import Callable, Optional

import clarabel
import numpy as np
import scipy.sparse as sp

logger = logging.getLogger(__name__)

ConstraintFn = Callable[[np.ndarray], "tuple[np.ndarray, sp.spmatrix]"]


@dataclass
class NlpInstance:
    """Callback bundle describing one nonlinear program.

    ``objective(z)`` returns ``(value, gradient)``; ``eq`` and ``ineq`` return
    ``(values, jacobian)`` with the jacobian as a sparse ``(m, n_vars)`` matrix.
    ``hessian(z, y_eq, y_ineq)`` is optional and must return a symmetric
    positive semidefinite approximation of the Lagrangian Hessian; without it
    the solver falls back to a dense damped BFGS matrix.

    ``quad_rows`` marks inequality rows that are exactly convex quadratic,
    ``c(z + d) = c(z) + grad.d + |L^T d|^2``; the subproblem then keeps them as
    second-order cones instead of linearising, so a step can never overshoot them.
    """

    n_vars: int
    objective: Callable[[np.ndarray], "tuple[float, np.ndarray]"]
    eq: Optional[ConstraintFn] = None
    ineq: Optional[ConstraintFn] = None
    lb: Optional[np.ndarray] = None
    ub: Optional[np.ndarray] = None
    hessian: Optional[Callable[[np.ndarray, np.ndarray, np.ndarray], sp.spmatrix]] = None
    quad_rows: Optional[dict] = None  # ineq row -> L with row Hessian 2 L L^T


    def __post_init__(self):
        n = self.n_vars
        self.lb = np.full(n, -np.inf) if self.lb is None else np.asarray(self.lb, float)
        self.ub = np.full(n, np.inf) if self.ub is None else np.asarray(self.ub, float)
        if self.lb.shape != (n,) or self.ub.shape != (n,):
            raise ValueError("bounds must have shape (n_vars,)")
        if np.any(self.lb > self.ub):
            raise ValueError("lower bound above upper bound")

    def evaluate(self, z: np.ndarray) -> "_Point":
        f, g = self.objective(z)
        if self.eq is not None:
            ce, je = self.eq(z)
            je = sp.csr_matrix(je)
        else:
            ce, je = np.zeros(0), sp.csr_matrix((0, self.n_vars))
        if self.ineq is not None:
            ci, ji = self.ineq(z)
            ji = sp.csr_matrix(ji)
        else:
            ci, ji = np.zeros(0), sp.csr_matrix((0, self.n_vars))
        return _Point(z, float(f), np.asarray(g, float), np.asarray(ce, float), je,
                      np.asarray(ci, float), ji)


@dataclass
class SolveReport:
    status: str  # "optimal" | "max_iter" | "infeasible"
    iterations: int
    stationarity: float
    violation: float
    objective: float = np.nan
    feasible: bool = False
    trace: list = field(default_factory=list)

    def trace_csv(self) -> str:
        lines = ["iter,merit,violation,step_length"]
        lines += [f"{i},{m!r},{v!r},{a!r}" for i, m, v, a in self.trace]
        return "\n".join(lines) + "\n"


@dataclass
class _Point:
    z: np.ndarray
    f: float
    g: np.ndarray
    ce: np.ndarray
    je: sp.csr_matrix
    ci: np.ndarray
    ji: sp.csr_matrix

    @property
    def violation(self) -> float:
        v = 0.0
        if self.ce.size:
            v = max(v, float(np.max(np.abs(self.ce))))
        if self.ci.size:
            v = max(v, float(np.max(self.ci)))
        return v

    @property
    def violation_l1(self) -> float:
        return float(np.sum(np.abs(self.ce)) + np.sum(np.maximum(self.ci, 0.0)))


def _debug_enabled() -> bool:
    return os.environ.get("SWARM_MPC_DEBUG", "") not in ("", "0")


class _QpFailure(RuntimeError):
    pass


def _clarabel_settings():
    s = clarabel.DefaultSettings()
    s.verbose = False
    s.max_iter = 200
    s.tol_gap_abs = 1e-10
    s.tol_gap_rel = 1e-10
    s.tol_feas = 1e-10
    s.tol_ktratio = 1e-8
    s.max_threads = 1
    return s


_OK = {"Solved", "AlmostSolved"}


def _qp_step(pt: _Point, B: sp.spmatrix, lb: np.ndarray, ub: np.ndarray,
             penalty: Optional[float], quad: Optional[dict] = None):
    """Solve the SQP subproblem; ``penalty`` switches on the elastic (l1) form.

    Returns ``(d, y_eq, y_ineq, y_box_hi, y_box_lo)``.
    """
    n = pt.z.size
    ne, ni = pt.ce.size, pt.ci.size
    hi = np.flatnonzero(np.isfinite(ub))
    lo = np.flatnonzero(np.isfinite(lb))
    eye = sp.identity(n, format="csr")
    box_hi, box_lo = eye[hi], -eye[lo]
    b_hi = ub[hi] - pt.z[hi]
    b_lo = pt.z[lo] - lb[lo]
    quad = quad if (quad and penalty is None) else {}
    if penalty is None:
        lin = np.setdiff1d(np.arange(ni), np.fromiter(quad, int, len(quad)))
        P = sp.triu(B, format="csc")
        q = pt.g
        blocks = [pt.je, pt.ji[lin], box_hi, box_lo]
        b_parts = [-pt.ce, -pt.ci[lin], b_hi, b_lo]
        cones = [clarabel.ZeroConeT(ne), clarabel.NonnegativeConeT(lin.size + hi.size + lo.size)]
        # c + g.d + |L^T d|^2 <= 0  as  |(2 L^T d, t - 1)| <= t + 1 with t = -(c + g.d)
        for row, L in quad.items():
            g = pt.ji[row]
            blocks += [g, -2.0 * sp.csr_matrix(L).T, g]
            c = pt.ci[row]
            b_parts += [np.array([1.0 - c]), np.zeros(L.shape[1]), np.array([-1.0 - c])]
            cones.append(clarabel.SecondOrderConeT(L.shape[1] + 2))
        A = sp.vstack(blocks, format="csc")
        b = np.concatenate(b_parts)
    else:
        ns = 2 * ne + ni
        P = sp.block_diag([sp.triu(B), sp.csc_matrix((ns, ns))], format="csc")
        q = np.concatenate([pt.g, np.full(ns, penalty)])
        Ie = sp.identity(ne, format="csr")
        Ii = sp.identity(ni, format="csr")
        zero_e = sp.csr_matrix((ne, ni))
        zero_i = sp.csr_matrix((ni, 2 * ne))
        rows_e = sp.hstack([pt.je, -Ie, Ie, zero_e])
        rows_i = sp.hstack([pt.ji, zero_i, -Ii])
        pad = sp.csr_matrix((hi.size, ns))
        padl = sp.csr_matrix((lo.size, ns))
        rows_box = sp.vstack([sp.hstack([box_hi, pad]), sp.hstack([box_lo, padl])])
        rows_s = sp.hstack([sp.csr_matrix((ns, n)), -sp.identity(ns)])
        A = sp.vstack([rows_e, rows_i, rows_box, rows_s], format="csc")
        b = np.concatenate([-pt.ce, -pt.ci, b_hi, b_lo, np.zeros(ns)])
        cones = [clarabel.ZeroConeT(ne),
                 clarabel.NonnegativeConeT(ni + hi.size + lo.size + ns)]
    solver = clarabel.DefaultSolver(P.astype(float), np.asarray(q, float), A.astype(float),
                                    b, cones, _clarabel_settings())
    sol = solver.solve()
    status = str(sol.status)
    if status not in _OK:
        raise _QpFailure(status)
    x = np.asarray(sol.x)
    y = np.asarray(sol.z)
    d = x[:n]
    # keep the step strictly inside the box despite interior-point round-off
    d = np.clip(d, lb - pt.z, ub - pt.z)
    y_eq = y[:ne]
    if penalty is None:
        y_in = np.zeros(ni)
        y_in[lin] = y[ne:ne + lin.size]
        o = ne + lin.size
        y_hi = np.zeros(n)
        y_hi[hi] = y[o:o + hi.size]
        o += hi.size
        y_lo = np.zeros(n)
        y_lo[lo] = y[o:o + lo.size]
        o += lo.size
        for row, L in quad.items():
            k = L.shape[1] + 2
            y_in[row] = y[o] + y[o + k - 1]
            o += k
        return d, y_eq, y_in, y_hi, y_lo
    y_in = y[ne:ne + ni]
    y_hi = np.zeros(n)
    y_hi[hi] = y[ne + ni:ne + ni + hi.size]
    y_lo = np.zeros(n)
    y_lo[lo] = y[ne + ni + hi.size:ne + ni + hi.size + lo.size]
    return d, y_eq, y_in, y_hi, y_lo


def _linear_violation_l1(pt: _Point, d: np.ndarray) -> float:
    ce = pt.ce + pt.je @ d if pt.ce.size else pt.ce
    ci = pt.ci + pt.ji @ d if pt.ci.size else pt.ci
    return float(np.sum(np.abs(ce)) + np.sum(np.maximum(ci, 0.0)))


def _lagrangian_grad(pt: _Point, y_eq, y_in, y_hi, y_lo) -> np.ndarray:
    r = pt.g.copy()
    if y_eq.size:
        r += pt.je.T @ y_eq
    if y_in.size:
        r += pt.ji.T @ y_in
    return r + y_hi - y_lo


def _damped_bfgs(B: np.ndarray, s: np.ndarray, y: np.ndarray) -> np.ndarray:
    Bs = B @ s
    sBs = float(s @ Bs)
    if sBs <= 1e-16:
        return B
    sy = float(s @ y)
    if sy < 0.2 * sBs:
        theta = 0.8 * sBs / (sBs - sy)
        y = theta * y + (1.0 - theta) * Bs
        sy = float(s @ y)
    B = B - np.outer(Bs, Bs) / sBs + np.outer(y, y) / sy
    if not np.all(np.isfinite(B)) or np.min(np.diag(B)) <= 0.0:
        return np.eye(B.shape[0])
    return B


def solve(nlp: NlpInstance, init: np.ndarray, tol_feas: float = 1e-6,
          tol_opt: float = 1e-4, max_iter: int = 200,
          regularization: float = 1e-6) -> tuple[np.ndarray, SolveReport]:
    """Run SQP from ``init`` and return ``(z, report)``.

    The returned point is the best iterate seen: the lowest-objective iterate
    with violation below ``tol_feas`` if one exists, otherwise the least
    infeasible one. ``report.status`` is ``"optimal"`` only when both the
    feasibility and the stationarity tolerances are met.
    """
    lb, ub = nlp.lb, nlp.ub
    z = np.clip(np.asarray(init, dtype=float).copy(), lb, ub)
    if not np.all(np.isfinite(z)):
        raise ValueError("initial point must be finite")
    n = nlp.n_vars
    pt = nlp.evaluate(z)
    bfgs = None if nlp.hessian is not None else np.eye(n)
    y_eq = np.zeros(pt.ce.size)
    y_in = np.zeros(pt.ci.size)
    penalty = 1.0
    best = pt
    trace = []
    stationarity = np.inf
    status = "max_iter"
    restoration_stall = 0
    debug = _debug_enabled()

    def better(a: _Point, b: _Point) -> bool:
        fa, fb = a.violation <= tol_feas, b.violation <= tol_feas
        if fa != fb:
            return fa
        if fa:
            return a.f < b.f
        return a.violation < b.violation

    it = 0
    for it in range(1, max_iter + 1):
        if nlp.hessian is not None:
            B = sp.csc_matrix(nlp.hessian(pt.z, y_eq, y_in))
            B = B + regularization * sp.identity(n, format="csc")
        else:
            B = sp.csc_matrix(bfgs)
        elastic = False
        try:
            d, qy_eq, qy_in, qy_hi, qy_lo = _qp_step(pt, B, lb, ub, None, nlp.quad_rows)
        except _QpFailure:
            elastic = True
            try:
                d, qy_eq, qy_in, qy_hi, qy_lo = _qp_step(pt, B, lb, ub, max(penalty, 1e3))
            except _QpFailure as exc:
                logger.debug("QP subproblem failed: %s", exc)
                if pt.violation > tol_feas:
                    status = "infeasible"
                break

        grad_l = _lagrangian_grad(pt, qy_eq, qy_in, qy_hi, qy_lo)
        scale = max(1.0, float(np.max(np.abs(pt.g))) if n else 1.0)
        stationarity = float(np.max(np.abs(grad_l))) if n else 0.0
        compl = 0.0
        if pt.ci.size:
            compl = float(np.max(np.abs(qy_in * pt.ci)))
        if pt.violation <= tol_feas and stationarity <= tol_opt * scale and compl <= tol_opt * scale:
            status = "optimal"
            best = pt
            y_eq, y_in = qy_eq, qy_in
            trace.append((it, pt.f + penalty * pt.violation_l1, pt.violation, 0.0))
            break

        mult = max(np.max(np.abs(qy_eq), initial=0.0), np.max(np.abs(qy_in), initial=0.0))
        if penalty < 1.1 * mult:
            penalty = 2.0 * mult + 1.0
        lin_v = _linear_violation_l1(pt, d)
        v0 = pt.violation_l1
        if elastic and pt.violation > tol_feas and v0 - lin_v <= 1e-9 * max(1.0, v0):
            # stationary for the l1 infeasibility: no linearized progress possible
            trace.append((it, pt.f + penalty * v0, pt.violation, 0.0))
            status = "infeasible"
            break
        dphi = float(pt.g @ d) - penalty * (v0 - lin_v)
        if dphi >= 0.0:
            dphi = -float(d @ (B @ d)) * 0.5 - 1e-16
        phi0 = pt.f + penalty * v0

        alpha = 1.0
        accepted = None
        first = True
        while alpha >= 1e-10:
            trial = nlp.evaluate(pt.z + alpha * d)
            phi = trial.f + penalty * trial.violation_l1
            if phi <= phi0 + 1e-4 * alpha * dphi:
                accepted = trial
                break
            if first and trial.violation_l1 > v0:
                soc = _second_order_correction(nlp, pt, trial, d, B, lb, ub)
                if soc is not None:
                    phi_s = soc.f + penalty * soc.violation_l1
                    if phi_s <= phi0 + 1e-4 * dphi:
                        accepted = soc
                        break
            first = False
            alpha *= 0.5
        if accepted is None:
            trace.append((it, phi0, pt.violation, 0.0))
            if pt.violation > tol_feas:
                status = "infeasible"
            break

        if bfgs is not None:
            s = accepted.z - pt.z
            yv = (_lagrangian_grad(accepted, qy_eq, qy_in, np.zeros(n), np.zeros(n))
                  - _lagrangian_grad(pt, qy_eq, qy_in, np.zeros(n), np.zeros(n)))
            bfgs = _damped_bfgs(bfgs, s, yv)
        if elastic and accepted.violation_l1 >= 0.999 * v0:
            restoration_stall += 1
        else:
            restoration_stall = 0
        pt = accepted
        y_eq, y_in = qy_eq, qy_in
        trace.append((it, pt.f + penalty * pt.violation_l1, pt.violation, alpha))
        if debug:
            logger.debug("sqp it=%d f=%.6g viol=%.3g alpha=%.3g", it, pt.f, pt.violation, alpha)
        if better(pt, best):
            best = pt
        if restoration_stall >= 5:
            status = "infeasible"
            break

    if status != "optimal" and better(pt, best):
        best = pt
    if status == "infeasible" and best.violation <= tol_feas:
        status = "max_iter"
    report = SolveReport(status=status, iterations=it, stationarity=stationarity,
                         violation=best.violation, objective=best.f,
                         feasible=best.violation <= tol_feas, trace=trace)
    if debug:
        logger.debug("sqp trace\n%s", report.trace_csv())
    return best.z.copy(), report


def _second_order_correction(nlp, pt, trial, d, B, lb, ub):
    ci = trial.ci - (pt.ji @ d if pt.ci.size else 0.0)
    for row in (nlp.quad_rows or {}):
        ci[row] = pt.ci[row]  # already exact in the subproblem
    shifted = _Point(pt.z, pt.f, pt.g,
                     trial.ce - (pt.je @ d if pt.ce.size else 0.0),
                     pt.je, ci, pt.ji)
    try:
        d2, *_ = _qp_step(shifted, B, lb, ub, None, nlp.quad_rows)
    except _QpFailure:
        return None
    return nlp.evaluate(np.clip(pt.z + d2, lb, ub))


@dataclass
class DerivativeReport:
    flags: list  # (block, row, col, supplied, finite_difference)
    max_rel_error: float

    @property
    def ok(self) -> bool:
        return not self.flags


def check_derivatives(nlp: NlpInstance, point: np.ndarray, rel_tol: float = 1e-4,
                      step: float = 1e-6) -> DerivativeReport:
    """Compare supplied gradients and Jacobians against central differences.

    An entry is flagged when ``|supplied - fd| > rel_tol * max(1, |fd|)``.
    """
    z = np.asarray(point, dtype=float)
    n = z.size
    blocks = {"objective": lambda v: (np.atleast_1d(nlp.objective(v)[0]),
                                      sp.csr_matrix(np.atleast_2d(nlp.objective(v)[1])))}
    if nlp.eq is not None:
        blocks["eq"] = nlp.eq
    if nlp.ineq is not None:
        blocks["ineq"] = nlp.ineq
    flags = []
    worst = 0.0
    for name, fn in blocks.items():
        _, jac = fn(z)
        jac = sp.csr_matrix(jac).toarray()
        fd = np.zeros_like(jac)
        for k in range(n):
            e = np.zeros(n)
            e[k] = step
            fd[:, k] = (np.asarray(fn(z + e)[0]) - np.asarray(fn(z - e)[0])) / (2 * step)
        err = np.abs(jac - fd) / np.maximum(1.0, np.abs(fd))
        if err.size:
            worst = max(worst, float(err.max()))
        for r, c in zip(*np.nonzero(err > rel_tol)):
            flags.append((name, int(r), int(c), float(jac[r, c]), float(fd[r, c])))
    return DerivativeReport(flags=flags, max_rel_error=worst)
