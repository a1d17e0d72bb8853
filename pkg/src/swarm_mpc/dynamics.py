"""Agent models: discrete-time dynamics with box constraints.

Every model keeps the planar position in the first two state coordinates and
is vectorised over leading axes, so ``model.step(X, U)`` with ``X`` of shape
``(K, n)`` advances ``K`` states at once.
"""
from __future__ import annotations

import math
from functools import partial
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

EQ_TOL = 1e-9


@dataclass(frozen=True, eq=False)
class AgentModel:
    name: str
    n: int
    m: int
    f: Callable[[np.ndarray, np.ndarray], np.ndarray]
    x_lb: np.ndarray
    x_ub: np.ndarray
    u_lb: np.ndarray
    u_ub: np.ndarray
    jac: Optional[Callable] = None
    hess: Optional[Callable] = None  # (x, u, w) -> sum_r w_r d2f_r/d(x,u)2
    # (x, u) -> (r, dr/dx, dr/du): independent equations whose zeros are exactly the
    # equilibria; used instead of x - f(x, u) when that system is rank deficient
    equilibrium_map: Optional[Callable] = None
    heading_index: Optional[int] = None
    params: dict = field(default_factory=dict)
    n_pos: int = 2

    def __post_init__(self):
        for attr, size in (("x_lb", self.n), ("x_ub", self.n), ("u_lb", self.m), ("u_ub", self.m)):
            arr = np.asarray(getattr(self, attr), dtype=float).reshape(-1)
            if arr.size != size:
                raise ValueError(f"{attr} must have {size} entries")
            object.__setattr__(self, attr, arr)
        if np.any(self.x_lb > self.x_ub) or np.any(self.u_lb > self.u_ub):
            raise ValueError("empty state or input box")

    @property
    def C(self) -> np.ndarray:
        C = np.zeros((self.n_pos, self.n))
        C[:, :self.n_pos] = np.eye(self.n_pos)
        return C

    def position(self, x: np.ndarray) -> np.ndarray:
        return np.asarray(x)[..., :self.n_pos]

    def step(self, x, u) -> np.ndarray:
        return self.f(np.asarray(x, float), np.asarray(u, float))

    def jacobians(self, x, u) -> tuple[np.ndarray, np.ndarray]:
        """``(df/dx, df/du)`` with shapes ``(..., n, n)`` and ``(..., n, m)``."""
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        if self.jac is not None:
            return self.jac(x, u)
        return _fd_jacobians(self.f, x, u, 1e-6)

    def equilibrium_equations(self, x, u):
        """Residual and Jacobians of a system whose solutions are the equilibria."""
        x = np.asarray(x, float)
        u = np.asarray(u, float)
        if self.equilibrium_map is not None:
            return self.equilibrium_map(x, u)
        A, B = self.jacobians(x, u)
        return x - self.step(x, u), np.eye(self.n) - A, -B

    def weighted_hessian(self, x, u, w) -> Optional[np.ndarray]:
        """``sum_r w[..., r] * d2 f_r / d(x, u)^2``, shape ``(..., n+m, n+m)``.

        ``None`` when the model provides no second derivatives (the caller then
        drops the dynamics curvature).
        """
        if self.hess is None:
            return None
        return self.hess(np.asarray(x, float), np.asarray(u, float), np.asarray(w, float))

    def rollout(self, x0, U) -> np.ndarray:
        U = np.asarray(U, float)
        X = np.empty((U.shape[0] + 1, self.n))
        X[0] = x0
        for j in range(U.shape[0]):
            X[j + 1] = self.f(X[j], U[j])
        return X


@dataclass(frozen=True, eq=False)
class Equilibrium:
    x_bar: np.ndarray
    u_bar: np.ndarray

    def residual(self, model: AgentModel) -> float:
        return float(np.max(np.abs(model.step(self.x_bar, self.u_bar) - self.x_bar)))

    def check(self, model: AgentModel, tol: float = EQ_TOL) -> "Equilibrium":
        r = self.residual(model)
        if r > tol:
            raise ValueError(f"not an equilibrium (residual {r:.3e})")
        return self


def _fd_jacobians(f, x, u, h):
    n, m = x.shape[-1], u.shape[-1]
    A = np.empty(x.shape[:-1] + (n, n))
    B = np.empty(x.shape[:-1] + (n, m))
    for k in range(n):
        e = np.zeros(n)
        e[k] = h
        A[..., :, k] = (f(x + e, u) - f(x - e, u)) / (2 * h)
    for k in range(m):
        e = np.zeros(m)
        e[k] = h
        B[..., :, k] = (f(x, u + e) - f(x, u - e)) / (2 * h)
    return A, B


# -- kinematic bicycle -------------------------------------------------------

def bicycle_step(x, u, T_s: float = 0.1, L: float = 0.8) -> np.ndarray:
    """One step of the kinematic bicycle; state (px, py, v, theta, gamma), input (a, delta)."""
    x = np.asarray(x, float)
    u = np.asarray(u, float)
    px, py, v, th, g = (x[..., i] for i in range(5))
    a, d = u[..., 0], u[..., 1]
    return np.stack([
        px + T_s * np.cos(th) * v,
        py + T_s * np.sin(th) * v,
        v + T_s * a,
        th + T_s * (v / L) * np.tan(g),
        g + T_s * d,
    ], axis=-1)


def _bicycle_jac(x, u, T_s, L):
    v, th, g = x[..., 2], x[..., 3], x[..., 4]
    shape = x.shape[:-1]
    A = np.zeros(shape + (5, 5))
    A[..., range(5), range(5)] = 1.0
    c, s = np.cos(th), np.sin(th)
    A[..., 0, 2] = T_s * c
    A[..., 0, 3] = -T_s * s * v
    A[..., 1, 2] = T_s * s
    A[..., 1, 3] = T_s * c * v
    A[..., 3, 2] = T_s * np.tan(g) / L
    A[..., 3, 4] = T_s * v / (L * np.cos(g) ** 2)
    B = np.zeros(shape + (5, 2))
    B[..., 2, 0] = T_s
    B[..., 4, 1] = T_s
    return A, B


def _bicycle_hess(x, u, w, T_s, L):
    v, th, g = x[..., 2], x[..., 3], x[..., 4]
    H = np.zeros(x.shape[:-1] + (7, 7))
    c, s = np.cos(th), np.sin(th)
    sec2 = 1.0 / np.cos(g) ** 2
    vt = w[..., 0] * (-T_s * s) + w[..., 1] * (T_s * c)
    H[..., 2, 3] = H[..., 3, 2] = vt
    H[..., 3, 3] = -T_s * v * (w[..., 0] * c + w[..., 1] * s)
    vg = w[..., 3] * T_s * sec2 / L
    H[..., 2, 4] = H[..., 4, 2] = vg
    H[..., 4, 4] = w[..., 3] * 2.0 * T_s * v * sec2 * np.tan(g) / L
    return H


def _bicycle_equilibrium(x, u):
    # v = a = delta = 0 characterises every fixed point; the raw system x = f(x, u)
    # repeats the speed condition in three rows and loses rank at rest
    Jx = np.zeros((3, 5))
    Jx[0, 2] = 1.0
    Ju = np.zeros((3, 2))
    Ju[1, 0] = Ju[2, 1] = 1.0
    return np.array([x[2], u[0], u[1]]), Jx, Ju


def bicycle(T_s: float = 0.1, L: float = 0.8, a_max: float = 3.0, delta_max: float = 1.0,
            v_max: float = 2.0, v_min: float = -2.0, gamma_max: float = math.pi / 2,
            gamma_margin: float = 1e-3, theta_range=(0.0, 2 * math.pi),
            pos_limit: float = np.inf) -> AgentModel:
    """Kinematic bicycle with the intersection example's limits as defaults.

    The steering box is shrunk by ``gamma_margin`` so ``tan`` stays finite.
    """
    g = gamma_max - gamma_margin
    x_lb = [-pos_limit, -pos_limit, v_min, theta_range[0], -g]
    x_ub = [pos_limit, pos_limit, v_max, theta_range[1], g]
    return AgentModel(
        name="bicycle", n=5, m=2,
        f=partial(bicycle_step, T_s=T_s, L=L),
        x_lb=x_lb, x_ub=x_ub, u_lb=[-a_max, -delta_max], u_ub=[a_max, delta_max],
        jac=partial(_bicycle_jac, T_s=T_s, L=L), hess=partial(_bicycle_hess, T_s=T_s, L=L),
        equilibrium_map=_bicycle_equilibrium, heading_index=3,
        params={"T_s": T_s, "L": L, "a_max": a_max, "delta_max": delta_max,
                "v_max": v_max, "v_min": v_min, "gamma_max": gamma_max,
                "gamma_margin": gamma_margin},
    )


# -- planar double integrator ------------------------------------------------

def _linear_step(x, u, A, B):
    return x @ A.T + u @ B.T


def _linear_jac(x, u, A, B):
    shape = np.asarray(x).shape[:-1]
    return np.broadcast_to(A, shape + A.shape).copy(), np.broadcast_to(B, shape + B.shape).copy()


def _zero_hess(x, u, w):
    k = np.asarray(x).shape[-1] + np.asarray(u).shape[-1]
    return np.zeros(np.asarray(x).shape[:-1] + (k, k))


def double_integrator(T_s: float = 0.1, a_max: float = 1.0, v_max: float = 1.0,
                      pos_limit: float = np.inf) -> AgentModel:
    """State (px, py, vx, vy), input (ax, ay); exact zero-order-hold discretisation."""
    Ad = np.eye(4)
    Ad[0, 2] = Ad[1, 3] = T_s
    Bd = np.zeros((4, 2))
    Bd[0, 0] = Bd[1, 1] = 0.5 * T_s ** 2
    Bd[2, 0] = Bd[3, 1] = T_s
    f = partial(_linear_step, A=Ad, B=Bd)
    jac = partial(_linear_jac, A=Ad, B=Bd)

    return AgentModel(
        name="double_integrator", n=4, m=2, f=f,
        x_lb=[-pos_limit, -pos_limit, -v_max, -v_max], x_ub=[pos_limit, pos_limit, v_max, v_max],
        u_lb=[-a_max, -a_max], u_ub=[a_max, a_max], jac=jac,
        hess=_zero_hess,
        params={"T_s": T_s, "a_max": a_max, "v_max": v_max, "A": Ad, "B": Bd},
    )


# -- structural checks -------------------------------------------------------

def _sample_box(rng, lo, hi, scale=10.0):
    lo = np.where(np.isfinite(lo), lo, -scale)
    hi = np.where(np.isfinite(hi), hi, scale)
    return rng.uniform(lo, hi)


def check_position_invariance(model: AgentModel, samples: int = 100, seed=0,
                              tol: float = 1e-9) -> bool:
    """True iff shifting the position commutes with one step of the dynamics."""
    if samples < 1:
        raise ValueError("samples must be >= 1")
    rng = np.random.default_rng(seed)
    for _ in range(samples):
        x = _sample_box(rng, model.x_lb, model.x_ub)
        u = _sample_box(rng, model.u_lb, model.u_ub)
        shift = np.zeros(model.n)
        shift[:model.n_pos] = rng.uniform(-100.0, 100.0, model.n_pos)
        lhs = model.step(x + shift, u)
        rhs = model.step(x, u) + shift
        if np.max(np.abs(lhs - rhs)) > tol * max(1.0, float(np.max(np.abs(rhs)))):
            return False
    return True


def linearize(model: AgentModel, eq: Equilibrium, h: float = 1e-6) -> tuple[np.ndarray, np.ndarray]:
    """Central-difference Jacobians of the step map at ``eq``."""
    return _fd_jacobians(model.f, np.asarray(eq.x_bar, float), np.asarray(eq.u_bar, float), h)


def controllability_rank(A, B) -> int:
    A = np.atleast_2d(np.asarray(A, float))
    B = np.asarray(B, float).reshape(A.shape[0], -1)
    n = A.shape[0]
    blocks = [B]
    for _ in range(n - 1):
        blocks.append(A @ blocks[-1])
    sv = np.linalg.svd(np.hstack(blocks), compute_uv=False)
    if sv.size == 0 or sv[0] == 0.0:
        return 0
    return int(np.sum(sv > 1e-8 * sv[0]))
