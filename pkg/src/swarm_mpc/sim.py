"""Closed-loop receding-horizon simulation of a swarm with time-varying clusters."""
from __future__ import annotations

import csv
import dataclasses
import io
import logging
import math
from dataclasses import dataclass, field
from typing import Callable, Optional

import numpy as np

from .collision import min_pairwise_distance
from .dynamics import AgentModel, Equilibrium, bicycle, double_integrator
from .geometry import Disc, build_safe_set
from .network import build_graph, classify_case, connected_components, diff_topology
from .ocp import (UNBOUNDED, AgentProblem, AgentSolution, FhocpProblem, FhocpSolution,
                  Obstacle, OcpConfig, candidate_solution, constraint_residuals, max_residual,
                  offset_cost, optimal_reachable_steady_state, rest_guess, safe_cost,
                  solve_fhocp, tracking_cost, update_safe_bound, warm_start)

logger = logging.getLogger(__name__)

MODELS = {"bicycle": bicycle, "double_integrator": double_integrator}
DIST_TOL = 1e-6
CHAIN_TOL = 1e-6


class InitialInfeasible(RuntimeError):
    """The first cluster problem has no feasible point."""


@dataclass
class AgentSpec:
    id: int
    model: str
    x0: np.ndarray
    ref: np.ndarray  # reference state; the reference input is zero
    comm_radius: float
    sigma: float
    params: dict = field(default_factory=dict)

    def __post_init__(self):
        if self.model not in MODELS:
            raise ValueError(f"unknown model {self.model!r}")
        self.x0 = np.asarray(self.x0, float)
        self.ref = np.asarray(self.ref, float)

    def build_model(self) -> AgentModel:
        return MODELS[self.model](**self.params)

    def equality_key(self):
        return (self.id, self.model, tuple(self.x0), tuple(self.ref), self.comm_radius,
                self.sigma, tuple(sorted(self.params.items())))


@dataclass
class Scenario:
    agents: list
    ocp: OcpConfig = field(default_factory=OcpConfig)
    steps: int = 100
    seed: int = 0

    def __eq__(self, other):
        if not isinstance(other, Scenario):
            return NotImplemented
        return self.steps == other.steps and self.seed == other.seed and self.same_setup(other)

    def same_setup(self, other: "Scenario") -> bool:
        """Equal agents and controller settings; run length and seed may differ."""
        return (_cfg_key(self.ocp) == _cfg_key(other.ocp)
                and [a.equality_key() for a in self.agents]
                == [a.equality_key() for a in other.agents])

    def validate(self) -> "Scenario":
        if not self.agents:
            raise ValueError("scenario has no agents")
        ids = [a.id for a in self.agents]
        if len(set(ids)) != len(ids):
            raise ValueError("duplicate agent ids")
        if self.steps < 0:
            raise ValueError("steps must be nonnegative")
        for a in self.agents:
            m = a.build_model()
            if a.x0.shape != (m.n,) or a.ref.shape != (m.n,):
                raise ValueError(f"agent {a.id}: state vectors must have {m.n} entries")
            if np.any(a.x0 < m.x_lb) or np.any(a.x0 > m.x_ub):
                raise ValueError(f"agent {a.id}: initial state outside the state box")
            Equilibrium(a.ref, np.zeros(m.m)).check(m)
            if not a.sigma > 0:
                raise ValueError(f"agent {a.id}: sigma must be positive")
            if a.comm_radius <= a.sigma + self.ocp.d_min / 2:
                raise ValueError(f"agent {a.id}: communication radius too small")
        if len(self.agents) > 1:
            P = np.array([a.x0[:2] for a in self.agents])
            for i in range(len(P)):
                for j in range(i + 1, len(P)):
                    need = self.agents[i].sigma + self.agents[j].sigma + self.ocp.d_min
                    if np.linalg.norm(P[i] - P[j]) <= need:
                        raise ValueError(f"agents {self.agents[i].id} and {self.agents[j].id} "
                                         "start in collision")
        return self


def _cfg_key(cfg: OcpConfig):
    w = None if cfg.weights is None else tuple(
        (k, tuple(np.asarray(v, float).ravel())) for k, v in sorted(cfg.weights.items()))
    return (cfg.N, cfg.beta, cfg.d_min, cfg.n_facets, w, cfg.collision, cfg.safe_set_mode,
            cfg.tol_feas, cfg.tol_opt, cfg.max_iter)


@dataclass
class AgentStep:
    x: np.ndarray
    u: Optional[np.ndarray]
    cluster: int
    J_t: float
    J_s: float
    J_s_bound: Optional[float]
    status: str
    fallback: bool
    case: str
    candidate_residual: Optional[float]  # max residual of the shifted previous plan
    safe_positions: Optional[np.ndarray]  # predicted safe positions, (N+1, 2)


@dataclass
class StepRecord:
    k: int
    agents: dict  # id -> AgentStep
    events: list  # [(agent, kind, [neighbours])]
    clusters: list
    edges: list


@dataclass
class SimLog:
    scenario: Scenario
    steps: list = field(default_factory=list)
    warnings: list = field(default_factory=list)

    @property
    def ids(self) -> list:
        return [a.id for a in self.scenario.agents]

    def states(self, agent) -> np.ndarray:
        return np.array([s.agents[agent].x for s in self.steps])

    def positions(self) -> np.ndarray:
        """Array ``(K+1, n_agents, 2)`` of logged positions."""
        return np.array([[s.agents[i].x[:2] for i in self.ids] for s in self.steps])

    # -- serialization ------------------------------------------------------
    def to_csv(self) -> str:
        n_x = max(len(s.x) for s in self.steps[0].agents.values())
        n_u = max(a.build_model().m for a in self.scenario.agents)
        buf = io.StringIO()
        w = csv.writer(buf, lineterminator="\n")
        w.writerow(["k", "id"] + [f"x{i}" for i in range(n_x)] + [f"u{i}" for i in range(n_u)]
                   + ["cluster", "J_t", "J_s", "J_s_bound", "status", "fallback"])
        for s in self.steps:
            for i in self.ids:
                a = s.agents[i]
                xs = [_fmt(v) for v in a.x] + [""] * (n_x - len(a.x))
                us = [""] * n_u if a.u is None else [_fmt(v) for v in a.u] + [""] * (n_u - len(a.u))
                bound = "inf" if a.J_s_bound is None else _fmt(a.J_s_bound)
                w.writerow([s.k, i] + xs + us + [a.cluster, _fmt(a.J_t), _fmt(a.J_s), bound,
                                                  a.status, int(a.fallback)])
        return buf.getvalue()

    def to_json(self) -> dict:
        steps = []
        for s in self.steps:
            agents = {}
            for i in self.ids:
                a = s.agents[i]
                agents[str(i)] = {
                    "x": a.x.tolist(), "u": None if a.u is None else a.u.tolist(),
                    "cluster": a.cluster, "J_t": _num(a.J_t), "J_s": _num(a.J_s),
                    "J_s_bound": _num(a.J_s_bound), "status": a.status,
                    "fallback": a.fallback, "case": a.case,
                    "candidate_residual": _num(a.candidate_residual),
                    "safe_positions": None if a.safe_positions is None else a.safe_positions.tolist(),
                }
            steps.append({"k": s.k, "agents": agents,
                          "events": [[e[0], e[1], list(e[2])] for e in s.events],
                          "clusters": s.clusters, "edges": s.edges})
        from .scenario_io import scenario_to_dict
        return {"scenario": scenario_to_dict(self.scenario), "steps": steps,
                "warnings": self.warnings}

    @classmethod
    def from_json(cls, data: dict) -> "SimLog":
        from .scenario_io import scenario_from_dict
        try:
            scen = scenario_from_dict(data["scenario"])
            log = cls(scen, warnings=list(data.get("warnings", [])))
            for st in data["steps"]:
                agents = {}
                for key, a in st["agents"].items():
                    agents[int(key)] = AgentStep(
                        x=np.asarray(a["x"], float),
                        u=None if a["u"] is None else np.asarray(a["u"], float),
                        cluster=int(a["cluster"]), J_t=_den(a["J_t"]), J_s=_den(a["J_s"]),
                        J_s_bound=None if a["J_s_bound"] is None else float(a["J_s_bound"]),
                        status=a["status"], fallback=bool(a["fallback"]), case=a["case"],
                        candidate_residual=None if a["candidate_residual"] is None
                        else float(a["candidate_residual"]),
                        safe_positions=None if a["safe_positions"] is None
                        else np.asarray(a["safe_positions"], float))
                log.steps.append(StepRecord(int(st["k"]), agents,
                                            [(e[0], e[1], list(e[2])) for e in st["events"]],
                                            st["clusters"], st["edges"]))
        except (KeyError, TypeError, ValueError) as exc:
            raise ValueError(f"malformed log: {exc}") from exc
        return log


def _fmt(v) -> str:
    return repr(float(v))


def _num(v):
    if v is None:
        return None
    v = float(v)
    return v if math.isfinite(v) else None


def _den(v):
    return float("nan") if v is None else float(v)


# -- closed loop ---------------------------------------------------------------

class _Agent:
    def __init__(self, spec: AgentSpec, cfg: OcpConfig):
        self.spec = spec
        self.model = spec.build_model()
        self.ref = Equilibrium(spec.ref.copy(), np.zeros(self.model.m))
        # footprint plus half the margin on each side keeps non-communicating
        # agents at least 2 sigma + d_min apart
        self.safe_set = build_safe_set(Disc(np.zeros(2), spec.comm_radius),
                                       spec.sigma + cfg.d_min / 2, cfg.n_facets)
        self.comm = Disc(np.zeros(2), spec.comm_radius)
        self.x = spec.x0.copy()
        self.prev: Optional[AgentSolution] = None


def run(scenario: Scenario, on_step: Optional[Callable] = None) -> SimLog:
    """Simulate ``scenario.steps`` closed-loop steps.

    ``on_step(k, problems, candidates, solutions)`` is called after the
    cluster problems of step ``k`` are solved.
    """
    scenario.validate()
    cfg = scenario.ocp
    agents = [_Agent(s, cfg) for s in scenario.agents]
    by_id = {a.spec.id: a for a in agents}
    ids = [a.spec.id for a in agents]
    log = SimLog(scenario)
    prev_topo = None
    failures = {i: 0 for i in ids}

    for k in range(scenario.steps + 1):
        P = np.array([a.x[:2] for a in agents])
        g = build_graph(P, [a.comm for a in agents], k=k, ids=ids)
        topo = connected_components(g)
        events = diff_topology(prev_topo, topo) if prev_topo is not None else []
        record = StepRecord(k, {}, [(e.agent, e.kind, sorted(e.neighbors)) for e in events],
                            [list(c) for c in topo.clusters], [list(e) for e in sorted(g.edges)])
        if k == scenario.steps:
            for cid, cl in enumerate(topo.clusters):
                for i in cl:
                    a = by_id[i]
                    record.agents[i] = AgentStep(a.x.copy(), None, cid, float("nan"),
                                                 float("nan"), None, "final", False,
                                                 classify_case(events, i), None, None)
            log.steps.append(record)
            break

        problems, candidates, solutions = [], [], []
        for cid, cl in enumerate(topo.clusters):
            members = [by_id[i] for i in cl]
            aps = []
            for a in members:
                bound = update_safe_bound(a.prev, a.ref, cfg, a.model)
                aps.append(AgentProblem(a.spec.id, a.model, a.x.copy(), a.ref, a.safe_set,
                                        a.spec.sigma, bound))
            prob = FhocpProblem(aps)
            if k == 0:
                warm = [rest_guess(ap, cfg.N) for ap in aps]
                cand = None
                cand_res = None
            else:
                cand = FhocpSolution({a.spec.id: candidate_solution(a.prev, a.model)
                                      for a in members}, "candidate")
                cand_res = max_residual(constraint_residuals(prob, cfg, cand))
                warm = [warm_start(a.prev, a.model, a.x) for a in members]
            sol = solve_fhocp(prob, cfg, warm)
            fallback = False
            if sol.status == "failed" or max_residual(constraint_residuals(prob, cfg, sol)) > 1e-6:
                if k == 0:
                    raise InitialInfeasible(f"cluster {list(cl)} infeasible at k = 0")
                fallback = True
                sol = _candidate_as_solution(prob, cfg, cand)
            problems.append(prob)
            candidates.append(cand)
            solutions.append(sol)
            for a in members:
                s = sol.agents[a.spec.id]
                if fallback:
                    failures[a.spec.id] += 1
                    if failures[a.spec.id] == 2:
                        msg = f"k={k}: agent {a.spec.id} fell back twice in a row"
                        logger.warning(msg)
                        log.warnings.append(msg)
                else:
                    failures[a.spec.id] = 0
                bound = prob_bound(prob, a.spec.id)
                record.agents[a.spec.id] = AgentStep(
                    a.x.copy(), s.U_t[0].copy(), cid, s.J, s.J_s,
                    None if bound is UNBOUNDED else bound,
                    "candidate" if fallback else sol.status, fallback,
                    classify_case(events, a.spec.id), cand_res, s.X_s[:, :2].copy())
        if on_step is not None:
            on_step(k, problems, candidates, solutions)
        log.steps.append(record)
        # apply the common first input
        for prob, sol in zip(problems, solutions):
            for ap in prob.agents:
                a = by_id[ap.id]
                s = sol.agents[ap.id]
                a.x = a.model.step(a.x, s.U_t[0])
                a.prev = s
        prev_topo = topo
    return log


def prob_bound(prob: FhocpProblem, agent_id):
    for ap in prob.agents:
        if ap.id == agent_id:
            return ap.J_bound
    raise KeyError(agent_id)


def _candidate_as_solution(prob: FhocpProblem, cfg: OcpConfig, cand: FhocpSolution) -> FhocpSolution:
    for ap in prob.agents:
        s = cand.agents[ap.id]
        s.J = tracking_cost(s.X_t, s.U_t, s.x_bar, ap.ref, cfg, ap.model)
        s.J_s = safe_cost(s.X_s, s.U_s, s.x_bar, s.u_bar, ap.ref, cfg, ap.model)
    return FhocpSolution(dict(cand.agents), "candidate")


# -- verification -----------------------------------------------------------------

def verify_log(log: SimLog, scenario: Scenario) -> list:
    """Re-check a log against its scenario; returns a list of findings (empty = pass)."""
    findings = []
    cfg = scenario.ocp
    specs = {a.id: a for a in scenario.agents}
    if set(specs) != set(log.ids) or not log.steps:
        return [{"k": None, "kind": "mismatch", "detail": "log does not match scenario"}]
    models = {i: specs[i].build_model() for i in specs}
    ids = sorted(specs)
    for idx, st in enumerate(log.steps):
        k = st.k
        for i in ids:
            a = st.agents[i]
            m = models[i]
            if idx == 0 and np.max(np.abs(a.x - specs[i].x0)) > 1e-12:
                findings.append({"k": k, "kind": "initial_state", "agent": i})
            if np.any(a.x < m.x_lb - 1e-9) or np.any(a.x > m.x_ub + 1e-9):
                if idx > 0:
                    findings.append({"k": k, "kind": "state_box", "agent": i})
            if a.u is not None and (np.any(a.u < m.u_lb - 1e-9) or np.any(a.u > m.u_ub + 1e-9)):
                findings.append({"k": k, "kind": "input_box", "agent": i})
            if idx + 1 < len(log.steps):
                nxt = log.steps[idx + 1].agents[i]
                if a.u is None:
                    findings.append({"k": k, "kind": "missing_input", "agent": i})
                else:
                    err = float(np.max(np.abs(m.step(a.x, a.u) - nxt.x)))
                    if err > 1e-9:
                        findings.append({"k": k + 1, "kind": "dynamics", "agent": i, "error": err})
                # Lyapunov chain: the next safe cost is below the bound derived from this one
                if a.u is not None and nxt.J_s_bound is not None and math.isfinite(nxt.J_s):
                    if nxt.J_s > nxt.J_s_bound + CHAIN_TOL:
                        findings.append({"k": k + 1, "kind": "safe_cost_chain", "agent": i,
                                         "J_s": nxt.J_s, "bound": nxt.J_s_bound})
                    if math.isfinite(a.J_s) and nxt.J_s_bound > a.J_s + CHAIN_TOL:
                        findings.append({"k": k + 1, "kind": "safe_cost_bound", "agent": i,
                                         "bound": nxt.J_s_bound, "previous": a.J_s})
            if a.safe_positions is not None:
                ag = _Agent(specs[i], cfg)
                A, b = ag.safe_set.A, ag.safe_set.b
                reach = float(np.max(A @ (a.safe_positions[-1] - a.x[:2]) - b))
                if reach > 1e-9:
                    findings.append({"k": k, "kind": "safe_set", "agent": i, "excess": reach})
        if len(ids) > 1:
            for p in range(len(ids)):
                for q in range(p + 1, len(ids)):
                    i, j = ids[p], ids[q]
                    d = float(np.linalg.norm(st.agents[i].x[:2] - st.agents[j].x[:2]))
                    need = specs[i].sigma + specs[j].sigma + cfg.d_min - DIST_TOL
                    if not d > need:
                        findings.append({"k": k, "kind": "distance", "agents": [i, j],
                                         "distance": d})
    return findings


def min_distance_trace(log: SimLog) -> np.ndarray:
    P = log.positions()
    if P.shape[1] < 2:
        return np.full(len(P), np.inf)
    return np.array([min_pairwise_distance(p) for p in P])


# -- offset gap versus beta -----------------------------------------------------

@dataclass
class BetaRow:
    beta: float
    offset: float  # offset cost of the optimal artificial reference
    reachable_offset: float  # offset cost of the optimal reachable steady state
    gap: float


def beta_sweep(scenario: Scenario, betas) -> list:
    """Offset gap of the first agent at k = 0 for each weight in ``betas``.

    The remaining agents are held parked at their initial positions over the
    whole horizon, which is the neighbour information the reachable steady
    state is defined against.
    """
    scenario.validate()
    first, *others = [_Agent(s, scenario.ocp) for s in scenario.agents]
    N = scenario.ocp.N
    obstacles = [Obstacle(np.tile(o.x[:2], (N + 1, 1)), o.spec.sigma) for o in others]
    ap = AgentProblem(first.spec.id, first.model, first.x.copy(), first.ref, first.safe_set,
                      first.spec.sigma, UNBOUNDED)
    w = scenario.ocp.resolved_weights(first.model)
    rows, sols = [], []
    for beta in betas:
        cfg = dataclasses.replace(scenario.ocp, beta=float(beta))
        sol = solve_fhocp(FhocpProblem([ap], obstacles=obstacles), cfg, [rest_guess(ap, N)])
        if sol.status == "failed":
            raise InitialInfeasible(f"beta = {beta}: no feasible plan for agent {ap.id}")
        sols.append(sol.agents[ap.id])
    eq = optimal_reachable_steady_state(first.model, first.x, first.ref, N, first.safe_set,
                                        scenario.ocp, obstacles, first.spec.sigma,
                                        guesses=[first.ref.x_bar[:2]] + sols)
    v_o = offset_cost(eq.x_bar, first.ref, w)
    for beta, s in zip(betas, sols):
        v = offset_cost(s.x_bar, first.ref, w)
        rows.append(BetaRow(float(beta), v, v_o, v - v_o))
    return rows
