"""Scenario files: JSON documents with SI units (metres, seconds, radians).

Schema::

    {
      "agents": [{"id": int, "model": "bicycle" | "double_integrator",
                  "x0": [...], "ref": [...], "comm_radius": m, "sigma": m,
                  "params": {...}}],                  # params optional
      "ocp": {"N": int, "weights": {...}, "beta": float, "d_min": m,
              "n_facets": int, "collision": str, "safe_set_mode": str,
              "tol_feas": float, "tol_opt": float, "max_iter": int},   # all optional
      "sim": {"steps": int, "seed": int}
    }

Unknown keys at any level raise :class:`ScenarioError`.
"""
from __future__ import annotations

import json
import math
from pathlib import Path

import numpy as np

from .ocp import OcpConfig
from .sim import MODELS, AgentSpec, Scenario

_TOP = {"agents", "ocp", "sim"}
_AGENT = {"id", "model", "x0", "ref", "comm_radius", "sigma", "params"}
_OCP = {"N", "weights", "beta", "d_min", "n_facets", "collision", "safe_set_mode",
        "tol_feas", "tol_opt", "max_iter"}
_SIM = {"steps", "seed"}
_WEIGHTS = {"Q_t", "R_t", "Q_s", "R_s", "T_O"}
_PARAMS = {
    "bicycle": {"T_s", "L", "a_max", "delta_max", "v_max", "v_min", "gamma_max",
                "gamma_margin", "theta_range", "pos_limit"},
    "double_integrator": {"T_s", "a_max", "v_max", "pos_limit"},
}


class ScenarioError(ValueError):
    pass


def _check_keys(d, allowed, where):
    if not isinstance(d, dict):
        raise ScenarioError(f"{where}: expected an object")
    extra = set(d) - allowed
    if extra:
        raise ScenarioError(f"{where}: unknown keys {sorted(extra)}")


def _vec(v, where):
    try:
        arr = np.asarray(v, dtype=float)
    except (TypeError, ValueError):
        raise ScenarioError(f"{where}: expected a list of numbers") from None
    if arr.ndim != 1 or not np.all(np.isfinite(arr)):
        raise ScenarioError(f"{where}: expected a finite 1-D list")
    return arr


def scenario_from_dict(data: dict) -> Scenario:
    _check_keys(data, _TOP, "scenario")
    if "agents" not in data:
        raise ScenarioError("scenario: missing 'agents'")
    agents = []
    for idx, a in enumerate(data["agents"]):
        where = f"agents[{idx}]"
        _check_keys(a, _AGENT, where)
        missing = _AGENT - {"params"} - set(a)
        if missing:
            raise ScenarioError(f"{where}: missing {sorted(missing)}")
        if a["model"] not in MODELS:
            raise ScenarioError(f"{where}: unknown model {a['model']!r}")
        params = dict(a.get("params", {}))
        _check_keys(params, _PARAMS[a["model"]], f"{where}.params")
        if "theta_range" in params:
            params["theta_range"] = tuple(float(t) for t in params["theta_range"])
        agents.append(AgentSpec(int(a["id"]), a["model"], _vec(a["x0"], f"{where}.x0"),
                                _vec(a["ref"], f"{where}.ref"), float(a["comm_radius"]),
                                float(a["sigma"]), params))
    ocp = dict(data.get("ocp", {}))
    _check_keys(ocp, _OCP, "ocp")
    if "weights" in ocp:
        _check_keys(ocp["weights"], _WEIGHTS, "ocp.weights")
        ocp["weights"] = {k: np.asarray(v, float) for k, v in ocp["weights"].items()}
    sim = data.get("sim", {})
    _check_keys(sim, _SIM, "sim")
    try:
        cfg = OcpConfig(**ocp)
        scen = Scenario(agents, cfg, int(sim.get("steps", 100)), int(sim.get("seed", 0)))
        scen.validate()
    except (TypeError, ValueError) as exc:
        raise ScenarioError(str(exc)) from exc
    return scen


def _plain(v):
    if isinstance(v, np.ndarray):
        return v.tolist()
    if isinstance(v, tuple):
        return [_plain(x) for x in v]
    if isinstance(v, float) and math.isinf(v):
        return None
    return v


def scenario_to_dict(s: Scenario) -> dict:
    cfg = s.ocp
    ocp = {"N": cfg.N, "beta": cfg.beta, "d_min": cfg.d_min, "n_facets": cfg.n_facets,
           "collision": cfg.collision, "safe_set_mode": cfg.safe_set_mode,
           "tol_feas": cfg.tol_feas, "tol_opt": cfg.tol_opt, "max_iter": cfg.max_iter}
    if cfg.weights is not None:
        ocp["weights"] = {k: _plain(np.asarray(v, float)) for k, v in cfg.weights.items()}
    agents = []
    for a in s.agents:
        d = {"id": a.id, "model": a.model, "x0": a.x0.tolist(), "ref": a.ref.tolist(),
             "comm_radius": a.comm_radius, "sigma": a.sigma}
        params = {k: _plain(v) for k, v in a.params.items() if _plain(v) is not None}
        if params:
            d["params"] = params
        agents.append(d)
    return {"agents": agents, "ocp": ocp, "sim": {"steps": s.steps, "seed": s.seed}}


def load_scenario(path) -> Scenario:
    try:
        text = Path(path).read_text()
    except OSError as exc:
        raise ScenarioError(f"cannot read {path}: {exc.strerror}") from exc
    try:
        data = json.loads(text)
    except json.JSONDecodeError as exc:
        raise ScenarioError(f"{path}: invalid JSON ({exc})") from exc
    return scenario_from_dict(data)


def save_scenario(s: Scenario, path) -> None:
    Path(path).write_text(json.dumps(scenario_to_dict(s), indent=2) + "\n")


def shipped_scenario(name: str = "intersection") -> Path:
    from importlib.resources import files
    return Path(str(files("swarm_mpc") / "scenarios" / f"{name}.json"))
