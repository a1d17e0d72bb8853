"""Command line entry point: ``swarm-mpc run|check|plot|betasweep``.

Exit codes: 0 success, 1 violations found, 2 unreadable or inconsistent
input, 3 the first cluster problem is infeasible.
"""
from __future__ import annotations

import argparse
import json
import logging
import os
import sys
from pathlib import Path

from .scenario_io import ScenarioError, load_scenario
from .sim import InitialInfeasible, SimLog, beta_sweep, run, verify_log

EXIT_OK, EXIT_VIOLATIONS, EXIT_PARSE, EXIT_INFEASIBLE = 0, 1, 2, 3


class InputError(Exception):
    pass


def _load_log(path) -> SimLog:
    try:
        data = json.loads(Path(path).read_text())
    except OSError as exc:
        raise InputError(f"cannot read {path}: {exc.strerror}") from exc
    except json.JSONDecodeError as exc:
        raise InputError(f"{path}: invalid JSON ({exc})") from exc
    try:
        log = SimLog.from_json(data)
    except (ValueError, TypeError, AttributeError) as exc:
        raise InputError(f"{path}: {exc}") from exc
    if not log.steps:
        raise InputError(f"{path}: log has no steps")
    return log


def _scenario(path):
    try:
        return load_scenario(path)
    except ScenarioError as exc:
        raise InputError(str(exc)) from exc


def _graph_snapshot(step, ids) -> dict:
    return {"k": step.k, "edges": step.edges, "clusters": step.clusters, "ids": list(ids),
            "positions": [[float(v) for v in step.agents[i].x[:2]] for i in ids]}


def cmd_run(args) -> int:
    scen = _scenario(args.scenario)
    if args.steps is not None:
        if args.steps < 0:
            raise InputError("--steps must be nonnegative")
        scen.steps = args.steps
    if args.seed is not None:
        scen.seed = args.seed
    out = Path(args.out)
    out.mkdir(parents=True, exist_ok=True)
    try:
        log = run(scen)
    except InitialInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    (out / "log.csv").write_text(log.to_csv())
    (out / "log.json").write_text(json.dumps(log.to_json()) + "\n")
    for st in log.steps:
        if st.k % args.graph_every == 0:
            (out / f"graph_{st.k}.json").write_text(json.dumps(_graph_snapshot(st, log.ids), indent=1) + "\n")
    fallbacks = sum(a.fallback for st in log.steps for a in st.agents.values())
    print(f"{len(log.steps) - 1} steps, {len(log.ids)} agents, {fallbacks} fallbacks -> {out}")
    return EXIT_OK


def cmd_check(args) -> int:
    log = _load_log(args.log)
    scen = _scenario(args.scenario)
    if not log.scenario.same_setup(scen):
        raise InputError("log was not produced by this scenario")
    findings = verify_log(log, scen)
    print(json.dumps({"violations": findings}, indent=1))
    return EXIT_VIOLATIONS if findings else EXIT_OK


def cmd_plot(args) -> int:
    from .plotting import graph_strip_svg, trajectories_svg
    log = _load_log(args.log)
    out = Path(args.out) if args.out else Path(args.log).with_name("trajectories.svg")
    strip = out.with_name(out.stem + "_graph.svg")
    trajectories_svg(log, out)
    graph_strip_svg(log, strip, every=args.graph_every)
    print(f"wrote {out} and {strip}")
    return EXIT_OK


def _betas(text):
    try:
        vals = [float(b) for b in text.split(",") if b.strip()]
    except ValueError:
        raise argparse.ArgumentTypeError(f"not a comma separated list of numbers: {text!r}")
    if not vals or any(b < 0 for b in vals):
        raise argparse.ArgumentTypeError("betas must be nonnegative")
    return vals


def cmd_betasweep(args) -> int:
    scen = _scenario(args.scenario)
    try:
        rows = beta_sweep(scen, args.betas)
    except InitialInfeasible as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_INFEASIBLE
    lines = ["beta,offset,reachable_offset,gap"]
    lines += [f"{r.beta!r},{r.offset!r},{r.reachable_offset!r},{r.gap!r}" for r in rows]
    text = "\n".join(lines) + "\n"
    if args.out:
        Path(args.out).write_text(text)
    sys.stdout.write(text)
    return EXIT_OK


def build_parser() -> argparse.ArgumentParser:
    p = argparse.ArgumentParser(prog="swarm-mpc", description=__doc__.splitlines()[0])
    sub = p.add_subparsers(dest="command", required=True)

    r = sub.add_parser("run", help="simulate a scenario")
    r.add_argument("scenario")
    r.add_argument("--steps", type=int)
    r.add_argument("--seed", type=int)
    r.add_argument("--out", default="out")
    r.add_argument("--graph-every", type=int, default=10)
    r.set_defaults(func=cmd_run)

    c = sub.add_parser("check", help="re-verify a log against its scenario")
    c.add_argument("log")
    c.add_argument("scenario")
    c.set_defaults(func=cmd_check)

    g = sub.add_parser("plot", help="render trajectory and graph SVGs")
    g.add_argument("log")
    g.add_argument("--out")
    g.add_argument("--graph-every", type=int, default=10)
    g.set_defaults(func=cmd_plot)

    b = sub.add_parser("betasweep", help="offset gap versus beta (CSV)")
    b.add_argument("scenario")
    b.add_argument("--betas", type=_betas, default=_betas("1,2,4,8,16,32,64,128,256,512,1024"))
    b.add_argument("--out")
    b.set_defaults(func=cmd_betasweep)
    return p


def main(argv=None) -> int:
    if os.environ.get("SWARM_MPC_DEBUG") == "1":
        logging.basicConfig(level=logging.DEBUG, format="%(name)s: %(message)s")
    else:
        logging.basicConfig(level=logging.WARNING, format="%(levelname)s: %(message)s")
    parser = build_parser()
    try:
        args = parser.parse_args(argv)
    except SystemExit as exc:
        return EXIT_PARSE if exc.code else EXIT_OK
    try:
        return args.func(args)
    except InputError as exc:
        print(f"error: {exc}", file=sys.stderr)
        return EXIT_PARSE


if __name__ == "__main__":
    sys.exit(main())
