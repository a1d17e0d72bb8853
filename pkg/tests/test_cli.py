import json
from pathlib import Path

import pytest

from swarm_mpc.cli import EXIT_INFEASIBLE, EXIT_OK, EXIT_PARSE, EXIT_VIOLATIONS, main
from swarm_mpc.plotting import count_elements
from swarm_mpc.scenario_io import shipped_scenario

BLOCKING = Path(__file__).parent / "fixtures" / "blocking.json"


@pytest.fixture(scope="module")
def intersection_run(tmp_path_factory):
    out = tmp_path_factory.mktemp("run")
    assert main(["run", str(shipped_scenario()), "--steps", "12", "--out", str(out)]) == EXIT_OK
    return out


def test_run_writes_outputs(intersection_run):
    out = intersection_run
    assert (out / "log.csv").is_file() and (out / "log.json").is_file()
    assert sorted(p.name for p in out.glob("graph_*.json")) == ["graph_0.json", "graph_10.json"]
    snap = json.loads((out / "graph_0.json").read_text())
    assert snap["k"] == 0 and len(snap["positions"]) == 8


def test_check_own_output_passes(intersection_run, capsys):
    rc = main(["check", str(intersection_run / "log.json"), str(shipped_scenario())])
    assert rc == EXIT_OK
    assert json.loads(capsys.readouterr().out) == {"violations": []}


def test_check_tampered_log_fails(intersection_run, tmp_path, capsys):
    data = json.loads((intersection_run / "log.json").read_text())
    data["steps"][6]["agents"]["0"]["x"][0] += 0.5
    bad = tmp_path / "bad.json"
    bad.write_text(json.dumps(data))
    rc = main(["check", str(bad), str(shipped_scenario())])
    assert rc == EXIT_VIOLATIONS
    found = json.loads(capsys.readouterr().out)["violations"]
    assert any(f["k"] == 6 for f in found)


def test_check_mismatched_scenario(intersection_run):
    assert main(["check", str(intersection_run / "log.json"), str(BLOCKING)]) == EXIT_PARSE


def test_plot_counts(intersection_run):
    svg = intersection_run / "fig.svg"
    assert main(["plot", str(intersection_run / "log.json"), "--out", str(svg)]) == EXIT_OK
    text = svg.read_text()
    assert count_elements(text, "polyline", "") == 8
    assert count_elements(text, "circle", "") == 8
    assert count_elements(text, "polygon", "safe-") == 8
    strip = (intersection_run / "fig_graph.svg").read_text()
    assert count_elements(strip, "g", "panel-") == 2


def test_plot_is_byte_stable(intersection_run, tmp_path):
    a, b = tmp_path / "a.svg", tmp_path / "b.svg"
    main(["plot", str(intersection_run / "log.json"), "--out", str(a)])
    main(["plot", str(intersection_run / "log.json"), "--out", str(b)])
    assert a.read_bytes() == b.read_bytes()


def test_single_agent_plot(tmp_path):
    scen = json.loads(BLOCKING.read_text())
    scen["agents"] = scen["agents"][:1]
    p = tmp_path / "one.json"
    p.write_text(json.dumps(scen))
    assert main(["run", str(p), "--steps", "3", "--out", str(tmp_path)]) == EXIT_OK
    assert main(["plot", str(tmp_path / "log.json")]) == EXIT_OK
    assert count_elements((tmp_path / "trajectories.svg").read_text(), "polyline", "") == 1
    assert count_elements((tmp_path / "trajectories_graph.svg").read_text(), "line", "edge-") == 0


def test_empty_log_rejected(intersection_run, tmp_path):
    data = json.loads((intersection_run / "log.json").read_text())
    data["steps"] = []
    p = tmp_path / "empty.json"
    p.write_text(json.dumps(data))
    assert main(["plot", str(p)]) == EXIT_PARSE


def test_missing_scenario_file(tmp_path, capsys):
    assert main(["run", str(tmp_path / "nope.json"), "--out", str(tmp_path)]) == EXIT_PARSE
    assert "cannot read" in capsys.readouterr().err


def test_zero_steps_initial_row_only(tmp_path):
    assert main(["run", str(BLOCKING), "--steps", "0", "--out", str(tmp_path)]) == EXIT_OK
    rows = (tmp_path / "log.csv").read_text().splitlines()
    assert len(rows) == 1 + 2 and all(r.startswith(("k,", "0,")) for r in rows)


def test_negative_steps_rejected(tmp_path):
    assert main(["run", str(BLOCKING), "--steps", "-1", "--out", str(tmp_path)]) == EXIT_PARSE


def test_bad_arguments_exit_parse():
    assert main(["run"]) == EXIT_PARSE
    assert main(["betasweep", str(BLOCKING), "--betas", "a,b"]) == EXIT_PARSE


def test_infeasible_start_exit_code(tmp_path):
    prm = {"T_s": 0.2, "a_max": 0.2, "v_max": 1.0}
    scen = {"agents": [
        {"id": 0, "model": "double_integrator", "x0": [0, 0, 1, 0], "ref": [0, 0, 0, 0],
         "comm_radius": 3.0, "sigma": 0.25, "params": prm},
        {"id": 1, "model": "double_integrator", "x0": [0.65, 0, 0, 0], "ref": [0.65, 0, 0, 0],
         "comm_radius": 3.0, "sigma": 0.25, "params": prm}],
        "ocp": {"N": 6}, "sim": {"steps": 3}}
    p = tmp_path / "inf.json"
    p.write_text(json.dumps(scen))
    assert main(["run", str(p), "--out", str(tmp_path)]) == EXIT_INFEASIBLE


def test_betasweep_csv(tmp_path, capsys):
    out = tmp_path / "beta.csv"
    assert main(["betasweep", str(BLOCKING), "--betas", "1,4", "--out", str(out)]) == EXIT_OK
    lines = out.read_text().splitlines()
    assert lines[0] == "beta,offset,reachable_offset,gap"
    assert [float(r.split(",")[0]) for r in lines[1:]] == [1.0, 4.0]
    assert capsys.readouterr().out == out.read_text()
