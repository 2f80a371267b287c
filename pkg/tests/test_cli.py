import json

import numpy as np
import pytest

from chemostab import cli

LUMPED = {
    "model": "lumped",
    "growth": {"type": "haldane", "M": "7/2", "K": 1, "a": 1},
    "parameters": {"S_in": "16/3", "D_star": "9/10", "b": "1/10"},
    "feedback": {"delta": 10, "alpha": 0.5},
    "run": {"t_final": 60, "initial_conditions": [[1, 1], [2, 4]],
            "grid": {"n_X": 3, "n_S": 3}},
}


def write(tmp_path, doc, name="s.json"):
    p = tmp_path / name
    p.write_text(json.dumps(doc))
    return p


def run(tmp_path, *args):
    return cli.main([*args, "--out", str(tmp_path / "out")])


def read_json(tmp_path, name):
    return json.loads((tmp_path / "out" / name).read_text())


def test_equilibria_lumped(tmp_path, capsys):
    assert run(tmp_path, "equilibria", "--config", str(write(tmp_path, LUMPED))) == 0
    rep = read_json(tmp_path, "equilibria.json")
    verdicts = {round(e["S_star"], 9): e["verdict"] for e in rep["equilibria"]}
    assert verdicts == {0.5: "Stable", 2.0: "Unstable"}
    assert json.loads(capsys.readouterr().out) == rep


def test_equilibria_age(tmp_path, scenario):
    assert cli.main(["repro", "example2", "--out", str(tmp_path / "out")]) == 0
    rep = read_json(tmp_path, "example2_equilibria.json")
    by_S = {round(e["S_star"], 9): e for e in rep["equilibria"]}
    assert by_S[2.0]["verdict"] == "Unstable"
    assert by_S[2.0]["stability"]["jacobian_eig_signs"] == [1, 2, 0]
    assert by_S[0.5]["stability"]["jacobian_eig_signs"] == [0, 3, 0]
    assert any("reference polynomial" in n for n in by_S[2.0]["stability"]["notes"])
    chk = read_json(tmp_path, "example2_check.json")
    assert chk["assumption_C"]["holds"] and chk["assumption_C"]["phi"] == 1.1
    assert chk["audit"]["n_violations"] == 0
    basin = read_json(tmp_path, "example2_repro.json")["basin_closed"]["counts"]
    assert basin["target"] == 24


def test_washout_only_config(tmp_path):
    doc = dict(LUMPED, parameters={"S_in": "16/3", "D_star": 2, "b": "1/10"})
    assert run(tmp_path, "equilibria", "--config", str(write(tmp_path, doc))) == 0
    assert read_json(tmp_path, "equilibria.json")["message"] == "no interior equilibrium"


def test_check_certifies_example(tmp_path):
    assert run(tmp_path, "check", "--config", str(write(tmp_path, LUMPED))) == 0
    rep = read_json(tmp_path, "check.json")
    assert rep["status"] == "certified"
    assert rep["assumption_A"]["margin"] == pytest.approx(168 / 313 - 0.1, rel=1e-10)
    assert rep["constants"]["R"] > rep["constants"]["R_lower_bound"]


def test_check_refuses_and_explains(tmp_path, capsys):
    assert cli.main(["repro", "theorem2", "--out", str(tmp_path / "out")]) == 0
    capsys.readouterr()
    path = cli.C.scenario_path("theorem2")
    assert run(tmp_path, "check", "--config", str(path)) == cli.EXIT_REFUSED
    rep = read_json(tmp_path, "theorem2_check.json")
    assert json.loads(capsys.readouterr().out) == rep
    assert rep["status"] == "refused"
    sc = rep["divergence_scenario"]
    assert sc["available"] and sc["theta"] == pytest.approx(0.8 - 49 / 67, rel=1e-12)
    div = read_json(tmp_path, "theorem2_repro.json")["divergence"]
    assert div["constant"]["bound_holds"] and div["feedback"]["bound_holds"]
    header, rows = cli.read_csv(tmp_path / "out" / "theorem2_divergence_constant.csv")
    assert header == ["t", "x1", "x2", "X", "x1_bound"]
    assert all(r[1] <= r[4] for r in rows)


def test_simulate_writes_trajectories(tmp_path):
    doc = dict(LUMPED, run=dict(LUMPED["run"], deltas=[1, 100]))
    assert run(tmp_path, "simulate", "--config", str(write(tmp_path, doc))) == 0
    rep = read_json(tmp_path, "simulate.json")
    runs = {r["id"]: r for r in rep["runs"]}
    assert set(runs) == {"d1_0", "d1_1", "d100_0", "d100_1"}
    assert runs["d100_0"]["S_settle_time"] < runs["d1_0"]["S_settle_time"]
    header, rows = cli.read_csv(tmp_path / "out" / "traj_d1_0.csv")
    assert header == ["t", "X", "S", "D"]
    assert rows[0][:3] == [0.0, 1.0, 1.0]
    assert all(r[3] > 0 for r in rows)


def test_simulate_from_equilibrium_is_constant(tmp_path):
    doc = dict(LUMPED, run={"t_final": 20, "initial_conditions": [[3, 2]]})
    assert run(tmp_path, "simulate", "--config", str(write(tmp_path, doc))) == 0
    _, rows = cli.read_csv(tmp_path / "out" / "traj_0.csv")
    arr = np.array(rows)
    assert np.allclose(arr[:, 1:], [3.0, 2.0, 0.9], atol=1e-8)


def test_simulate_open_loop(tmp_path):
    doc = dict(LUMPED, run={"t_final": 20, "mode": "open", "D": 0.5, "initial_conditions": [[1, 1]]})
    assert run(tmp_path, "simulate", "--config", str(write(tmp_path, doc))) == 0
    _, rows = cli.read_csv(tmp_path / "out" / "traj_0.csv")
    assert {r[3] for r in rows} == {0.5}


def test_portrait_and_basin(tmp_path):
    p = str(write(tmp_path, LUMPED))
    assert run(tmp_path, "portrait", "--config", p) == 0
    header, rows = cli.read_csv(tmp_path / "out" / "portrait.csv")
    assert header == ["id", "t", "X", "S"]
    assert len({r[0] for r in rows}) == 9
    assert run(tmp_path, "basin", "--config", p) == 0
    header, rows = cli.read_csv(tmp_path / "out" / "basin.csv")
    assert header == ["X0", "S0", "label"]
    assert {r[2] for r in rows} == {"target"}


def test_pde_compare_small(tmp_path):
    doc = {
        "model": "age_pde",
        "growth": {"type": "haldane", "M": "7/2", "K": 1, "a": 1},
        "parameters": {"S_in": "16/3", "D_star": "9/10", "b": "1/10", "p0": 0.8, "q0": 1, "gamma": 0.2,
                       "beta": {"type": "constant"}},
        "feedback": {"delta": 1, "alpha": 0.5},
        "pde": {"t_final": 5, "refinements": [128, 256]},
    }
    assert run(tmp_path, "pde-compare", "--config", str(write(tmp_path, doc))) == 0
    rep = read_json(tmp_path, "pde_compare.json")
    assert [r["n_cells"] for r in rep["table"]] == [128, 256]
    assert 1.6 <= rep["table"][1]["ratio"] <= 2.4
    header, rows = cli.read_csv(tmp_path / "out" / "pde_refinement.csv")
    assert rows[0][4] == ""
    doc["run"] = {"t_final": 5}
    assert run(tmp_path, "simulate", "--config", str(write(tmp_path, doc))) == 0
    assert read_json(tmp_path, "simulate.json")["boundary_ratio"] < 1e-6


def test_pde_compare_rejects_lumped(tmp_path):
    assert run(tmp_path, "pde-compare", "--config", str(write(tmp_path, LUMPED))) == cli.EXIT_CONFIG


@pytest.mark.parametrize("doc", [
    {"model": "lumped"},
    dict(LUMPED, extra_key=1),
    dict(LUMPED, run={"t_final": 10, "initial_conditions": [[1, 9]]}),
])
def test_config_errors_exit_2(tmp_path, doc, capsys):
    assert run(tmp_path, "simulate", "--config", str(write(tmp_path, doc))) == cli.EXIT_CONFIG
    assert "config error" in capsys.readouterr().err


def test_missing_file_exit_2(tmp_path):
    assert run(tmp_path, "check", "--config", str(tmp_path / "nope.json")) == cli.EXIT_CONFIG


def test_kernel_rejection_exit_3(tmp_path, capsys):
    doc = {
        "model": "age_pde",
        "growth": {"type": "haldane", "M": "7/2", "K": 1, "a": 1},
        "parameters": {"S_in": "16/3", "D_star": "9/10", "b": "1/10", "p0": 0.8, "q0": 1, "gamma": 0.2,
                       "beta": {"type": "constant", "value": 0.5}},
        "pde": {"t_final": 5, "refinements": [64]},
    }
    assert run(tmp_path, "pde-compare", "--config", str(write(tmp_path, doc))) == cli.EXIT_NUMERIC
    assert "beta(a) <= b fails" in capsys.readouterr().err


def test_age_refusal_exit_4(tmp_path):
    doc = {
        "model": "age",
        "growth": {"type": "haldane", "M": "7/2", "K": 1, "a": 1},
        "parameters": {"S_in": "16/3", "D_star": "1/5", "b": "4/5", "p0": 1, "q0": 1, "gamma": 0},
    }
    assert run(tmp_path, "check", "--config", str(write(tmp_path, doc))) == cli.EXIT_REFUSED
    assert read_json(tmp_path, "check.json")["assumption_C"]["holds"] is False


def test_csv_round_trip(tmp_path):
    vals = [0.1, 1 / 3, 2.0 ** -40, 123456789.123456789, -np.pi]
    cli.write_csv(tmp_path / "x.csv", ["a", "b"], [[v, "tag"] for v in vals])
    header, rows = cli.read_csv(tmp_path / "x.csv")
    assert header == ["a", "b"]
    assert [r[0] for r in rows] == vals


def test_outputs_are_byte_identical(tmp_path):
    p = str(write(tmp_path, dict(LUMPED, run=dict(LUMPED["run"], random={"n": 5}))))
    for sub in ("a", "b"):
        assert cli.main(["basin", "--config", p, "--out", str(tmp_path / sub), "--seed", "7"]) == 0
        assert cli.main(["check", "--config", p, "--out", str(tmp_path / sub), "--seed", "7"]) == 0
    for name in ("basin.csv", "basin.json", "check.json"):
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_repro_example1(tmp_path):
    assert cli.main(["repro", "example1", "--out", str(tmp_path), "--threads", "2"]) == 0
    bundle = json.loads((tmp_path / "example1_repro.json").read_text())
    assert bundle["check"]["status"] == "certified"
    assert bundle["basin_closed"]["counts"]["target"] == 64
    assert bundle["basin_open"]["counts"]["target"] == 0
    runs = {r["id"]: r for r in bundle["simulate"]["runs"]}
    assert runs["d100_0"]["S_settle_time"] < runs["d1_0"]["S_settle_time"]
    assert runs["d1_0"]["final_state"] == pytest.approx([3.0, 2.0], abs=1e-6)
