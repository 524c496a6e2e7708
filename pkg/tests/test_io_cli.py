import json

import numpy as np
import pytest

from conftest import make_dataset
from lago import io as lio
from lago.cli import main
from lago.errors import EmptyDataset, ParseError, SchemaError
from lago.model import fit
from lago.scenarios import get_scenario
from lago.simulation import simulate_trial

PROBLEM = """\
cost.kind = "linear"
cost.coefficients = [1.0, 0.5]
goal = -5.0
direction = "at_most"
bounds = [[0, 4], [0, 3]]
grid_resolution = 0.1
"""


def test_csv_round_trip_is_exact(tmp_path):
    data = make_dataset([-1.7, -0.7], [1.0, 2.0, 3.0], [0.5], noise=1.0, seed=1)
    path = lio.write_dataset(data, tmp_path / "d.csv")
    again = lio.read_dataset(path)
    np.testing.assert_array_equal(again.actual, data.actual)
    np.testing.assert_array_equal(again.outcome, data.outcome)
    np.testing.assert_array_equal(fit(again).coef, fit(data).coef)


def test_parse_error_reports_line():
    with pytest.raises(ParseError) as info:
        lio.parse_dataset("stage,centre,arm,a1,y\n1,1,1,0.5,2\n1,1,1,abc,2\n")
    assert info.value.line == 3
    with pytest.raises(ParseError) as info:
        lio.parse_dataset("stage,centre,arm,a1,y\n1,1,1,0.5\n")
    assert info.value.line == 2
    with pytest.raises(ParseError) as info:
        lio.parse_dataset("stage,centre,treated,a1,y\n")
    assert info.value.line == 1


def test_schema_errors_are_all_listed():
    text = "stage,centre,arm,a1,a2,y\n1,1,0,1.0,0,3\n0,1,1,1,1,2\n1,4,2,0,0,1\n"
    with pytest.raises(SchemaError) as info:
        lio.parse_dataset(text)
    problems = info.value.problems
    assert any("control row" in p and "line 2" in p for p in problems)
    assert any("stage must be" in p and "line 3" in p for p in problems)
    assert any("arm must be" in p and "line 4" in p for p in problems)
    assert any("not contiguous" in p for p in problems)


def test_header_only_is_empty():
    with pytest.raises(EmptyDataset):
        lio.parse_dataset("stage,centre,arm,a1,y\n")


def test_json_uses_seventeen_digits():
    text = lio.dumps_json({"x": 0.1, "n": 3, "bad": float("nan"), "v": np.array([1.0, 2.5])})
    assert '"x": 0.10000000000000001' in text
    assert '"bad": null' in text
    parsed = json.loads(text)
    assert parsed["x"] == 0.1 and parsed["v"] == [1.0, 2.5] and parsed["n"] == 3


def test_toy_fit_has_three_coefficients(tmp_path, capsys):
    csv = tmp_path / "toy.csv"
    csv.write_text("stage,centre,arm,a1,y\n1,1,1,1,3\n1,1,0,0,1\n1,2,1,2,5\n")
    assert main(["fit", "--data", str(csv), "--out", str(tmp_path / "out")]) == 0
    report = json.loads((tmp_path / "out" / "report.json").read_text())
    assert len(report["beta"]) == 3
    assert "robust SE" in capsys.readouterr().out


def test_control_with_intervention_values_is_rejected(tmp_path, capsys):
    csv = tmp_path / "bad.csv"
    csv.write_text("stage,centre,arm,a1,y\n1,1,0,2,1\n1,1,1,1,1\n")
    assert main(["fit", "--data", str(csv)]) == 2
    assert "control row" in capsys.readouterr().err


def test_three_centre_fit_report(tmp_path):
    data = make_dataset([-1.59, -0.59], [-2.63, 0.58, 2.11], [0.2], noise=5.0, seed=4)
    csv = lio.write_dataset(data, tmp_path / "d.csv")
    cfg = tmp_path / "c.toml"
    cfg.write_text(PROBLEM)
    out = tmp_path / "out"
    assert main(["fit", "--data", str(csv), "--config", str(cfg), "--out", str(out)]) == 0
    report = json.loads((out / "report.json").read_text())
    assert len(report["gamma"]) == 3
    assert "intercept" not in " ".join(report["columns"])
    assert set(report["tests"]) == {"individual", "joint", "delta"}
    assert (out / report["set_mask_file"]).exists() and (out / report["band_file"]).exists()
    header = (out / "confidence_band.csv").read_text().splitlines()[0]
    assert header == "x1,x2,estimate,lower,upper"


def test_simulated_data_refit_matches_pipeline(tmp_path):
    cfg = get_scenario("table1_J6")
    data = simulate_trial(cfg, 0)
    csv = lio.write_dataset(data, tmp_path / "d.csv")
    assert main(["fit", "--data", str(csv), "--out", str(tmp_path / "o")]) == 0
    report = json.loads((tmp_path / "o" / "report.json").read_text())
    np.testing.assert_array_equal(np.array(report["beta"]), fit(data).coef)


def test_simulate_is_byte_deterministic(tmp_path):
    args = ["simulate", "--scenario", "table1_J6", "--replicates", "1", "--seed", "3"]
    assert main(args + ["--out", str(tmp_path / "a")]) == 0
    assert main(args + ["--out", str(tmp_path / "b")]) == 0
    files = sorted(p.name for p in (tmp_path / "a").iterdir())
    assert files == ["replicates.csv", "report.json"]
    for name in files:
        assert (tmp_path / "a" / name).read_bytes() == (tmp_path / "b" / name).read_bytes()


def test_simulate_rejects_bad_rho(tmp_path, capsys):
    cfg = tmp_path / "s.toml"
    cfg.write_text(
        'J = 3\nn_by_centre_stage = [10, 10]\nbeta_true = [-1.0]\nrho_targets = [1.2]\n'
        'x_stage1 = [1.0]\nbounds = [[0, 3]]\ngoal = -1.0\ndirection = "at_most"\n'
        'cost.kind = "linear"\ncost.coefficients = [1.0]\n'
    )
    assert main(["simulate", "--scenario", str(cfg), "--out", str(tmp_path / "o")]) == 2
    assert "rho_targets" in capsys.readouterr().err


def test_simulate_failed_replicates_give_nonzero_exit(tmp_path):
    cfg = tmp_path / "s.toml"
    cfg.write_text(
        'J = 2\nn_by_centre_stage = [10, 10]\nbeta_true = [-1.0]\nxi_sd = 0.0\n'
        'x_stage1 = [0.0]\nbounds = [[0, 3]]\ngoal = -1.0\ndirection = "at_most"\nuse_lago = false\n'
        'replicates = 2\ncost.kind = "linear"\ncost.coefficients = [1.0]\n'
    )
    assert main(["simulate", "--scenario", str(cfg), "--out", str(tmp_path / "o")]) == 3


def test_optimize_and_recommend(tmp_path, capsys):
    cfg = tmp_path / "p.toml"
    cfg.write_text(PROBLEM + "model.beta_A = [-1.70, -0.70]\n")
    assert main(["optimize", "--config", str(cfg)]) == 0
    out = json.loads(capsys.readouterr().out)
    np.testing.assert_allclose(out["x"], [5 / 1.7, 0.0], atol=1e-12)

    data = make_dataset([-1.70, -0.70], [0.0, 0.0], [0.0])
    csv = lio.write_dataset(data, tmp_path / "d.csv")
    fit_cfg = tmp_path / "f.toml"
    fit_cfg.write_text(PROBLEM + 'lower_bound_policy = "previous_recommendation"\n')
    assert main(["fit", "--data", str(csv), "--config", str(fit_cfg), "--out", str(tmp_path / "o")]) == 0
    prev = tmp_path / "prev.json"
    prev.write_text('{"x": [2.0, 1.5]}')
    capsys.readouterr()
    assert main(["recommend", "--fit", str(tmp_path / "o" / "report.json"), "--previous", str(prev),
                 "--config", str(fit_cfg)]) == 0
    rec = json.loads(capsys.readouterr().out)
    np.testing.assert_allclose(rec["x"], [(5 - 1.05) / 1.7, 1.5], atol=1e-8)


def test_optimize_unreachable_goal_is_numerical_failure(tmp_path):
    cfg = tmp_path / "p.toml"
    cfg.write_text(PROBLEM.replace("-5.0", "-50.0") + "model.beta_A = [-1.70, -0.70]\n")
    assert main(["optimize", "--config", str(cfg)]) == 3


def test_rank_deficient_fit_exit_code(tmp_path):
    csv = tmp_path / "z.csv"
    csv.write_text("stage,centre,arm,a1,y\n1,1,0,0,7\n2,1,0,0,7\n1,2,0,0,7\n2,2,0,0,7\n")
    assert main(["fit", "--data", str(csv)]) == 3


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "p.toml"
    cfg.write_text(PROBLEM + "colour = 1\n")
    csv = tmp_path / "d.csv"
    lio.write_dataset(make_dataset([1.0], [0.0, 1.0], [0.0]), csv)
    assert main(["fit", "--data", str(csv), "--config", str(cfg)]) == 2
    assert "colour" in capsys.readouterr().err


def test_reproduce_prints_comparison(capsys):
    assert main(["reproduce", "--table", "table6", "--replicates", "20"]) == 0
    out = capsys.readouterr().out
    assert "ExpectedOutActInt" in out and "checks pass" in out


def test_reproduce_unknown_table():
    with pytest.raises(SystemExit) as info:
        main(["reproduce", "--table", "table9"])
    assert info.value.code == 2
