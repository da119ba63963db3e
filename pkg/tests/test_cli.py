import csv
import json

import numpy as np
import pytest

from confopt.cli import main
from confopt.config import DEFAULT_T, parse_config
from confopt.data import SyntheticSpec, exact_eta
from confopt.bruteforce import monte_carlo_sample


def write_config(path, cfg):
    path.write_text(json.dumps(cfg), encoding="utf-8")
    return str(path)


def small_run(**overrides):
    cfg = {
        "data": {"synthetic": {"kind": "NormImbal"}, "n_samples": 400, "test_samples": 2000},
        "metric": {"kind": "HMean"},
        "solver": {"name": "fw", "T": 30},
        "cpe": {"iterations": 200},
        "seed": 11,
    }
    cfg.update(overrides)
    return cfg


# configuration


def test_golden_defaults():
    cfg = parse_config({"data": {"synthetic": {"kind": "NormBal"}}, "metric": {"kind": "HMean"},
                        "solver": {"name": "fw"}})
    assert DEFAULT_T == {"fw": 5000, "gda": 5000, "ellipsoid": 1000, "bisection": 20, "split_fw": 10000,
                         "con_gda": 10000, "con_ellipsoid": 1000, "con_bisection": 10}
    s = cfg.solver
    assert s.budget == 5000
    assert s.a == 1000 and s.zeta == 10 and s.r == 0.05
    assert s.eta_schedule == [0.5, 0.1, 0.001]
    assert s.step_grid == [0.001, 0.01, 0.1] and s.tune_steps
    assert not s.line_search
    assert cfg.lmo.kind == "plugin" and cfg.n_trials == 1


def test_validate_config_prints_defaults(tmp_path, capsys):
    path = write_config(tmp_path / "c.json", small_run())
    assert main(["validate-config", "--config", path]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["solver"]["a"] == 1000.0 and out["cpe"]["l2"] == 1e-4


@pytest.mark.parametrize("cfg,field", [
    ({"data": {"synthetic": {"kind": "Nope"}}, "metric": {"kind": "HMean"}, "solver": {"name": "fw"}},
     "data.synthetic.kind"),
    ({"data": {"synthetic": {"kind": "NormBal"}}, "metric": {"kind": "HMean"}, "solver": {"name": "fw", "T": 0}},
     "solver.T"),
    ({"data": {"synthetic": {"kind": "NormBal"}}, "metric": {"kind": "HMean"}, "solver": {"name": "bisection"}},
     "solver.name"),
    ({"data": {"synthetic": {"kind": "NormBal"}}, "metric": {"kind": "HMean"}, "solver": {"name": "fw"},
      "extra": 1}, "extra"),
])
def test_config_errors_exit_2_with_field_path(tmp_path, capsys, cfg, field):
    path = write_config(tmp_path / "c.json", cfg)
    assert main(["validate-config", "--config", path]) == 2
    assert field in capsys.readouterr().err


def test_allow_mismatch_escape_hatch(tmp_path):
    cfg = small_run(metric={"kind": "MinMax"})
    path = write_config(tmp_path / "c.json", cfg)
    assert main(["validate-config", "--config", path]) == 2
    assert main(["validate-config", "--config", path, "--allow-mismatch"]) == 0


def test_missing_config_file_exits_2(tmp_path):
    assert main(["validate-config", "--config", str(tmp_path / "absent.json")]) == 2


def test_degenerate_denominator_exits_3(tmp_path, capsys):
    cfg = small_run(metric={"kind": "RatioOfLinear", "numerator": [1, 0, 0, 0], "denominator": [0, 0, 0, 0]},
                    solver={"name": "bisection", "T": 2})
    path = write_config(tmp_path / "c.json", cfg)
    assert main(["run", "--config", path]) == 3
    assert "numerical failure" in capsys.readouterr().err


# run


def test_run_writes_trace_with_t_rows(tmp_path):
    path = write_config(tmp_path / "c.json", small_run())
    assert main(["run", "--config", path, "--out", str(tmp_path / "out")]) == 0
    with open(tmp_path / "out" / "trace_trial0.csv", newline="") as fh:
        rows = list(csv.reader(fh))
    assert rows[0] == ["iter", "lmo_calls", "objective", "max_violation", "dual_norm", "log_volume"]
    assert len(rows) - 1 == 30
    summary = json.loads((tmp_path / "out" / "summary.json").read_text())
    assert summary["config"]["seed"] == 11 and summary["trials"][0]["seed"] == 11


def test_identical_runs_give_identical_summaries(tmp_path):
    path = write_config(tmp_path / "c.json", small_run(solver={"name": "gda", "T": 40, "tune_steps": False}))
    for k in (1, 2):
        assert main(["run", "--config", path, "--out", str(tmp_path / f"out{k}"), "--trials", "2"]) == 0
    a = (tmp_path / "out1" / "summary.json").read_bytes()
    b = (tmp_path / "out2" / "summary.json").read_bytes()
    assert a == b


def test_parallel_trials_match_serial(tmp_path, monkeypatch):
    path = write_config(tmp_path / "c.json", small_run())
    main(["run", "--config", path, "--out", str(tmp_path / "serial"), "--trials", "3"])
    monkeypatch.setenv("CONFOPT_THREADS", "3")
    main(["run", "--config", path, "--out", str(tmp_path / "parallel"), "--trials", "3"])
    assert (tmp_path / "serial" / "summary.json").read_bytes() == (tmp_path / "parallel" / "summary.json").read_bytes()


def test_seed_override_and_sample_std(tmp_path):
    path = write_config(tmp_path / "c.json", small_run())
    assert main(["run", "--config", path, "--out", str(tmp_path / "o"), "--trials", "3", "--seed", "5"]) == 0
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    vals = [t["test_objective"] for t in summary["trials"]]
    assert [t["seed"] for t in summary["trials"]] == [5, 6, 7]
    assert summary["aggregate"]["test_objective"]["std"] == pytest.approx(np.std(vals, ddof=1))


def test_eval_reproduces_recorded_test_objective(tmp_path, capsys):
    path = write_config(tmp_path / "c.json", small_run())
    main(["run", "--config", path, "--out", str(tmp_path / "o")])
    summary = json.loads((tmp_path / "o" / "summary.json").read_text())
    capsys.readouterr()
    assert main(["eval", "--config", path, "--classifier", str(tmp_path / "o" / "classifier_trial0.json")]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["test"]["objective"] == pytest.approx(summary["trials"][0]["test_objective"], abs=1e-12)


def test_zero_one_fw_with_exact_eta_matches_grid(tmp_path, capsys):
    common = {"data": {"synthetic": {"kind": "ThreeClass1D"}, "n_samples": 20000, "test_samples": 200000},
              "metric": {"kind": "ZeroOne"}, "lmo": {"kind": "exact_eta"},
              "oracle": {"step": 0.1, "w_max": 2.0, "n_samples": 200000, "seed": 3}}
    path = write_config(tmp_path / "c.json", {**common, "solver": {"name": "fw", "T": 20}})
    assert main(["run", "--config", path, "--out", str(tmp_path / "run")]) == 0
    assert main(["oracle", "--config", path, "--out", str(tmp_path / "oracle")]) == 0
    run = json.loads((tmp_path / "run" / "summary.json").read_text())
    oracle = json.loads((tmp_path / "oracle" / "oracle.json").read_text())
    assert run["trials"][0]["test_objective"] == pytest.approx(oracle["value"], abs=0.01)


# oracle


def oracle_value(tmp_path, capsys, step, name="HMean"):
    cfg = {"data": {"synthetic": {"kind": "NormImbal"}}, "metric": {"kind": name}, "solver": {"name": "fw"},
           "oracle": {"step": step, "w_max": 10.0, "n_samples": 200000, "seed": 1}}
    path = write_config(tmp_path / f"o{step}.json", cfg)
    assert main(["oracle", "--config", path]) == 0
    return json.loads(capsys.readouterr().out)["value"]


def test_oracle_refinement_is_nonincreasing(tmp_path, capsys):
    values = [oracle_value(tmp_path, capsys, s) for s in (0.1, 0.05, 0.02)]
    assert values[1] <= values[0] + 1e-15 and values[2] <= values[1] + 1e-15


def test_oracle_zero_one_equals_argmax_risk(tmp_path, capsys):
    value = oracle_value(tmp_path, capsys, 0.02, "ZeroOne")
    spec = SyntheticSpec("NormImbal")
    sample = monte_carlo_sample(spec, 200000, seed=99)
    eta, _ = exact_eta(spec, sample.features)
    risk = 1 - eta.max(axis=1).mean()
    assert value == pytest.approx(risk, abs=5e-3)


def test_oracle_rerun_gives_identical_file(tmp_path):
    cfg = {"data": {"synthetic": {"kind": "NormBal"}}, "metric": {"kind": "QMean"}, "solver": {"name": "fw"},
           "oracle": {"step": 0.05, "n_samples": 50000}}
    path = write_config(tmp_path / "c.json", cfg)
    main(["oracle", "--config", path, "--out", str(tmp_path / "a")])
    main(["oracle", "--config", path, "--out", str(tmp_path / "b")])
    assert (tmp_path / "a" / "oracle.json").read_bytes() == (tmp_path / "b" / "oracle.json").read_bytes()


def test_oracle_needs_synthetic_data(tmp_path):
    data = tmp_path / "d.csv"
    data.write_text("f0,label\n0.1,0\n0.2,1\n0.3,0\n", encoding="utf-8")
    cfg = {"data": {"csv": str(data)}, "metric": {"kind": "QMean"}, "solver": {"name": "fw"}}
    assert main(["oracle", "--config", write_config(tmp_path / "c.json", cfg)]) == 2


def test_oracle_rejects_four_classes(tmp_path):
    cfg = {"data": {"synthetic": {"kind": "Custom", "priors": [0.25] * 4, "components": [
        {"type": "normal", "mean": [float(k)], "cov": [[1.0]]} for k in range(4)]}},
           "metric": {"kind": "QMean"}, "solver": {"name": "fw"}, "oracle": {"n_samples": 1000}}
    assert main(["oracle", "--config", write_config(tmp_path / "c.json", cfg)]) == 1
