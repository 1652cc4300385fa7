import json
import subprocess
import sys

import numpy as np
import pytest

from qretrodict import qlinalg as ql
from qretrodict.cli import fixture_path, load_config, main, parse_config
from qretrodict.errors import ConfigError
from qretrodict.io import (matrix_from_json, matrix_to_json, read_record, spec_from_dict,
                           spec_to_dict, write_record)
from qretrodict.trajectory import MeasurementRecord, simulate


def minimal_experiment(**over):
    exp = {
        "hamiltonian": [[0, 0], [0, 0]],
        "couplings": [[[[0, 0], [1, 0]], [[0, 0], [0, 0]]]],
        "efficiencies": [1.0],
        "T": 0.2,
        "dt": 0.001,
        "initial_state": [[0.5, 0.5], [0.5, 0.5]],
        "seed": 7,
    }
    exp.update(over)
    return exp


def probe(tau, coupling=None):
    return {"tau": tau, "probe_state": [[1, 0], [0, 0]],
            "coupling": coupling if coupling is not None else ql.CNOT.real.tolist(),
            "outcomes": {"0": [[1, 0], [0, 0]], "1": [[0, 0], [0, 1]]}}


def write_config(tmp_path, cfg, name="cfg.json"):
    p = tmp_path / name
    p.write_text(json.dumps(cfg))
    return p


def test_matrix_json_round_trip():
    rng = np.random.default_rng(0)
    a = ql.random_operator(3, rng)
    np.testing.assert_array_equal(matrix_from_json(json.loads(json.dumps(matrix_to_json(a)))), a)
    np.testing.assert_array_equal(matrix_from_json([[1, 2], [3, 4]]), [[1, 2], [3, 4]])
    with pytest.raises(ConfigError):
        matrix_from_json([1, 2, 3], "x")
    with pytest.raises(ConfigError):
        matrix_from_json("nope", "x")


def test_spec_dict_round_trip():
    spec = spec_from_dict(minimal_experiment(interventions=[probe(0.1)]))
    again = spec_from_dict(json.loads(json.dumps(spec_to_dict(spec))))
    assert spec_to_dict(again) == spec_to_dict(spec)


def test_record_csv_round_trip_is_bit_exact(tmp_path):
    spec = spec_from_dict(minimal_experiment(interventions=[probe(0.1)]))
    tr = simulate(spec)
    path = tmp_path / "rec.csv"
    write_record(path, tr.record, tr.hidden_outcomes)
    back = read_record(path)
    np.testing.assert_array_equal(back.increments, tr.record.increments)
    assert back.dt == tr.record.dt
    assert back.intervention_log == tr.record.intervention_log
    assert path.read_text().splitlines()[0] == "t,dY_1"


def test_record_without_sidecar_infers_dt(tmp_path):
    path = tmp_path / "bare.csv"
    path.write_text("t,dY_1,dY_2\n0,0.1,0.2\n0.5,0.3,0.4\n1,0.5,0.6\n")
    rec = read_record(path)
    assert rec.dt == pytest.approx(0.5)
    assert rec.increments.shape == (2, 3)
    (tmp_path / "bad.csv").write_text("x,y\n1,2\n")
    with pytest.raises(ConfigError):
        read_record(tmp_path / "bad.csv")


def test_minimal_config_is_valid(tmp_path):
    cfg = load_config(write_config(tmp_path, {"command": "simulate",
                                              "experiment": minimal_experiment()}))
    assert cfg.command == "simulate"
    assert cfg.experiment.model.n_channels == 1
    assert cfg.warnings == []


def test_negative_efficiency_names_field(tmp_path):
    p = write_config(tmp_path, {"command": "simulate",
                                "experiment": minimal_experiment(efficiencies=[-0.1])})
    with pytest.raises(ConfigError) as err:
        load_config(p)
    assert "efficiencies[0]" in str(err.value)
    assert [v.field for v in err.value.violations] == ["experiment.efficiencies[0]"]
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(p), "--out", str(out)]) == 2
    report = json.loads((out / "error.json").read_text())
    assert report["error"] == "ConfigError"
    assert report["violations"][0]["field"] == "experiment.efficiencies[0]"


def test_parse_error_reports_line(tmp_path):
    p = tmp_path / "broken.json"
    p.write_text('{\n  "command": "simulate",\n  "experiment": {,}\n}\n')
    with pytest.raises(ConfigError) as err:
        load_config(p)
    assert "line 3" in str(err.value)


def test_off_grid_tau_warns_and_echoes_snapped_value(tmp_path, caplog):
    p = write_config(tmp_path, {"command": "simulate",
                                "experiment": minimal_experiment(interventions=[probe(0.10004)])})
    cfg = load_config(p)
    assert cfg.snapped == [{"index": 0, "requested_tau": 0.10004, "snapped_tau": 0.1}]
    assert cfg.warnings and "snapped" in cfg.warnings[0]
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(p), "--out", str(out)]) == 0
    meta = json.loads((out / "metadata.json").read_text())
    assert meta["snapped_taus"][0]["snapped_tau"] == pytest.approx(0.1)
    side = json.loads((out / "record.outcomes.json").read_text())
    assert side["outcomes"][0]["tau"] == pytest.approx(0.1)


def test_echoed_config_reparses_identically(tmp_path):
    p = write_config(tmp_path, {"command": "simulate", "ensemble": 2, "sample_every": 5,
                                "observables": {"sz": [[1, 0], [0, -1]]},
                                "experiment": minimal_experiment(interventions=[probe(0.1)])})
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(p), "--out", str(out)]) == 0
    echoed = json.loads((out / "metadata.json").read_text())["config"]
    again = parse_config(echoed)
    assert again.to_dict() == echoed
    assert again == parse_config(json.loads(json.dumps(again.to_dict())))
    assert again.experiment.interventions[0].tau == load_config(p).experiment.interventions[0].tau


def test_simulate_is_deterministic_and_seed_override(tmp_path):
    p = write_config(tmp_path, {"command": "simulate", "experiment": minimal_experiment()})
    a, b, c = tmp_path / "a", tmp_path / "b", tmp_path / "c"
    assert main(["simulate", "--config", str(p), "--out", str(a)]) == 0
    assert main(["simulate", "--config", str(p), "--out", str(b)]) == 0
    assert main(["simulate", "--config", str(p), "--out", str(c), "--seed", "99"]) == 0
    assert (a / "record.csv").read_bytes() == (b / "record.csv").read_bytes()
    assert (a / "record.csv").read_bytes() != (c / "record.csv").read_bytes()


def test_ensemble_writes_one_record_per_trajectory(tmp_path):
    p = write_config(tmp_path, {"command": "simulate", "experiment": minimal_experiment()})
    out = tmp_path / "ens"
    assert main(["simulate", "--config", str(p), "--out", str(out), "--ensemble", "3"]) == 0
    assert sorted(f.name for f in out.glob("record_*.csv")) == [
        "record_0000.csv", "record_0001.csv", "record_0002.csv"]


def test_filter_smooth_retrodict_pipeline(tmp_path):
    exp = minimal_experiment(interventions=[probe(0.1)])
    p = write_config(tmp_path, {"command": "simulate", "experiment": exp, "reveal": False,
                                "sample_every": 50})
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", str(p), "--out", str(sim)]) == 0
    rec = str(sim / "record.csv")
    for cmd, artifact in (("filter", "expectations.csv"), ("smooth", "past_states.json"),
                          ("retrodict", "retrodiction.json")):
        out = tmp_path / cmd
        assert main([cmd, "--config", str(p), "--record", rec, "--out", str(out)]) == 0
        assert (out / artifact).exists()
    rows = (tmp_path / "filter" / "expectations.csv").read_text().splitlines()
    assert rows[0] == "t,sigma_x,sigma_y,sigma_z" and len(rows) == 1 + 5
    res = json.loads((tmp_path / "retrodict" / "retrodiction.json").read_text())
    assert sum(o["probability"] for o in res["outcomes"]) == pytest.approx(1.0, abs=1e-10)
    pairs = json.loads((tmp_path / "smooth" / "past_states.json").read_text())["pairs"]
    assert pairs[-1]["effect"] == matrix_to_json(np.eye(2))


def test_retrodict_decoupled_fixture_gives_born_weights(tmp_path):
    exp = minimal_experiment(interventions=[{**probe(0.1, np.eye(4).tolist()),
                                             "probe_state": [[0.3, 0], [0, 0.7]]}])
    p = write_config(tmp_path, {"command": "retrodict", "experiment": exp, "reveal": False})
    sim = tmp_path / "sim"
    assert main(["simulate", "--config", str(p), "--out", str(sim)]) == 0
    out = tmp_path / "r"
    assert main(["retrodict", "--config", str(p), "--record", str(sim / "record.csv"),
                 "--out", str(out)]) == 0
    res = json.loads((out / "retrodiction.json").read_text())
    probs = {o["labels"][0]: o["probability"] for o in res["outcomes"]}
    assert probs["0"] == pytest.approx(0.3, abs=1e-12)
    assert probs["1"] == pytest.approx(0.7, abs=1e-12)


def test_missing_record_and_grid_mismatch(tmp_path):
    p = write_config(tmp_path, {"command": "filter", "experiment": minimal_experiment()})
    with pytest.raises(ConfigError):
        load_config(p)
    rec = tmp_path / "short.csv"
    write_record(rec, MeasurementRecord(0.001, np.zeros((1, 10))))
    out = tmp_path / "out"
    assert main(["filter", "--config", str(p), "--record", str(rec), "--out", str(out)]) == 1
    assert json.loads((out / "error.json").read_text())["error"] == "ConfigError"


def test_estimator_failure_exits_nonzero_with_json(tmp_path):
    # a revealed outcome that the model forbids
    exp = minimal_experiment(couplings=[[[0, 0], [0, 0]]], initial_state=[[1, 0], [0, 0]],
                             interventions=[probe(0.1)])
    p = write_config(tmp_path, {"command": "filter", "experiment": exp})
    rec = tmp_path / "rec.csv"
    write_record(rec, MeasurementRecord(0.001, np.zeros((1, 200)), [(0.1, "1")]))
    out = tmp_path / "out"
    assert main(["filter", "--config", str(p), "--record", str(rec), "--out", str(out)]) == 1
    err = json.loads((out / "error.json").read_text())
    assert err["error"] == "ZeroProbabilityOutcome"
    assert err["t"] == pytest.approx(0.1)


def test_unknown_command_rejected():
    with pytest.raises(ConfigError):
        parse_config({"command": "plot", "experiment": minimal_experiment()})


def test_verify_on_bundled_fixture(tmp_path):
    assert fixture_path().exists()
    out = tmp_path / "v"
    proc = subprocess.run([sys.executable, "-m", "qretrodict", "verify", "--quick",
                           "--out", str(out)], capture_output=True, text=True)
    assert proc.returncode == 0, proc.stderr
    report = json.loads((out / "verify.json").read_text())
    assert report["passed"]
    names = " ".join(c["name"] for c in report["checks"])
    for key in ("O1", "O2", "O3", "S1", "S2", "S3", "S4", "S5", "S6", "experiment"):
        assert key in names
