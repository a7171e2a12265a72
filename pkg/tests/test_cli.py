import json
import logging

import numpy as np
import pandas as pd
import pytest

from src.cli import EXIT_ERROR, EXIT_NONCONVERGED, EXIT_OK, main


@pytest.fixture(autouse=True)
def _detach_console_handler():
    yield
    root = logging.getLogger("spatial_gee")
    for handler in list(root.handlers):
        root.removeHandler(handler)
    root.setLevel(logging.NOTSET)


def _simulate(tmp_path, *extra, name="draw.csv"):
    out = tmp_path / name
    code = main(["simulate", "--case", "count1", "--rho", "0.5", "--seed", "7", "--output", str(out), *extra])
    return code, out


def test_simulate_writes_csv_and_sidecar(tmp_path):
    code, out = _simulate(tmp_path)
    assert code == EXIT_OK
    frame = pd.read_csv(out)
    assert len(frame) == 400
    assert list(frame.columns) == ["y", "const", "x2", "x3", "x4", "coord_1", "coord_2", "group_id"]
    meta = json.loads((tmp_path / "draw.meta.json").read_text(encoding="utf-8"))
    assert meta["seed"] == 7 and meta["case"] == "count1"
    assert meta["schema"]["group"] == "group_id"

    code, again = _simulate(tmp_path, name="again.csv")
    assert code == EXIT_OK
    assert out.read_bytes() == again.read_bytes()


def test_simulate_reports_singular_fallback(tmp_path, caplog):
    with caplog.at_level(logging.WARNING, logger="spatial_gee"):
        code = main(["simulate", "--case", "probit1", "--rho", "1", "--side", "6", "--seed", "1",
                     "--output", str(tmp_path / "p.csv")])
    assert code == EXIT_OK
    assert "substituting rho" in caplog.text


def test_unknown_case_is_an_input_error(tmp_path, caplog):
    code = main(["mc", "--case", "count9", "--output", str(tmp_path / "x.csv")])
    assert code == EXIT_ERROR
    assert "valid" in caplog.text


def test_mc_writes_summary(tmp_path, capsys):
    out = tmp_path / "mc.csv"
    code = main(["mc", "--case", "count1", "--rho", "0.5", "--side", "6", "--reps", "2", "--seed", "3",
                 "--threads", "2", "--estimators", "pqmle-poisson,gee-poisson", "--output", str(out), "-q"])
    assert code == EXIT_OK
    frame = pd.read_csv(out)
    assert set(frame["estimator"]) == {"Poisson", "GEE-poisson"}
    assert set(frame["case"]) == {"count1"}
    assert not frame["single_rep"].any()
    assert "mc: count1" in capsys.readouterr().out


def test_mc_single_replication(tmp_path):
    out = tmp_path / "one.csv"
    code = main(["mc", "--case", "probit1", "--rho", "0.5", "--side", "6", "--reps", "1", "--seed", "3",
                 "--threads", "1", "--output", str(out), "-q"])
    assert code == EXIT_OK
    frame = pd.read_csv(out)
    assert frame["single_rep"].all()
    assert set(frame["estimator"]) == {"Probit", "GEE-probit"}


def test_fit_on_simulated_data(tmp_path):
    _, data = _simulate(tmp_path, "--side", "8")
    meta = json.loads((tmp_path / "draw.meta.json").read_text(encoding="utf-8"))
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps(meta["schema"]), encoding="utf-8")
    report_path = tmp_path / "report.json"
    table_path = tmp_path / "table.csv"

    code = main(["fit", "--input", str(data), "--schema", str(schema), "--family", "poisson",
                 "--estimators", "pqmle-poisson,gee-poisson", "--working", "independence",
                 "--output", str(report_path), "--table", str(table_path), "-q"])
    assert code in (EXIT_OK, EXIT_NONCONVERGED)
    report = json.loads(report_path.read_text(encoding="utf-8"))
    assert report["dataset"]["n"] == 64
    assert report["config"]["working"] == "independence"

    def betas(name):
        return np.array([c["estimate"] for c in report["estimators"][name]["coefficients"]])

    assert np.max(np.abs(betas("gee-poisson") - betas("pqmle-poisson"))) < 1e-6
    assert table_path.exists()


def test_fit_family_estimator_mismatch(tmp_path, caplog):
    _, data = _simulate(tmp_path, "--side", "4")
    meta = json.loads((tmp_path / "draw.meta.json").read_text(encoding="utf-8"))
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps(meta["schema"]), encoding="utf-8")
    code = main(["fit", "--input", str(data), "--schema", str(schema), "--family", "poisson",
                 "--estimators", "gee-probit", "--output", str(tmp_path / "r.json")])
    assert code == EXIT_ERROR
    assert "gee-probit" in caplog.text


def test_fit_missing_input_names_path(tmp_path, caplog):
    schema = tmp_path / "schema.json"
    schema.write_text(json.dumps({"response": "y", "covariates": ["x"], "coords": ["a", "b"]}), encoding="utf-8")
    code = main(["fit", "--input", str(tmp_path / "nope.csv"), "--schema", str(schema)])
    assert code == EXIT_ERROR
    assert "nope.csv" in caplog.text


def test_config_file_supplies_defaults(tmp_path):
    config = tmp_path / "run.json"
    config.write_text(json.dumps({"case": "count1", "rho": 0.5, "side": 4, "seed": 2}), encoding="utf-8")
    out = tmp_path / "c.csv"
    assert main(["simulate", "--config", str(config), "--output", str(out), "-q"]) == EXIT_OK
    assert len(pd.read_csv(out)) == 16
