import csv
import json

import numpy as np
import pytest

from unicp import cli, config, methods, simlab
from unicp.errors import ConfigurationError

BASE = {
    "method": "standard_cp",
    "score": "abs_residual_ls",
    "alpha": [0.1, 0.3],
    "generator": {"type": "exchangeable", "n": 9},
    "trials": 120,
    "seed": 4,
}


def write(tmp_path, cfg, name="cfg.json"):
    path = tmp_path / name
    path.write_text(json.dumps(cfg))
    return str(path)


def test_simulate_writes_csv_and_json(tmp_path, capsys):
    out = tmp_path / "run.csv"
    assert cli.main(["simulate", "--config", write(tmp_path, BASE), "--out", str(out)]) == 0
    rows = list(csv.DictReader(out.open()))
    assert [r["alpha"] for r in rows] == ["0.1", "0.3"]
    assert list(rows[0]) == config.CSV_COLUMNS
    assert int(rows[0]["trials"]) == 120 and rows[0]["seed"] == "4"
    report = json.loads((tmp_path / "run.json").read_text())
    assert report[0]["covered"] == int(rows[0]["covered"])
    assert "coverage=" in capsys.readouterr().out


def test_simulate_serial_parallel_identical(tmp_path):
    a, b = tmp_path / "a.csv", tmp_path / "b.csv"
    path = write(tmp_path, BASE)
    cli.main(["simulate", "--config", path, "--out", str(a)])
    cli.main(["simulate", "--config", path, "--out", str(b), "--workers", "3"])
    assert a.read_bytes() == b.read_bytes()


def test_seed_and_trials_override(tmp_path):
    out = tmp_path / "o.csv"
    cli.main(["simulate", "--config", write(tmp_path, BASE), "--out", str(out), "--seed", "9", "--trials", "100"])
    row = next(csv.DictReader(out.open()))
    assert row["seed"] == "9" and row["trials"] == "100"


def test_unknown_keys_rejected(tmp_path, capsys):
    for bad in ({**BASE, "extra": 1}, {**BASE, "generator": {"type": "exchangeable", "n": 5, "mu": 2}},
                {**BASE, "method": "nope"}, {**BASE, "generator": {"type": "weird"}}, {**BASE, "alpha": 1.5}):
        assert cli.main(["simulate", "--config", write(tmp_path, bad), "--out", str(tmp_path / "x.csv")]) == 2
    assert "error" in capsys.readouterr().err


def test_build_experiment_variants():
    shift = {"type": "covariate_shift", "n": 6, "test_mean": 1.0}
    drift = {"type": "drift", "n": 2, "per_index_means": [0.0, 2.0]}
    cases = [
        ({"method": "wcp", "alpha": 0.1, "generator": shift}, methods.WCP),
        ({"method": "wcp_unnormalized", "alpha": 0.1, "generator": shift, "weights": {"type": "scaled_oracle", "scale": 0.8}},
         methods.WCPUnnormalized),
        ({"method": "split_cp", "alpha": 0.1, "generator": {"type": "exchangeable", "n": 8}, "n0": 4}, methods.SplitCP),
        ({"method": "nexcp", "alpha": 0.1, "generator": drift, "nex_weights": {"rate": 0.5}}, methods.NexCP),
        ({"method": "rlcp", "alpha": 0.1, "generator": shift, "kernel": {"type": "box", "radius": 2.0}}, methods.RLCP),
        ({"method": "rlcp_resample", "alpha": 0.1, "generator": shift}, methods.RLCPResample),
        ({"method": "gwcp", "alpha": 0.1, "generator": shift}, methods.GWCP),
        ({"method": "gwcp_is", "alpha": 0.1, "generator": {"type": "fcs", "n": 5}, "sampling": {"samples": 50}},
         methods.GWCPImportance),
        ({"method": "standard_cp", "alpha": 0.1, "generator": shift, "sampling": {"mode": "mc", "samples": 19}},
         methods.MonteCarlo),
        ({"method": "wcp", "alpha": 0.1, "generator": shift, "sampling": {"mode": "is", "samples": 19}},
         methods.ImportanceSampled),
    ]
    for cfg, cls in cases:
        assert isinstance(config.build_experiment(cfg).method, cls)


def test_misspecified_weights_get_inflation(tmp_path):
    cfg = {"method": "wcp", "alpha": 0.1, "weights": "uniform", "trials": 100, "inflation_samples": 20_000,
           "generator": {"type": "covariate_shift", "n": 9, "test_mean": 1.0}}
    reports = config.run_experiment(config.build_experiment(cfg))
    r = reports[0]
    assert r.inflation_estimate == pytest.approx(simlab.gaussian_tv(0, 1), abs=0.03)
    assert r.theoretical_floor == pytest.approx(0.9 - r.inflation_estimate)


def test_parse_grid():
    assert np.allclose(config.parse_grid("0:1:0.25"), [0, 0.25, 0.5, 0.75, 1.0])
    with pytest.raises(ConfigurationError):
        config.parse_grid("1:0:0.1")
    with pytest.raises(ConfigurationError):
        config.parse_grid("a:b")


def test_predict_prints_grid(tmp_path, capsys):
    train = tmp_path / "train.csv"
    train.write_text("x,y\n" + "".join(f"{i},{i + 0.1 * (-1) ** i}\n" for i in range(8)))
    assert cli.main(["predict", "--train", str(train), "--x", "3.5", "--alpha", "0.2",
                     "--y-grid", "0:7:0.5", "--seed", "1"]) == 0
    lines = capsys.readouterr().out.strip().splitlines()
    assert lines[0] == "y,member,p"
    rows = [line.split(",") for line in lines[1:]]
    assert len(rows) == 15
    assert all((r[1] == "1") == (float(r[2]) > 0.2) for r in rows)
    members = [float(r[0]) for r in rows if r[1] == "1"]
    assert min(members) <= 3.5 <= max(members)


def test_predict_rejects_dimension_mismatch(tmp_path):
    train = tmp_path / "train.csv"
    train.write_text("1,2,3\n4,5,6\n")
    assert cli.main(["predict", "--train", str(train), "--x", "1", "--y-grid", "0:1:0.5"]) == 2


def test_oracle_check_exit_code(capsys):
    assert cli.main(["oracle-check", "--max-n", "3", "--cases", "10", "--skip-type1"]) == 0
    out = capsys.readouterr().out
    assert out.count("PASS") >= 9 and "FAIL" not in out
