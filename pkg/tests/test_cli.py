import csv
import math

import numpy as np
import pytest

from privepi import dataio as dio
from privepi import metapop as mp
from privepi import privacy as pv
from privepi.cli import main

SYNTH = ["synth.t=56", "synth.horizon=28", "synth.records_per_cell=20"]
TRAIN = ["train.epochs=3", "train.hidden=4", "train.head_hidden=8", "train.adapter_hidden=4", "train.lr=2e-3"]


def run(cmd, out, *sets, seed=7):
    argv = [cmd, "--seed", str(seed), "--out", str(out)]
    for s in sets:
        argv += ["--set", s]
    return main(argv)


def rows(path):
    with open(path, newline="") as fh:
        return list(csv.DictReader(fh))


def run_pipeline(root):
    """Every command on a small synthetic bundle; returns the produced directories."""
    d = {k: root / k for k in ("synth", "priv", "rr", "train", "qtrain", "fc", "qfc", "now", "rt", "iv", "ev")}
    assert run("synth", d["synth"], *SYNTH) == 0
    data = [f"data.panel={d['synth'] / 'panel.csv'}", f"data.transactions={d['synth'] / 'transactions.csv'}"]
    weeks = f"data.weeks={mp.n_weeks(84)}"
    assert run("privatize", d["priv"], *data, weeks, "privacy.epsilon=inf") == 0
    assert run("privatize", d["rr"], *data, weeks, "privacy.mechanism=rr", "privacy.epsilon=1") == 0
    zp = f"data.zip_panel={d['priv'] / 'zip_panel.csv'}"
    assert run("train", d["train"], *data, zp, *TRAIN, "train.t_train=56") == 0
    assert run("train", d["qtrain"], *data, zp, *TRAIN, "train.t_train=56", "train.loss=quantile") == 0
    assert run("forecast", d["fc"], *data, zp, f"data.model={d['train'] / 'model.json'}", "forecast.horizon=28") == 0
    assert run("forecast", d["qfc"], *data, zp, f"data.model={d['qtrain'] / 'model.json'}") == 0
    assert run("nowcast", d["now"], *data, zp, *TRAIN, f"data.triangle={d['synth'] / 'triangle.csv'}",
               "nowcast.t=56", "nowcast.window=7") == 0
    inputs = f"rt.inputs=raw:{d['synth'] / 'panel.csv'}:cases,nowcast:{d['now'] / 'revised.csv'}:value"
    assert run("rt", d["rt"], inputs) == 0
    assert run("intervene", d["iv"], *data, zp, f"data.model={d['train'] / 'model.json'}",
               "scenario.x=0,0.01,0.05", "scenario.delta_weeks=1,2", "scenario.horizon=28") == 0
    assert run("evaluate", d["ev"], *data, *TRAIN, "evaluate.horizon=28", "evaluate.settings=none,public",
               "evaluate.methods=oracle,dpepinn,metapop,lstm", "evaluate.lstm_epochs=5") == 0
    return d


@pytest.fixture(scope="module")
def outputs(tmp_path_factory):
    return run_pipeline(tmp_path_factory.mktemp("cli"))


def test_synth_writes_the_bundle(outputs):
    names = sorted(p.name for p in outputs["synth"].iterdir())
    assert names == ["panel.csv", "params.json", "transactions.csv", "triangle.csv"]
    panel = dio.load_panel(outputs["synth"] / "panel.csv")
    assert panel.T == 84
    doc = dio.read_params(outputs["synth"] / "params.json")
    y = dio.simulate_params(doc["weekly"], doc["seed_fraction"], doc["contact"], doc["population"], doc["days"])
    assert y.shape == (84,) and np.all(y >= 0)


def test_privatize_outputs(outputs):
    tx = pv.Transactions.read_csv(outputs["synth"] / "transactions.csv")
    zp = dio.ZipPanel.read_csv(outputs["priv"] / "zip_panel.csv")
    W = mp.n_weeks(84)
    np.testing.assert_array_equal(zp.matrix(), pv.clip_and_aggregate(tx, pv.DEFAULT_CLIP, zp.zips, W))
    cert = pv.Certificate.read(outputs["rr"] / "certificate.txt")
    assert cert.mechanism == "rr"
    assert cert.epsilon == pytest.approx(0.8778, abs=1e-12)


def test_forecast_files(outputs):
    point = rows(outputs["fc"] / "forecast.csv")
    assert len(point) == 28 and list(point[0]) == ["day", "point"]
    assert [int(r["day"]) for r in point] == list(range(57, 85))
    q = rows(outputs["qfc"] / "forecast.csv")
    assert len(q) == 28 and list(q[0]) == ["day", "q20", "q50", "q80"]
    for r in q:
        assert float(r["q20"]) <= float(r["q50"]) <= float(r["q80"])


def test_nowcast_file(outputs):
    now = rows(outputs["now"] / "nowcast.csv")
    assert [int(r["day"]) for r in now] == list(range(49, 57))
    assert len(rows(outputs["now"] / "revised.csv")) == 56


def test_rt_tracks(outputs, tmp_path):
    raw = rows(outputs["rt"] / "rt_raw.csv")
    now = rows(outputs["rt"] / "rt_nowcast.csv")
    assert len(raw) == 84 and len(now) == 56
    assert any(r["available"] == "1" for r in now)
    (tmp_path / "zero.csv").write_text("day,cases\n" + "".join(f"{i},0\n" for i in range(1, 31)))
    assert run("rt", tmp_path / "o", f"rt.inputs=zero:{tmp_path / 'zero.csv'}:cases") == 0
    assert all(r["available"] == "0" for r in rows(tmp_path / "o" / "rt_zero.csv"))


def test_intervention_files(outputs):
    names = {p.name for p in outputs["iv"].iterdir()}
    expected = {"scenario_baseline.csv"} | {f"scenario_x{x}_d{d}.csv" for x in ("0", "0.01", "0.05") for d in (1, 2)}
    assert names == expected
    base = (outputs["iv"] / "scenario_baseline.csv").read_bytes()
    assert (outputs["iv"] / "scenario_x0_d1.csv").read_bytes() == base
    cum = {(x, d): float(rows(outputs["iv"] / f"scenario_x{x}_d{d}.csv")[-1]["cumulative"])
           for x in ("0", "0.01", "0.05") for d in (1, 2)}
    for d in (1, 2):
        assert cum[("0.05", d)] <= cum[("0.01", d)] <= cum[("0", d)]
    for x in ("0.01", "0.05"):
        assert cum[(x, 1)] <= cum[(x, 2)]


def test_evaluate_report(outputs):
    report = rows(outputs["ev"] / "metrics.csv")
    assert [(r["method"], r["setting"]) for r in report] == [
        (m, s) for s in ("none", "public") for m in ("oracle", "dpepinn", "metapop", "lstm")]
    for r in report:
        vals = [float(r[k]) for k in ("rmse", "mae", "mape")]
        assert all(math.isfinite(v) and v >= 0 for v in vals)
        if r["method"] == "oracle":
            assert vals == [0.0, 0.0, 0.0]


def test_every_command_is_deterministic(outputs, tmp_path):
    again = run_pipeline(tmp_path)
    for key, first in outputs.items():
        for p in sorted(first.iterdir()):
            assert (again[key] / p.name).read_bytes() == p.read_bytes(), f"{key}/{p.name}"


def test_errors_exit_nonzero_with_one_line(tmp_path, capsys):
    assert run("train", tmp_path, f"data.panel={tmp_path / 'missing.csv'}") == 1
    err = capsys.readouterr().err.strip().splitlines()
    assert len(err) == 1 and err[0].startswith("error: train: ConfigError:")
    assert run("train", tmp_path, "nonsense") == 1
    assert main(["synth", "--seed", "1", "--out", str(tmp_path), "--config", str(tmp_path / "nope.ini")]) == 1
    with pytest.raises(SystemExit):
        main(["synth", "--out", str(tmp_path)])
    assert run("synth", tmp_path, "synth.seed_fraction=0.5") == 1
    assert "ValueError" in capsys.readouterr().err


def test_config_file_and_overrides(tmp_path):
    (tmp_path / "run.ini").write_text("[synth]\nT = 21\nhorizon = 7\nrecords_per_cell = 5\n")
    assert main(["synth", "--config", str(tmp_path / "run.ini"), "--seed", "3", "--out", str(tmp_path / "a")]) == 0
    assert dio.load_panel(tmp_path / "a" / "panel.csv").T == 28
    assert main(["synth", "--config", str(tmp_path / "run.ini"), "--seed", "3", "--out", str(tmp_path / "b"),
                 "--set", "synth.horizon=14"]) == 0
    assert dio.load_panel(tmp_path / "b" / "panel.csv").T == 35
