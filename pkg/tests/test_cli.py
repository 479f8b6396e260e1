import json
from pathlib import Path

import numpy as np
import pytest

from jointfit.cli import main
from jointfit.errors import DataFormatError
from jointfit.io import load_bundle, write_bundle
from jointfit.simulate import SimDesign, simulate_dataset

FIXTURES = Path(__file__).parent / "fixtures"
GOLDEN_ARGS = [
    "--longitudinal", str(FIXTURES / "golden_long.csv"),
    "--survival", str(FIXTURES / "golden_surv.csv"),
    "--quad-order", "7",
]


def write_csv(path, text):
    path.write_text(text.strip() + "\n")
    return str(path)


@pytest.fixture
def pair(tmp_path):
    lon = write_csv(tmp_path / "l.csv", """
id,time,y
a,0,0.5
a,1,1.0
b,0,0.2
b,2,0.9
""")
    sur = write_csv(tmp_path / "s.csv", """
id,time,event,w
a,1.5,1,0
b,2.5,0,1
""")
    return lon, sur


def test_golden_fit_output(tmp_path, capsys):
    out = tmp_path / "fit.json"
    assert main(["fit", *GOLDEN_ARGS, "--out", str(out)]) == 0
    assert out.read_text() == (FIXTURES / "golden_fit.json").read_text()


def test_max_iters_one_exits_two_and_still_writes(tmp_path, capsys):
    out = tmp_path / "fit.json"
    assert main(["fit", *GOLDEN_ARGS, "--max-iters", "1", "--out", str(out)]) == 2
    obj = json.loads(out.read_text())
    assert obj["converged"] is False and obj["n_iters"] == 1


def test_missing_file_exits_one_without_output(tmp_path, capsys):
    out = tmp_path / "fit.json"
    code = main(["fit", "--longitudinal", str(tmp_path / "nope.csv"), "--survival", str(tmp_path / "nope.csv"),
                 "--out", str(out)])
    assert code == 1 and not out.exists()
    assert "nope.csv" in capsys.readouterr().err


def test_simulate_is_reproducible(tmp_path, capsys):
    for tag in ("a", "b"):
        assert main(["simulate", "--n", "25", "--seed", "3", "--longitudinal", str(tmp_path / f"{tag}_l.csv"),
                     "--survival", str(tmp_path / f"{tag}_s.csv")]) == 0
    assert (tmp_path / "a_l.csv").read_bytes() == (tmp_path / "b_l.csv").read_bytes()
    assert (tmp_path / "a_s.csv").read_bytes() == (tmp_path / "b_s.csv").read_bytes()


def test_simulate_rejects_empty_cohort(tmp_path, capsys):
    assert main(["simulate", "--n", "0", "--longitudinal", str(tmp_path / "l.csv"),
                 "--survival", str(tmp_path / "s.csv")]) == 1


def test_simulate_event_fraction(tmp_path, capsys):
    # exponential(1) events against exponential(0.1) censoring: P(event) = 1 / 1.1
    n = 2000
    sur = tmp_path / "s.csv"
    assert main(["simulate", "--n", str(n), "--seed", "1", "--alpha", "0", "--gamma", "0", "--rate", "1",
                 "--censor-rate", "0.1", "--longitudinal", str(tmp_path / "l.csv"), "--survival", str(sur)]) == 0
    events = [line.split(",")[2] == "1" for line in sur.read_text().splitlines()[1:]]
    p = 1 / 1.1
    assert abs(np.mean(events) - p) <= 3 * np.sqrt(p * (1 - p) / n)


def test_validate_reports_counts(pair, capsys):
    lon, sur = pair
    assert main(["validate", "--longitudinal", lon, "--survival", sur]) == 0
    assert "2 subjects, 4 measurements, 1 events" in capsys.readouterr().out


def test_csv_round_trip(tmp_path):
    data = simulate_dataset(SimDesign(n_subjects=30, seed=6))
    lon, sur = tmp_path / "l.csv", tmp_path / "s.csv"
    write_bundle(data, lon, sur)
    back = load_bundle(lon, sur)
    assert [(s.id, s.event_time, s.event_indicator, s.baseline_covariates, s.records) for s in back] == \
        [(s.id, s.event_time, s.event_indicator, s.baseline_covariates, s.records) for s in data]


def test_late_measurements_rejected_or_truncated(tmp_path):
    lon = write_csv(tmp_path / "l.csv", """
id,time,y
a,0,0.5
a,1,1.0
a,2,1.1
a,3,1.3
""")
    sur = write_csv(tmp_path / "s.csv", """
id,time,event,w
a,1.5,1,0
""")
    with pytest.raises(DataFormatError) as err:
        load_bundle(lon, sur)
    assert err.value.row == 4 and "4, 5" in str(err.value)
    (s,) = load_bundle(lon, sur, truncate=True)
    assert [r.time for r in s.records] == [0.0, 1.0]
    assert main(["validate", "--longitudinal", lon, "--survival", sur]) == 1
    assert main(["validate", "--longitudinal", lon, "--survival", sur, "--truncate"]) == 0


@pytest.mark.parametrize(
    "long_text, surv_text, where",
    [
        ("id,time\na,0", "id,time,event\na,1,1", ("l.csv", 1, "y")),
        ("id,time,y\na,0,x", "id,time,event\na,1,1", ("l.csv", 2, "y")),
        ("id,time,y\na,0,1\nz,0,1", "id,time,event\na,1,1", ("l.csv", 3, "id")),
        ("id,time,y\na,0,1", "id,time,event\na,1,1\na,2,0", ("s.csv", 3, "id")),
        ("id,time,y\na,0,1", "id,time,event\na,1,2", ("s.csv", 2, "event")),
        ("id,time,y\na,0,1", "id,time,event\na,1,1\nb,2,0", ("s.csv", 3, None)),
        ("id,time,y\na,0,1\na,0,2", "id,time,event\na,1,1", ("l.csv", 3, "time")),
        ("id,time,y\na,0,1", "", ("s.csv", None, None)),
    ],
)
def test_load_errors_carry_location(tmp_path, long_text, surv_text, where):
    lon = tmp_path / "l.csv"
    sur = tmp_path / "s.csv"
    lon.write_text(long_text + "\n")
    sur.write_text(surv_text + ("\n" if surv_text else ""))
    with pytest.raises(DataFormatError) as err:
        load_bundle(lon, sur)
    e = err.value
    assert (Path(e.file).name, e.row, e.column) == where


def test_config_precedence(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"max-iters": 1, "quad-order": 5}))
    out = tmp_path / "fit.json"
    # config alone stops after one iteration
    assert main(["fit", *GOLDEN_ARGS[:4], "--config", str(cfg), "--out", str(out)]) == 2
    assert json.loads(out.read_text())["n_iters"] == 1
    # the flag overrides the config value
    assert main(["fit", *GOLDEN_ARGS[:4], "--config", str(cfg), "--max-iters", "3", "--out", str(out)]) == 2
    assert json.loads(out.read_text())["n_iters"] == 3


def test_unknown_config_key(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"bogus": 1}))
    assert main(["fit", *GOLDEN_ARGS[:4], "--config", str(cfg), "--out", str(tmp_path / "f.json")]) == 1


def test_thread_variable_validated(monkeypatch, tmp_path, capsys):
    monkeypatch.setenv("JOINTFIT_THREADS", "zero")
    assert main(["fit", *GOLDEN_ARGS, "--out", str(tmp_path / "f.json")]) == 1


def test_result_schema(tmp_path, capsys):
    out = tmp_path / "fit.json"
    main(["fit", *GOLDEN_ARGS, "--out", str(out)])
    obj = json.loads(out.read_text())
    assert set(obj) == {"theta", "standard_errors", "information_matrix", "hazard", "loglik_trace",
                        "converged", "n_iters"}
    assert list(obj["theta"]) == ["alpha", "beta[0]", "beta[1]", "gamma[0]", "sigma", "D[0,0]", "D[1,0]", "D[1,1]"]
    M = np.array(obj["information_matrix"])
    assert M.shape == (8, 8) and np.array_equal(M, M.T)
    # the trace starts at the initial value
    assert len(obj["loglik_trace"]) == obj["n_iters"] + 1


def test_config_polynomial_basis(tmp_path, capsys):
    cfg = tmp_path / "cfg.json"
    cfg.write_text(json.dumps({"basis": "poly(2,1)", "quad-order": 5, "max-iters": 1000}))
    out = tmp_path / "fit.json"
    assert main(["fit", *GOLDEN_ARGS[:4], "--config", str(cfg), "--out", str(out)]) == 0
    assert list(json.loads(out.read_text())["theta"])[:4] == ["alpha", "beta[0]", "beta[1]", "beta[2]"]
    cfg.write_text(json.dumps({"basis": "cubic"}))
    assert main(["fit", *GOLDEN_ARGS[:4], "--config", str(cfg), "--out", str(out)]) == 1
