import csv
import io
import json

import numpy as np
import pytest
from scipy import stats

from rankfill import cli
from rankfill.errors import ConfigurationError, DataError, NumericalError
from rankfill.graph import ObservationSet, sample_pattern
from rankfill.harness import (COLUMNS, SUMMARY_COLUMNS, VERSION, ExperimentSpec, RatingTriples, compare_descent,
                              emit_triples, ingest_triples, make_comparison_matrices, run_experiment,
                              summarize, summary_path, to_csv, to_json)
from rankfill.rank1 import rank1_optimal_distortion


def _write(tmp_path, text, name="t.txt"):
    p = tmp_path / name
    p.write_text(text)
    return str(p)


# ingestion --------------------------------------------------------------------

def test_ingest_comma_base1(tmp_path):
    t = ingest_triples(_write(tmp_path, "# ratings\n1,2,5\n"), "comma", 1, (1, 5))
    assert t.entries == [(0, 1, 1.0)]
    assert (t.rows, t.cols) == (1, 2)


def test_ingest_whitespace_base0(tmp_path):
    t = ingest_triples(_write(tmp_path, "3 7 3\n"), "whitespace", 0, (1, 5))
    assert t.entries == [(3, 7, 0.0)]


def test_ingest_tab_and_shape(tmp_path):
    t = ingest_triples(_write(tmp_path, "0\t0\t1\n1\t2\t2\n"), "tab", 0, (1, 2), shape=(5, 6))
    assert (t.rows, t.cols) == (5, 6) and t.entries == [(0, 0, -1.0), (1, 2, 1.0)]


@pytest.mark.parametrize("text,fragment", [
    ("1,1,3\n1,2\n", ":2:"),
    ("1,1,3\nx,2,3\n", ":2:"),
    ("1,1,3\n2,2,4\n1,1,2\n", "duplicate"),
    ("0,1,3\n", "out of range"),
    ("1,1,9\n", "outside"),
    ("1,1,nan\n", "non-finite"),
])
def test_ingest_errors(tmp_path, text, fragment):
    with pytest.raises(DataError) as info:
        ingest_triples(_write(tmp_path, text), "comma", 1, (1, 5))
    assert fragment in str(info.value)
    assert info.value.exit_code == 2


def test_ingest_index_past_shape(tmp_path):
    with pytest.raises(DataError):
        ingest_triples(_write(tmp_path, "3,1,2\n"), "comma", 1, None, shape=(2, 2))


def test_round_trip_exact(tmp_path):
    gen = np.random.default_rng(0)
    rows, cols = sample_pattern(40, 30, 200, 0)
    obs = ObservationSet(40, 30, rows, cols, gen.uniform(-1, 1, 200))
    for delim, base in [("comma", 0), ("tab", 1), ("whitespace", 1)]:
        path = str(tmp_path / f"rt_{delim}.txt")
        emit_triples(obs, path, delim, base)
        back = ingest_triples(path, delim, base, shape=(40, 30))
        assert np.array_equal(back.row_idx, obs.rows) and np.array_equal(back.col_idx, obs.cols)
        assert np.array_equal(back.values, obs.values)


# comparison matrices ----------------------------------------------------------

def _ratings(n=300, m=250, k=6000, seed=0):
    gen = np.random.default_rng(seed)
    rows, cols = sample_pattern(n, m, k, seed)
    return RatingTriples(n, m, rows, cols, gen.integers(1, 6, k) / 2.0 - 1.5)


def test_comparison_matrices_share_edges():
    data = _ratings()
    cm = make_comparison_matrices(data, 3, 1)
    a, b, c = cm
    assert a.edges == b.edges == c.edges
    assert stats.kstest(b.values, stats.uniform(-1, 2).cdf).pvalue > 0.01
    assert np.allclose(c.values, (cm.lowrank_truth.U @ cm.lowrank_truth.V)[c.rows, c.cols], rtol=0, atol=1e-12)
    assert cm.lowrank_truth.r == 3


def test_comparison_matrices_deterministic():
    a = make_comparison_matrices(_ratings(), 3, 5)
    b = make_comparison_matrices(_ratings(), 3, 5)
    assert np.array_equal(a.iid.values, b.iid.values) and np.array_equal(a.lowrank.values, b.lowrank.values)


def test_compare_descent_rows():
    rows = compare_descent(_ratings(), rank=2, sweeps=3, holdout_size=200)
    assert [r["matrix"] for r in rows] == ["data"] * 4 + ["iid"] * 4 + ["lowrank"] * 4
    assert all(np.isfinite(r["prediction_error"]) for r in rows)


# experiment specs -------------------------------------------------------------

def test_spec_validation():
    with pytest.raises(ConfigurationError):
        ExperimentSpec(algorithm="sdp")
    with pytest.raises(ConfigurationError):
        ExperimentSpec(instances_per_point=0)
    with pytest.raises(ConfigurationError):
        ExperimentSpec(algorithm="rank1", r=[2])
    with pytest.raises(ConfigurationError):
        ExperimentSpec(algorithm="walkrank", config={"temperature": 1})
    with pytest.raises(ConfigurationError):
        ExperimentSpec.from_dict({"n": [10], "colour": "red"})


def test_spec_file_and_hash(tmp_path):
    spec = ExperimentSpec(n=[50], r=[2], epsilon=[4], algorithm="walkrank", config={"rho": 0.2})
    path = _write(tmp_path, json.dumps(spec.to_dict()), "spec.json")
    back = ExperimentSpec.from_file(path)
    assert back == spec and back.config_hash() == spec.config_hash()
    moved = ExperimentSpec(**{**spec.to_dict(), "output": "elsewhere.csv", "timing": True})
    assert moved.config_hash() == spec.config_hash()
    assert ExperimentSpec(**{**spec.to_dict(), "seed_base": 1}).config_hash() != spec.config_hash()


def test_empty_grid_header_only():
    rows = run_experiment(ExperimentSpec(n=[], epsilon=[2.0]))
    assert rows == []
    assert to_csv(rows) == ",".join(COLUMNS) + "\n"


def test_rows_columns_and_provenance():
    spec = ExperimentSpec(n=[200], epsilon=[2.0, 3.0], instances_per_point=3, seed_base=7)
    rows = run_experiment(spec)
    assert [(r["epsilon"], r["seed"]) for r in rows] == [(2.0, 7), (2.0, 8), (2.0, 9), (3.0, 7), (3.0, 8), (3.0, 9)]
    assert all(r["config_hash"] == spec.config_hash() and r["version"] == VERSION for r in rows)
    assert rows[0]["bound_rank1"] == pytest.approx(rank1_optimal_distortion(2.0))
    text = to_csv(rows)
    assert text.splitlines()[0].split(",")[:16] == ["n", "m", "alpha", "r", "epsilon", "algorithm", "seed", "rmse",
                                                   "fit_error", "prediction_error", "steps", "wall_ms",
                                                   "bound_theorem1", "bound_discrete", "bound_lower", "error"]
    parsed = list(csv.DictReader(io.StringIO(text)))
    assert len(parsed) == 6 and parsed[0]["wall_ms"] == "" and parsed[0]["error"] == ""


def test_failures_are_recorded():
    # rank 3 with a 30-way alphabet exceeds the candidate guard
    spec = ExperimentSpec(n=[20], r=[5], epsilon=[3.0], algorithm="walkrank", factors="grid30",
                          instances_per_point=2)
    rows = run_experiment(spec)
    assert all(r["error"].startswith("ConfigurationError") for r in rows)
    summ = summarize(rows)
    assert summ[0]["failures"] == 2 and np.isnan(summ[0]["rmse_mean"])


def test_summary_statistics():
    rows = run_experiment(ExperimentSpec(n=[300], epsilon=[2.0], instances_per_point=4))
    summ = summarize(rows)
    vals = np.array([r["rmse"] for r in rows])
    assert summ[0]["rmse_mean"] == pytest.approx(vals.mean())
    assert summ[0]["rmse_stderr"] == pytest.approx(vals.std(ddof=1) / 2)
    assert list(summ[0]) == SUMMARY_COLUMNS


def test_byte_identical_and_parallel():
    spec = ExperimentSpec(n=[150], r=[2], epsilon=[6.0, 8.0], algorithm="walkrank", instances_per_point=2)
    a = to_csv(run_experiment(spec))
    b = to_csv(run_experiment(spec))
    c = to_csv(run_experiment(spec, jobs=2))
    assert a == b == c


def test_json_emission():
    rows = run_experiment(ExperimentSpec(n=[50], epsilon=[2.0], instances_per_point=1))
    data = json.loads(to_json(rows, COLUMNS))
    assert data[0]["wall_ms"] is None and list(data[0]) == COLUMNS


def test_summary_path():
    assert summary_path("out/run.csv") == "out/run.summary.csv"
    assert summary_path("run") == "run.summary"


# command line -----------------------------------------------------------------

def test_cli_experiment_writes_rows_and_summary(tmp_path):
    out = str(tmp_path / "rows.csv")
    code = cli.main(["--seed", "3", "experiment", "--n", "100", "--epsilon", "2", "3", "--instances", "2",
                     "--out", out])
    assert code == 0
    rows = list(csv.DictReader(open(out)))
    assert [r["seed"] for r in rows] == ["3", "4", "3", "4"]
    summ = list(csv.DictReader(open(str(tmp_path / "rows.summary.csv"))))
    assert len(summ) == 2


def test_cli_experiment_config_and_override(tmp_path):
    cfg = _write(tmp_path, json.dumps({"n": [80], "r": [2], "epsilon": [6], "algorithm": "walkrank",
                                       "instances_per_point": 1}), "spec.json")
    out1, out2 = str(tmp_path / "a.csv"), str(tmp_path / "b.csv")
    assert cli.main(["experiment", "--config", cfg, "--option", "rho=0.2", "--out", out1]) == 0
    assert cli.main(["experiment", "--config", cfg, "--option", "rho=0.2", "--out", out2]) == 0
    assert open(out1).read() == open(out2).read()
    assert cli.main(["experiment", "--config", cfg, "--epsilon", "7", "--out", out2]) == 0
    assert list(csv.DictReader(open(out2)))[0]["epsilon"] == "7.0"


def test_cli_commands_succeed(tmp_path, capsys):
    assert cli.main(["generate", "--n", "3", "--r", "1"]) == 0
    assert capsys.readouterr().out.count("\n") == 10
    triples = str(tmp_path / "obs.txt")
    assert cli.main(["--seed", "2", "sample", "--n", "40", "--epsilon", "3", "--out", triples]) == 0
    assert len(open(triples).read().splitlines()) == 120
    assert cli.main(["complete", "--input", triples, "--base", "0", "--format", "json"]) == 0
    row = json.loads(capsys.readouterr().out)[0]
    assert row["fit_error"] == 0.0
    assert cli.main(["complete", "--algorithm", "walkrank", "--n", "100", "--r", "2", "--epsilon", "8"]) == 0
    assert capsys.readouterr().out.startswith("algorithm,n,m,r,epsilon,rmse")
    assert cli.main(["bounds", "--r", "1", "--epsilon", "2", "4", "--tight"]) == 0
    out = capsys.readouterr().out.splitlines()
    assert out[0].startswith("r,epsilon") and len(out) == 3


def test_cli_compare(tmp_path, capsys):
    data = _ratings(120, 100, 3000)
    path = str(tmp_path / "ratings.txt")
    emit_triples(data, path, "comma", 1)
    assert cli.main(["compare", "--input", path, "--rank", "2", "--sweeps", "2", "--holdout", "100"]) == 0
    lines = capsys.readouterr().out.splitlines()
    assert lines[0] == "matrix,sweep,fit_error,prediction_error,energy" and len(lines) == 10


def test_cli_exit_codes(tmp_path, monkeypatch):
    assert cli.main(["bounds", "--r", "0"]) == 1
    with pytest.raises(SystemExit) as info:
        cli.main(["bounds", "--nonsense"])
    assert info.value.code == 1
    bad = _write(tmp_path, "1,1,3\n1,1,4\n")
    assert cli.main(["complete", "--input", bad]) == 2

    def boom(*a, **k):
        raise NumericalError("diverged")

    monkeypatch.setattr(cli, "theorem1_bound", boom)
    assert cli.main(["bounds", "--epsilon", "3"]) == 3
