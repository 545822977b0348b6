import csv
import json

import numpy as np
import pytest

from flue.cli import DEFAULTS, main, matrices_document, parse_config, run_experiment, verify_spectral
from flue.coding import build_cluster
from flue.errors import ParseError, ValidationError
from flue.rng import derive_seed
from flue.serialization import matrix_from_json

SMALL = """
problem.m = 30
problem.n_dim = 8
problem.nodes = 3
engine.iterations = {iters}
output.record_every = 5
output.trace_path = {out}/trace.csv
output.summary_path = {out}/summary.json
"""


def small_cfg(tmp_path, iters=40, extra=""):
    return parse_config(SMALL.format(iters=iters, out=tmp_path) + extra)


def test_empty_document_gives_documented_defaults():
    echo = parse_config("").echo()
    assert echo == {f"{s}.{k}": d for (s, k), (_, d) in DEFAULTS.items()}
    assert echo["problem.nodes"] == 5 and echo["problem.m"] == 150 and echo["problem.n_dim"] == 100
    assert echo["schedule.offset"] == 100 and echo["schedule.exponent"] == 0.75
    assert echo["engine.form"] == "general" and echo["engine.mixing"] == "tee"
    assert echo["engine.matrix_mode"] == "fixed" and echo["engine.epsilon"] == "auto"
    assert echo["engine.iterations"] == 20000 and echo["output.record_every"] == 10


def test_negative_epsilon_is_invalid():
    with pytest.raises(ValidationError):
        parse_config("engine.epsilon = -0.1")


def test_echo_round_trips():
    cfg = parse_config("schedule.exponent = 0.75\nengine.epsilon = 1e-9  # fixed\n")
    assert cfg.echo()["schedule.exponent"] == 0.75
    again = parse_config(cfg.to_text())
    assert again.echo() == cfg.echo()
    assert again.to_text() == cfg.to_text()


@pytest.mark.parametrize("text,line,column", [
    ("problem.m = 150\n  bogus.key = 1\n", 2, 3),
    ("problem.m 150\n", 1, 1),
    ("m = 150\n", 1, 1),
    ("# comment\nproblem.m = lots\n", 2, 13),
    ("problem.m = 1\nproblem.m = 2\n", 2, 1),
    ("baseline.dgd = maybe\n", 1, 16),
])
def test_parse_errors_carry_position(text, line, column):
    with pytest.raises(ParseError) as exc:
        parse_config(text)
    assert (exc.value.line, exc.value.column) == (line, column)


@pytest.mark.parametrize("text", ["problem.m = 10\nproblem.n_dim = 10", "output.record_every = 0",
                                  "engine.matrix_mode = random_pool\nengine.pool_size = 1",
                                  "schedule.exponent = 2", "problem.scale = 0"])
def test_invalid_values(text):
    with pytest.raises(ValidationError):
        parse_config(text)


def test_zero_iterations_report_initial_metrics(tmp_path):
    summary = run_experiment(small_cfg(tmp_path, iters=0))
    assert summary.final_ae == pytest.approx(1.0)
    assert summary.final_ce == 0.0
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert [r["algo"] for r in rows] == ["flue", "dgd"]
    assert float(rows[0]["ae"]) == summary.final_ae


def test_trace_interleaves_algorithms(tmp_path):
    run_experiment(small_cfg(tmp_path))
    lines = (tmp_path / "trace.csv").read_text().splitlines()
    assert lines[0] == "algo,cycle,slot,ae,ce,f_gap,alpha"
    algos = [line.split(",")[0] for line in lines[1:]]
    assert algos == ["flue", "dgd"] * (len(algos) // 2)
    cycles = [int(line.split(",")[1]) for line in lines[1:]]
    assert cycles[::2] == cycles[1::2] == [0, 5, 10, 15, 20, 25, 30, 35, 40]


def test_trace_without_baseline(tmp_path):
    run_experiment(small_cfg(tmp_path, extra="baseline.dgd = false\n"))
    rows = list(csv.DictReader(open(tmp_path / "trace.csv")))
    assert {r["algo"] for r in rows} == {"flue"}


def test_summary_echoes_config_and_eps(tmp_path):
    cfg = small_cfg(tmp_path)
    summary = run_experiment(cfg)
    doc = json.loads((tmp_path / "summary.json").read_text())
    assert doc["config_echo"] == cfg.echo()
    assert doc["epsilon_used"] < doc["eps0"]
    assert doc["epsilon_used"] == pytest.approx(doc["eps0"] / 2, rel=1e-15)
    assert doc["final_ae"] == summary.final_ae
    assert "wall_time_ms" not in doc and summary.wall_time_ms >= 0


def test_artifacts_are_byte_identical(tmp_path):
    a, b = tmp_path / "a", tmp_path / "b"
    run_experiment(small_cfg(a))
    run_experiment(small_cfg(b))
    assert (a / "trace.csv").read_bytes() == (b / "trace.csv").read_bytes()
    summary_a = json.loads((a / "summary.json").read_text())
    summary_b = json.loads((b / "summary.json").read_text())
    summary_a.pop("config_echo"), summary_b.pop("config_echo")
    assert summary_a == summary_b


def test_special_form_reports_zero_epsilon(tmp_path):
    summary = run_experiment(small_cfg(tmp_path, extra="engine.form = special\n"))
    assert summary.epsilon_used == 0.0


def test_random_pool_experiment(tmp_path):
    summary = run_experiment(small_cfg(tmp_path, extra="engine.matrix_mode = random_pool\n"))
    assert np.isfinite(summary.final_ae)


def test_verify_spectral_at_zero_eps_passes():
    report = verify_spectral(2, 0, 0.0)
    assert report["passed"], report["failed"]


def test_verify_spectral_at_half_bound_passes():
    report = verify_spectral(2, 0, 0.5)
    assert report["passed"], report["failed"]


def test_verify_spectral_poisoned_pool_fails():
    report = verify_spectral(2, 0, 0.5, poison_pool=True)
    assert not report["passed"]
    assert "time_varying" in report["failed"]
    assert report["time_varying"]["error"] == "NonConvergent"


def test_verify_spectral_rejects_large_n():
    with pytest.raises(ValidationError):
        verify_spectral(4, 0, 0.5)


def test_verify_spectral_exit_codes(capsys):
    assert main(["verify-spectral", "--n", "2", "--seed", "0", "--eps-fraction", "0"]) == 0
    out = json.loads(capsys.readouterr().out)
    assert out["passed"]
    assert main(["verify-spectral", "--n", "2", "--eps-fraction", "0.5", "--poison-pool"]) == 1
    assert "time_varying" in capsys.readouterr().err


def test_gen_matrices_round_trip(tmp_path):
    out = tmp_path / "m.json"
    assert main(["gen-matrices", "--n", "3", "--p", "4", "--seed", "5", "--out", str(out)]) == 0
    doc = json.loads(out.read_text())
    cluster = build_cluster(3, derive_seed(5, "matrices"), p=4)
    assert np.array_equal(matrix_from_json(doc["encoding"]), cluster.encoding.b)
    for d, dec in zip(doc["decoders"], cluster.decoders):
        assert np.array_equal(matrix_from_json(d["stacked"]), dec.stacked)
    assert doc == matrices_document(3, 4, 5)


def test_run_subcommand_with_overrides(tmp_path, capsys):
    cfg_path = tmp_path / "exp.cfg"
    cfg_path.write_text(SMALL.format(iters=10, out="ignored"))
    assert main(["run", "--config", str(cfg_path), "--seed", "7", "--out", str(tmp_path / "o")]) == 0
    doc = json.loads((tmp_path / "o" / "summary.json").read_text())
    assert doc["config_echo"]["problem.seed"] == 7
    assert "wall_time_ms" in json.loads(capsys.readouterr().out)


def test_bad_log_level_is_an_error(tmp_path, monkeypatch, capsys):
    monkeypatch.setenv("FLUE_LOG", "loud")
    assert main(["verify-spectral", "--n", "1"]) == 2
    assert "FLUE_LOG" in capsys.readouterr().err


def test_bad_config_exits_nonzero(tmp_path, capsys):
    cfg_path = tmp_path / "bad.cfg"
    cfg_path.write_text("nope.key = 1\n")
    assert main(["run", "--config", str(cfg_path)]) == 2
    assert "line 1, column 1" in capsys.readouterr().err
