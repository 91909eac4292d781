import json

import pytest

from safevisor.cli import EXIT_GUARANTEE, EXIT_INVALID, EXIT_OK, main
from safevisor.scenario import bundled_path


def _scenario(tmp_path, **run):
    raw = json.loads(bundled_path("two_car").read_text())
    raw["run"].update(run)
    p = tmp_path / "sc.json"
    p.write_text(json.dumps(raw))
    return str(p)


def test_validate(capsys):
    assert main(["validate", "two_car"]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["states"] == 101 and out["initial_relation_value"] == pytest.approx(0.0213, abs=5e-5)


def test_invalid_scenario_exit_code(tmp_path, capsys):
    assert main(["validate", _scenario(tmp_path, eta=2.0)]) == EXIT_INVALID
    assert "run.η" in capsys.readouterr().err


def test_exclusive_flags():
    assert main(["simulate", "two_car", "--no-supervisor", "--advisor-only"]) == EXIT_INVALID


def test_bad_controller_flag(capsys):
    assert main(["simulate", "two_car", "--runs", "5", "--controller", "{\"kind\": \"pid\"}"]) == EXIT_INVALID


def test_synthesize_writes_tables(tmp_path, capsys):
    assert main(["synthesize", "two_car", "--out", str(tmp_path)]) == EXIT_OK
    assert (tmp_path / "values.csv").exists() and (tmp_path / "guarantee_grid.csv").exists()
    out = json.loads(capsys.readouterr().out)
    assert out["mode"] == "robust" and 0.0 <= out["advisor_bound"] <= 1.0
    with (tmp_path / "values.csv").open() as fh:
        assert sum(1 for _ in fh) == 102


def test_abstract_caches(tmp_path, capsys):
    assert main(["abstract", "two_car", "--out", str(tmp_path)]) == EXIT_OK
    out = json.loads(capsys.readouterr().out)
    assert out["max_row_sum_error"] < 1e-12
    assert any(tmp_path.iterdir())


def test_simulate_check_passes(capsys):
    assert main(["simulate", "two_car", "--runs", "300", "--seed", "2", "--check"]) == EXIT_OK
    summary = json.loads(capsys.readouterr().out.split("\nPASS")[0])
    assert summary[0]["label"] == "safevisor"


def test_failed_guarantee_exit_code(monkeypatch, capsys):
    monkeypatch.setattr("safevisor.cli.guarantee_ok", lambda metrics, eta: False)
    assert main(["simulate", "two_car", "--runs", "20", "--check"]) == EXIT_GUARANTEE
    assert "FAIL safevisor" in capsys.readouterr().out


def test_unsupervised_configuration_is_not_checked(monkeypatch, capsys):
    monkeypatch.setattr("safevisor.cli.guarantee_ok", lambda metrics, eta: False)
    assert main(["simulate", "two_car", "--runs", "20", "--no-supervisor", "--check"]) == EXIT_OK


def test_report_writes_all_configurations(tmp_path, capsys):
    assert main(["report", "two_car", "--runs", "50", "--out", str(tmp_path)]) == EXIT_OK
    summary = json.loads((tmp_path / "metrics.json").read_text())
    assert [c["label"] for c in summary["configurations"]] == ["safevisor", "unsupervised", "advisor-only"]


def test_sweep_needs_planar_grid(capsys):
    assert main(["sweep", "two_car"]) == EXIT_INVALID
