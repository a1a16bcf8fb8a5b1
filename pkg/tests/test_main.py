from __future__ import annotations

import json
from pathlib import Path
from types import SimpleNamespace

import pytest

import src.main as main_module
from src.main import main
from src.shooting import NoBracketError, ShootingError

HENON_ARGS = ["--N", "3", "--alpha", "3", "--p", "5"]


def _run(tmp_path: Path, *args: str) -> int:
    command, *rest = args
    return main([command, "--base-dir", str(tmp_path), *rest])


def test_solve_rejects_subcritical_exponent(tmp_path: Path, capsys) -> None:
    code = _run(tmp_path, "solve", "--N", "3", "--alpha", "3", "--p", "0.5")

    assert code == 1
    assert "p must exceed 1" in capsys.readouterr().err


def test_solve_requires_problem(tmp_path: Path, capsys) -> None:
    assert _run(tmp_path, "solve") == 1
    assert "problem parameters missing" in capsys.readouterr().err


def test_trace_rejects_non_positive_gamma(tmp_path: Path) -> None:
    assert _run(tmp_path, "trace", *HENON_ARGS, "--gamma", "0") == 1


def test_table_rejects_empty_rows_file(tmp_path: Path) -> None:
    (tmp_path / "rows.csv").write_text("N,alpha,p\n", encoding="utf-8")

    assert _run(tmp_path, "table", "--rows", "rows.csv") == 1


def test_table_rejects_missing_columns(tmp_path: Path, capsys) -> None:
    (tmp_path / "rows.csv").write_text("N,p\n3,5\n", encoding="utf-8")

    assert _run(tmp_path, "table", "--rows", "rows.csv") == 1
    assert "missing columns alpha" in capsys.readouterr().err


def test_verify_rejects_shuffled_trajectory(tmp_path: Path, capsys) -> None:
    (tmp_path / "traj.csv").write_text("r,u,uprime\n0.2,1,0\n0.1,1,0\n", encoding="utf-8")

    code = _run(tmp_path, "verify", *HENON_ARGS, "--trajectory", "traj.csv")

    assert code == 1
    assert "nodes not strictly increasing" in capsys.readouterr().err


def test_solve_maps_no_bracket_to_exit_two(tmp_path: Path, monkeypatch, capsys) -> None:
    def fake_shoot(*_args, **_kwargs):
        raise NoBracketError()

    monkeypatch.setattr(main_module, "shoot", fake_shoot)

    assert _run(tmp_path, "solve", *HENON_ARGS, "--n", "4") == 2
    assert "no bracket" in capsys.readouterr().err


def test_solve_maps_numerical_failure_to_exit_three(tmp_path: Path, monkeypatch) -> None:
    def fake_shoot(*_args, **_kwargs):
        raise ShootingError("bisection stalled")

    monkeypatch.setattr(main_module, "shoot", fake_shoot)

    assert _run(tmp_path, "solve", *HENON_ARGS) == 3


def test_table_reports_row_failures(tmp_path: Path, monkeypatch) -> None:
    (tmp_path / "rows.csv").write_text("N,alpha,p,n\n3,3,5,1\n4,5,8,2\n", encoding="utf-8")

    def fake_shoot(spec, n, *_args, **_kwargs):
        if n == 2:
            raise NoBracketError()
        return SimpleNamespace(gamma_star=1.5, residual=1e-8)

    monkeypatch.setattr(main_module, "shoot", fake_shoot)

    assert _run(tmp_path, "table", "--rows", "rows.csv") == 3
    lines = (tmp_path / "output" / "table.csv").read_text(encoding="utf-8").splitlines()
    assert lines[1] == "3,3,5,1,1.5,1e-08"
    assert lines[2] == "4,5,8,2,,"


def test_trace_writes_trajectory_and_events(tmp_path: Path, capsys) -> None:
    code = _run(tmp_path, "trace", *HENON_ARGS, "--gamma", "1.0816", "--rmax", "2")

    assert code == 0
    out_dir = tmp_path / "output"
    csv_files = sorted(path.name for path in out_dir.glob("trace_*.csv"))
    assert len(csv_files) == 2
    assert any(name.endswith("_events.csv") for name in csv_files)
    assert "termination=" in capsys.readouterr().out


def test_verify_runs_selected_check(tmp_path: Path, capsys) -> None:
    code = _run(
        tmp_path, "verify", *HENON_ARGS, "--gamma", "1.0816", "--rmax", "2", "--check", "ordering"
    )

    assert code == 0
    report = json.loads((tmp_path / "output" / "verify_N3_alpha3_p5.json").read_text(encoding="utf-8"))
    assert [check["name"] for check in report["checks"]] == ["crossing_order"]
    assert "crossing_order" in capsys.readouterr().out


def test_experiments_run_exit_codes(tmp_path: Path, monkeypatch) -> None:
    calls: list[tuple] = []

    def fake_run(experiment_id, out_dir, manifest_dir, fmt):
        calls.append((experiment_id, out_dir, manifest_dir, fmt))
        return SimpleNamespace(passed=experiment_id == "table", summary={})

    monkeypatch.setattr(main_module, "run_experiment", fake_run)

    assert main(["experiments", "run", "table", "--out", "results", "--base-dir", str(tmp_path)]) == 0
    assert main(["experiments", "run", "threshold", "--out", "results", "--base-dir", str(tmp_path)]) == 3
    assert calls[0] == ("table", tmp_path.resolve() / "results", None, "csv")


def test_unknown_experiment_is_rejected_by_parser(tmp_path: Path) -> None:
    with pytest.raises(SystemExit):
        main(["experiments", "run", "plots", "--out", str(tmp_path)])


@pytest.mark.slow
@pytest.mark.parametrize("n", ["2", "3"])
def test_solve_oscillating_index_without_bracket_exits_two(tmp_path: Path, capsys, n: str) -> None:
    assert _run(tmp_path, "solve", "--N", "4", "--alpha", "5", "--p", "8", "--n", n) == 2
    assert "no bracket" in capsys.readouterr().err
