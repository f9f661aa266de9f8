"""CLI smoke tests over the offline demo provider."""

from __future__ import annotations

import json

import pytest

from masforge.cli import main


@pytest.fixture
def dataset(tmp_path):
    path = tmp_path / "questions.jsonl"
    path.write_text(
        '{"id": "d1", "question": "What is 2 + 3?", "task_kind": "numeric", "gold": "5"}\n'
        '{"id": "d2", "question": "What is 10 - 4?", "task_kind": "numeric", "gold": "6"}\n',
        encoding="utf-8",
    )
    return path


def test_run_report_inspect_round_trip(dataset, tmp_path, capsys):
    out_dir = tmp_path / "run"
    code = main(
        [
            "run",
            "--dataset",
            str(dataset),
            "--out",
            str(out_dir),
            "--provider",
            "demo",
            "--iterations",
            "2",
            "--deterministic",
        ]
    )
    assert code == 0
    run_output = capsys.readouterr().out
    assert "d1:" in run_output and "d2:" in run_output
    assert "accuracy:" in run_output
    assert (out_dir / "records.jsonl").exists()

    lines = (out_dir / "records.jsonl").read_text().splitlines()
    first = json.loads(lines[0])
    assert len(first["all_candidates"]) == 6  # 4 blocks + 2 iterations

    assert main(["report", str(out_dir)]) == 0
    report_output = capsys.readouterr().out
    assert "method\taccuracy\ttotal_cost" in report_output

    assert main(["inspect", str(out_dir), "--question", "d1"]) == 0
    inspect_output = capsys.readouterr().out
    assert "experience library" in inspect_output
    assert "building block" in inspect_output


def test_run_with_ablation_and_preset(dataset, tmp_path, capsys):
    out_dir = tmp_path / "ablated"
    code = main(
        [
            "run",
            "--dataset",
            str(dataset),
            "--out",
            str(out_dir),
            "--iterations",
            "2",
            "--ablate",
            "no-evolve",
            "--block-preset",
            "default",
            "--deterministic",
        ]
    )
    assert code == 0
    capsys.readouterr()
    record = json.loads((out_dir / "records.jsonl").read_text().splitlines()[0])
    assert len(record["all_candidates"]) == 4
    assert record["ablation_flags"] == ["no-evolve"]


def test_report_pareto_file(dataset, tmp_path, capsys):
    out_dir = tmp_path / "run"
    main(
        [
            "run",
            "--dataset",
            str(dataset),
            "--out",
            str(out_dir),
            "--iterations",
            "2",
            "--deterministic",
        ]
    )
    capsys.readouterr()
    pareto = tmp_path / "pareto.tsv"
    assert main(["report", str(out_dir), "--pareto-out", str(pareto)]) == 0
    capsys.readouterr()
    assert pareto.read_text().startswith("method\taccuracy\ttotal_cost")
