import json

import pytest

from PyAnytimeLab.core.commands import EXIT_CONFIG, EXIT_IO, EXIT_OK
from PyAnytimeLab.core.paths import runs_examples_dir
from PyAnytimeLab.main import build_parser, main


MINIMAL = runs_examples_dir() / "minimal_simulate.json"


def test_simulate_from_cli(tmp_path):
    out = tmp_path / "out"
    assert main(["simulate", "--config", str(MINIMAL), "--out", str(out)]) == EXIT_OK
    assert (out / "manifest.json").exists()
    assert (out / "a1.5_b3" / "spectrum.csv").exists()


def test_existing_output_needs_overwrite(tmp_path):
    out = tmp_path / "out"
    argv = ["simulate", "--config", str(MINIMAL), "--out", str(out)]
    assert main(argv) == EXIT_OK
    assert main(argv) == EXIT_IO
    assert main(argv + ["--overwrite"]) == EXIT_OK


def test_missing_config_is_config_error(tmp_path):
    assert main(["simulate", "--config", str(tmp_path / "nope.json"), "--out", str(tmp_path / "out")]) == EXIT_CONFIG


def test_invalid_config_is_config_error(tmp_path):
    path = tmp_path / "bad.json"
    path.write_text(json.dumps({"schema_version": 1, "name": "bad"}), encoding="utf-8")
    assert main(["simulate", "--config", str(path), "--out", str(tmp_path / "out")]) == EXIT_CONFIG
    assert not (tmp_path / "out").exists()


def test_negative_jobs_rejected(tmp_path):
    assert main(["simulate", "--config", str(MINIMAL), "--out", str(tmp_path / "out"), "--jobs", "-1"]) == EXIT_CONFIG


def test_manifest_reruns(tmp_path):
    first = tmp_path / "first"
    assert main(["simulate", "--config", str(MINIMAL), "--out", str(first)]) == EXIT_OK
    second = tmp_path / "second"
    assert main(["simulate", "--config", str(first / "manifest.json"), "--out", str(second)]) == EXIT_OK
    first_csv = sorted(p.name for p in (first / "a1.5_b3").glob("*.csv"))
    second_csv = sorted(p.name for p in (second / "a1.5_b3").glob("*.csv"))
    assert first_csv == second_csv
    for name in first_csv:
        assert (first / "a1.5_b3" / name).read_bytes() == (second / "a1.5_b3" / name).read_bytes()


def test_parser_requires_command():
    with pytest.raises(SystemExit):
        build_parser().parse_args([])
