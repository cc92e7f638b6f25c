import json
from dataclasses import replace

import pytest

from PyAnytimeLab.core.commands import (
    EXIT_CANCELLED,
    EXIT_CONFIG,
    EXIT_DIVERGED,
    EXIT_FAILED,
    EXIT_IO,
    EXIT_OK,
    CommandContext,
    instance_name,
    run_command,
)
from PyAnytimeLab.core.problem import ProblemSpec
from PyAnytimeLab.core.run_config import parse_run_config


def _doc(**overrides):
    doc = {
        "schema_version": 1,
        "name": "cmd",
        "problem": {"dimension": 20, "capacity": 1.5, "source": 3.0, "noise_var": 0.01},
        "steps": 100,
        "checkpoints": [10, 100],
        "schedules": [{"kind": "constant", "lr_frac": 0.5}],
    }
    doc.update(overrides)
    return doc


def _run(command, doc, out_dir, **ctx):
    return run_command(command, parse_run_config(doc), CommandContext(out_dir=out_dir, **ctx))


def _manifest(out_dir):
    return json.loads((out_dir / "manifest.json").read_text(encoding="utf-8"))


def test_instance_name():
    assert instance_name(ProblemSpec(dimension=3, capacity=1.5, source=3.0)) == "a1.5_b3"


class TestSimulate:
    def test_minimal_outputs(self, tmp_path):
        out = tmp_path / "out"
        result = _run("simulate", _doc(), out)
        assert result.exit_code == EXIT_OK
        inst = out / "a1.5_b3"
        traces = sorted(inst.glob("constant_lr*.csv"))
        assert len(traces) == 1
        lines = traces[0].read_text(encoding="utf-8").split("\n")
        assert lines[0] == "step,lr,excess_last"
        assert lines[1].startswith("0,nan,")
        assert [line.split(",")[0] for line in lines[1:] if line] == ["0", "10", "100"]
        assert (inst / "spectrum.csv").exists()
        assert (inst / "traces.svg").exists()
        manifest = _manifest(out)
        assert manifest["status"] == "ok"
        assert manifest["command"] == "simulate"
        assert "a1.5_b3/spectrum.csv" in manifest["files"]

    def test_one_file_per_averaging_label(self, tmp_path):
        doc = _doc(averaging=[{"kind": "tail_fraction", "value": 0.5}, {"kind": "ema", "value": 12.5}])
        _run("simulate", doc, tmp_path / "out")
        names = sorted(p.name for p in (tmp_path / "out" / "a1.5_b3").glob("*__*.csv"))
        assert len(names) == 2
        assert names[0].endswith("__ema12.5.csv")
        assert names[1].endswith("__tail0.5.csv")
        header = (tmp_path / "out" / "a1.5_b3" / names[0]).read_text(encoding="utf-8").split("\n")[0]
        assert header == "step,lr,excess_last,excess_ema12.5"

    def test_reruns_are_byte_identical(self, tmp_path):
        doc = _doc(schedules=[{"kind": "constant", "lr_frac": 0.5}, {"kind": "wsd", "lr_frac": 0.5, "decay_start_frac": 0.8}])
        _run("simulate", doc, tmp_path / "a")
        _run("simulate", doc, tmp_path / "b", jobs=2)
        first = sorted(p.relative_to(tmp_path / "a") for p in (tmp_path / "a").rglob("*") if p.is_file() and p.name != "manifest.json")
        second = sorted(p.relative_to(tmp_path / "b") for p in (tmp_path / "b").rglob("*") if p.is_file() and p.name != "manifest.json")
        assert first == second
        for rel in first:
            assert (tmp_path / "a" / rel).read_bytes() == (tmp_path / "b" / rel).read_bytes(), rel

    def test_grid_writes_one_directory_per_instance(self, tmp_path):
        problem = {
            "dimension": 20,
            "capacity": 1.5,
            "source": 3.0,
            "grid": [{"capacity": 1.1, "source": 2.2}, {"capacity": 1.9, "source": 3.8}],
        }
        _run("simulate", _doc(problem=problem), tmp_path / "out")
        assert (tmp_path / "out" / "a1.1_b2.2" / "spectrum.csv").exists()
        assert (tmp_path / "out" / "a1.9_b3.8" / "spectrum.csv").exists()

    def test_non_empty_output_needs_overwrite(self, tmp_path):
        out = tmp_path / "out"
        out.mkdir()
        (out / "stale.txt").write_text("x", encoding="utf-8")
        assert _run("simulate", _doc(), out).exit_code == EXIT_IO
        assert (out / "stale.txt").exists()
        assert _run("simulate", _doc(), out, overwrite=True).exit_code == EXIT_OK
        assert not (out / "stale.txt").exists()

    def test_divergence(self, tmp_path):
        doc = _doc(schedules=[{"kind": "constant", "base_lr": 100.0}, {"kind": "constant", "lr_frac": 0.5}])
        result = _run("simulate", doc, tmp_path / "out")
        assert result.exit_code == EXIT_DIVERGED
        manifest = _manifest(tmp_path / "out")
        assert manifest["status"] == "diverged"
        assert [run["status"] for run in manifest["runs"]] == ["diverged", "ok"]

    def test_cancellation(self, tmp_path):
        result = _run("simulate", _doc(steps=1000, checkpoints=[1000]), tmp_path / "out", should_stop=lambda: True)
        assert result.exit_code == EXIT_CANCELLED
        assert _manifest(tmp_path / "out")["status"] == "cancelled"

    def test_manifest_reparses_to_same_config(self, tmp_path):
        doc = _doc()
        _run("simulate", doc, tmp_path / "out")
        manifest = _manifest(tmp_path / "out")
        assert parse_run_config(manifest).config_hash == parse_run_config(doc).config_hash == manifest["config_hash"]

    def test_unknown_command(self, tmp_path):
        with pytest.raises(ValueError, match="unknown command"):
            _run("plot", _doc(), tmp_path / "out")

    def test_domain_error_inside_command_is_config_error(self, tmp_path):
        config = parse_run_config(_doc())
        short = replace(config, schedules=({"kind": "explicit", "base_lr": 0.1, "table": [0.1] * 5},))
        result = run_command("simulate", short, CommandContext(out_dir=tmp_path / "out"))
        assert result.exit_code == EXIT_CONFIG
        manifest = _manifest(tmp_path / "out")
        assert manifest["status"] == "config_error"
        assert "exceeds schedule horizon" in manifest["notes"]["config_error"]


class TestValidate:
    def test_zero_steps(self, tmp_path):
        doc = _doc(steps=0)
        del doc["checkpoints"]
        assert _run("validate", doc, tmp_path / "out").exit_code == EXIT_OK

    def test_recursion_matches_sgd(self, tmp_path):
        doc = _doc(
            problem={"dimension": 10, "capacity": 1.5, "source": 3.0, "noise_var": 0.01},
            steps=200,
            checkpoints=[50, 100, 200],
            averaging=[{"kind": "tail_fraction", "value": 1.0}, {"kind": "ema", "value": 12.5}],
            validate={"seeds": 400},
        )
        out = tmp_path / "out"
        result = _run("validate", doc, out)
        assert result.exit_code == EXIT_OK
        lines = (out / "validation.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "instance,schedule,averaging,step,recursion,mc_mean,mc_stderr,z,pass"
        assert len(lines) == 1 + 3 * 4
        assert all(line.endswith(",true") for line in lines[1:])
        assert len(list((out / "a1.5_b3").glob("*__monte_carlo.csv"))) == 1
        assert len(list((out / "a1.5_b3").glob("*__recursion.csv"))) == 1

    def test_negative_control_fails(self, tmp_path):
        doc = _doc(
            problem={"dimension": 10, "capacity": 1.5, "source": 3.0, "noise_var": 1.0},
            steps=100,
            checkpoints=[50, 100],
            start_at_optimum=True,
            validate={"seeds": 50, "recursion_noise_scale": 0.0},
        )
        result = _run("validate", doc, tmp_path / "out")
        assert result.exit_code == EXIT_FAILED
        assert _manifest(tmp_path / "out")["status"] == "failed"


class TestRates:
    @staticmethod
    def _rates_doc(tolerance):
        return _doc(
            problem={"dimension": 500, "capacity": 1.5, "source": 3.0, "noise_var": 0.01},
            steps=0,
            checkpoints=None,
            schedules=[],
            rates={
                "horizons": [16, 32, 64, 128, 256, 512],
                "tolerance": tolerance,
                "cases": [{}, {"capacity": 1.5, "source": 1.5, "schedule": "wsd"}],
            },
        )

    def test_outputs_with_generous_tolerance(self, tmp_path):
        out = tmp_path / "out"
        assert _run("rates", self._rates_doc(10.0), out).exit_code == EXIT_OK
        lines = (out / "rates.csv").read_text(encoding="utf-8").splitlines()
        assert lines[0] == "a,b,schedule,gamma,predicted_exponent,fitted_exponent,r2,tolerance,pass,bound_ratio"
        assert lines[1].split(",")[2] == "optimal_poly"
        assert lines[2].split(",")[2] == "wsd"
        assert all(line.split(",")[8] == "true" for line in lines[1:])
        points = (out / "rate_points.csv").read_text(encoding="utf-8").splitlines()
        assert len(points) == 1 + 2 * 6

    def test_zero_tolerance_fails(self, tmp_path):
        result = _run("rates", self._rates_doc(0.0), tmp_path / "out")
        assert result.exit_code == EXIT_FAILED

    def test_missing_section(self, tmp_path):
        result = _run("rates", _doc(), tmp_path / "out")
        assert result.exit_code == EXIT_CONFIG
        assert _manifest(tmp_path / "out")["status"] == "config_error"


class TestEnvelope:
    def test_outputs(self, tmp_path):
        doc = _doc(
            problem={"dimension": 50, "capacity": 1.5, "source": 1.5, "noise_var": 0.01},
            steps=0,
            checkpoints=None,
            schedules=[],
            envelope={
                "horizons": [20, 40, 80],
                "lr_fracs": [0.25, 0.5],
                "families": [
                    {"kind": "constant"},
                    {"kind": "poly_decay", "gamma": [0.5]},
                    {"kind": "wsd", "decay_fracs": [0.5]},
                ],
            },
        )
        out = tmp_path / "out"
        assert _run("envelope", doc, out).exit_code == EXIT_OK
        inst = out / "a1.5_b1.5"
        envelope = (inst / "envelope.csv").read_text(encoding="utf-8").splitlines()
        assert envelope[0] == "horizon,best_risk,base_lr,floor_frac,warmup_frac,averaging,runs,diverged"
        assert len(envelope) == 4
        gap = (inst / "gap.csv").read_text(encoding="utf-8").splitlines()
        assert gap[0] == "horizon,method,risk,envelope,delta,relative_delta"
        methods = {line.split(",")[1] for line in gap[1:]}
        assert methods == {
            "constant",
            "constant:per_horizon",
            "poly_decay",
            "poly_decay:per_horizon",
            "wsd",
            "wsd:per_horizon",
        }
        assert len(gap) == 1 + 6 * 3
        assert (inst / "figure.svg").exists()
        manifest = _manifest(out)
        assert manifest["notes"]["envelope_grid"]["lr_fracs"] == [0.25, 0.5]
        assert set(manifest["runs"][0]["selections"]) == {"constant", "poly_decay", "wsd"}

    def test_missing_section(self, tmp_path):
        assert _run("envelope", _doc(), tmp_path / "out").exit_code == EXIT_CONFIG
