import copy
import json

import pytest

from PyAnytimeLab.core.paths import runs_examples_dir
from PyAnytimeLab.core.problem import build_spectrum
from PyAnytimeLab.core.run_config import (
    RunConfigError,
    config_hash,
    load_run_config,
    parse_run_config,
    save_run_config,
)
from PyAnytimeLab.core.schedule import COSINE, POLY_DECAY


def _doc(**overrides):
    doc = {
        "schema_version": 1,
        "name": "unit",
        "problem": {"dimension": 20, "capacity": 1.5, "source": 3.0, "noise_var": 0.01},
        "steps": 100,
        "checkpoints": [10, 100],
        "schedules": [{"kind": "constant", "lr_frac": 0.5}],
    }
    doc.update(overrides)
    return doc


class TestParse:
    def test_minimal(self):
        config = parse_run_config(_doc())
        assert config.name == "unit"
        assert config.problem.dimension == 20
        assert config.checkpoints == (10, 100)
        assert config.averaging == ()
        assert config.envelope is None
        assert config.validate.seeds == 200
        assert config.jobs is None

    def test_default_checkpoint_is_final_step(self):
        doc = _doc()
        del doc["checkpoints"]
        assert parse_run_config(doc).checkpoints == (100,)

    def test_lr_frac_resolves_against_trace(self):
        config = parse_run_config(_doc())
        spec = config.instances()[0]
        sched = config.schedules_for(spec)[0]
        assert sched.base_lr == pytest.approx(0.5 / build_spectrum(spec).trace_h)

    def test_horizon_kinds_default_to_run_length(self):
        config = parse_run_config(_doc(schedules=[{"kind": "cosine", "base_lr": 0.1}]))
        sched = config.schedules_for(config.problem)[0]
        assert sched.kind == COSINE
        assert sched.horizon == 100
        assert config.schedules_for(config.problem, horizon=400)[0].horizon == 400

    def test_grid_instances(self):
        problem = {
            "dimension": 20,
            "capacity": 1.5,
            "source": 3.0,
            "grid": [{"capacity": 1.1, "source": 2.2}, {"capacity": 1.9, "source": 3.8}],
        }
        config = parse_run_config(_doc(problem=problem))
        assert [(s.capacity, s.source) for s in config.instances()] == [(1.1, 2.2), (1.9, 3.8)]

    def test_manifest_is_accepted(self):
        doc = _doc()
        manifest = {"manifest_version": 1, "config": doc, "config_hash": config_hash(doc)}
        assert parse_run_config(manifest).config_hash == config_hash(doc)

    def test_sections(self):
        doc = _doc(
            averaging=[{"kind": "tail_fraction", "value": 0.5}, {"kind": "ema", "value": 12.5}],
            envelope={"horizons": [50, 100], "lr_fracs": [0.25, 0.5], "families": [{"kind": "poly_decay", "gamma": [0.5]}]},
            validate={"seeds": 10, "sigma_level": 4.0},
        )
        config = parse_run_config(doc)
        assert [a.label for a in config.averaging] == ["tail0.5", "ema12.5"]
        assert config.envelope.horizons == (50, 100)
        assert config.envelope.families[0]["kind"] == POLY_DECAY
        assert config.envelope.clip_to_stability
        assert config.validate.sigma_level == 4.0

    def test_rate_cases_inherit_problem_exponents(self):
        doc = _doc(rates={"horizons": [4, 8, 16, 32, 64], "cases": [{}]})
        case = parse_run_config(doc).rates.cases[0]
        assert (case.capacity, case.source) == (1.5, 3.0)
        assert case.schedule == "optimal_poly"
        assert case.tolerance == 0.1

    @pytest.mark.parametrize("path", sorted(runs_examples_dir().glob("*.json")), ids=lambda p: p.stem)
    def test_bundled_examples_parse(self, path):
        config = load_run_config(path)
        assert config.name


class TestErrors:
    @pytest.mark.parametrize(
        "overrides,match",
        [
            ({"schema_version": 2}, "run.schema_version must be 1"),
            ({"colour": "red"}, "run has unknown keys: colour"),
            ({"problem": {"dimension": 20, "capacity": 1.0, "source": 3.0}}, r"run.problem.capacity must be > 1 \(got 1.0\)"),
            ({"problem": {"dimension": 20, "capacity": 1.5, "source": 3.0, "d": 3}}, "run.problem has unknown keys: d"),
            ({"steps": -1}, "run.steps must be >= 0"),
            ({"steps": 2.5}, "run.steps must be an integer"),
            ({"checkpoints": [10, 5]}, "strictly increasing"),
            ({"checkpoints": [10, 500]}, r"must lie in \[0, 100\]"),
            ({"schedules": [{"kind": "constant"}]}, r"run.schedules\[0\] needs exactly one of base_lr or lr_frac"),
            ({"schedules": [{"kind": "constant", "base_lr": 0.1, "lr_frac": 0.5}]}, "exactly one of"),
            ({"schedules": [{"kind": "poly_decay", "lr_frac": 0.5, "gamma": 1.5}]}, r"run.schedules\[0\].gamma must be in \(0, 1\)"),
            ({"schedules": [{"kind": "cosine", "base_lr": 0.1, "horizon": 50}]}, r"horizon must be >= run.steps \(100\)"),
            ({"schedules": [{"kind": "explicit", "base_lr": 0.1, "table": [0.1] * 5}]}, r"run.schedules\[0\].table has 5 entries; it must cover run.steps \(100\)"),
            ({"schedules": [{"kind": "cosine", "base_lr": 0.1, "horizon": 100.5}]}, r"run.schedules\[0\].horizon must be an integer"),
            ({"averaging": [{"kind": "ema", "value": -1}]}, r"run.averaging\[0\]"),
            ({"jobs": 0}, "run.jobs must be >= 1"),
            ({"name": " "}, "run.name must be a non-empty string"),
            ({"start_at_optimum": "yes"}, "must be true or false"),
        ],
    )
    def test_messages(self, overrides, match):
        with pytest.raises(RunConfigError, match=match):
            parse_run_config(_doc(**overrides))

    @pytest.mark.parametrize(
        "section,match",
        [
            ({"horizons": [1, 10], "lr_fracs": [0.5]}, "horizons must be >= 2"),
            ({"horizons": [10, 20], "lr_fracs": [0.0]}, "lr_fracs must be > 0"),
            ({"horizons": [10, 20], "lr_fracs": [0.5], "rule": "median"}, "rule must be one of"),
            ({"horizons": [10, 20], "lr_fracs": [0.5], "families": [{"kind": "cosine"}]}, r"families\[0\].kind must be one of"),
            ({"horizons": [10, 20], "lr_fracs": [0.5], "families": [{"kind": "wsd", "decay_fracs": [1.0]}]}, "decay_fracs must be in"),
        ],
    )
    def test_envelope_messages(self, section, match):
        with pytest.raises(RunConfigError, match=match):
            parse_run_config(_doc(envelope=section))

    @pytest.mark.parametrize(
        "section,match",
        [
            ({"horizons": [4, 8, 16, 32], "cases": [{}]}, "at least 4 points"),
            ({"horizons": [4, 8, 16, 32, 64], "cases": []}, "cases must be a non-empty list"),
            ({"horizons": [4, 8, 16, 32, 64], "cases": [{"schedule": "cosine"}]}, "schedule must be one of"),
            ({"horizons": [4, 8, 16, 32, 64], "cases": [{"capacity": 2.5, "schedule": "wsd"}]}, r"capacity must be in \(1, 2\)"),
        ],
    )
    def test_rates_messages(self, section, match):
        with pytest.raises(RunConfigError, match=match):
            parse_run_config(_doc(rates=section))

    def test_validate_messages(self):
        with pytest.raises(RunConfigError, match="run.validate.seeds must be >= 2"):
            parse_run_config(_doc(validate={"seeds": 1}))
        with pytest.raises(RunConfigError, match="recursion_noise_scale must be >= 0"):
            parse_run_config(_doc(validate={"recursion_noise_scale": -1}))

    def test_invalid_json(self, tmp_path):
        path = tmp_path / "broken.json"
        path.write_text("{\n  \"schema_version\": 1,\n", encoding="utf-8")
        with pytest.raises(RunConfigError, match="broken.json: invalid JSON at line"):
            load_run_config(path)


class TestHash:
    def test_key_order_does_not_matter(self):
        doc = _doc()
        shuffled = dict(reversed(list(copy.deepcopy(doc).items())))
        assert config_hash(doc) == config_hash(shuffled)

    def test_values_matter(self):
        assert config_hash(_doc()) != config_hash(_doc(steps=101))

    def test_is_sha256_hex(self):
        value = config_hash(_doc())
        assert len(value) == 64
        int(value, 16)


def test_save_round_trips_through_validation(tmp_path):
    path = tmp_path / "saved" / "run.json"
    save_run_config(path, _doc())
    assert json.loads(path.read_text(encoding="utf-8"))["name"] == "unit"
    with pytest.raises(RunConfigError):
        save_run_config(tmp_path / "bad.json", _doc(steps=-1))
    assert not (tmp_path / "bad.json").exists()
