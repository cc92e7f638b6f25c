import math

import pytest

from PyAnytimeLab.core.averaging import EMA, TAIL_FRACTION, AveragingConfig
from PyAnytimeLab.core.envelope import (
    MIN_MAX,
    MIN_MEAN,
    PER_HORIZON_SUFFIX,
    Candidate,
    GapRow,
    SelectionError,
    anytime_candidates,
    anytime_hyperparameter_selection,
    branch_point,
    build_cosine_envelope,
    clip_lr_grid,
    envelope_risks,
    evaluate_anytime,
    family_gap_rows,
    long_horizon_cosine_risks,
    per_horizon_best,
    wsd_branches,
    wsd_candidates,
)
from PyAnytimeLab.core.problem import build_spectrum
from PyAnytimeLab.core.schedule import CONSTANT, COSINE, POLY_DECAY, WSD, Schedule, ScheduleError
from PyAnytimeLab.core.trajectory import run_trajectory


class TestCosineEnvelope:
    def test_single_grid_point_is_that_run(self, small_spec):
        envelope = build_cosine_envelope(small_spec, [100], [0.1])
        expected = run_trajectory(small_spec, Schedule(kind=COSINE, base_lr=0.1, horizon=100), 100).final()
        assert envelope[0].best_risk == expected
        assert envelope[0].best_averaging == "last"
        assert envelope[0].best_schedule["horizon"] == 100

    def test_best_over_grid(self, small_spec):
        lrs = [0.05, 0.1, 0.2]
        configs = [AveragingConfig(kind=TAIL_FRACTION, value=0.5)]
        envelope = build_cosine_envelope(small_spec, [50, 100], lrs, configs, floor_fracs=(0.0, 0.1))
        assert [p.horizon for p in envelope] == [50, 100]
        assert envelope[1].runs == 6
        for point in envelope:
            for lr in lrs:
                trace = run_trajectory(small_spec, Schedule(kind=COSINE, base_lr=lr, horizon=point.horizon), point.horizon, configs)
                assert point.best_risk <= min(trace.final(label) for label in trace.labels)

    def test_diverged_grid_points_are_counted(self, small_spec):
        envelope = build_cosine_envelope(small_spec, [50], [0.1, 1e8])
        assert envelope[0].diverged == 1
        assert envelope[0].best_schedule["base_lr"] == 0.1

    def test_independent_of_jobs(self, small_spec):
        serial = build_cosine_envelope(small_spec, [40, 80], [0.05, 0.1, 0.2], jobs=1)
        pooled = build_cosine_envelope(small_spec, [40, 80], [0.05, 0.1, 0.2], jobs=3)
        assert envelope_risks(serial) == envelope_risks(pooled)

    @pytest.mark.parametrize(
        "horizons,lrs,match",
        [([], [0.1], "non-empty"), ([100, 50], [0.1], "strictly increasing"), ([100], [], "lr grid")],
    )
    def test_rejects(self, small_spec, horizons, lrs, match):
        with pytest.raises(ValueError, match=match):
            build_cosine_envelope(small_spec, horizons, lrs)

    def test_long_horizon_run_read_early(self, small_spec):
        envelope = build_cosine_envelope(small_spec, [50, 100, 200], [0.05, 0.2])
        risks = long_horizon_cosine_risks(small_spec, envelope)
        assert sorted(risks) == [50, 100, 200]
        assert risks[200] == pytest.approx(envelope[-1].best_risk, rel=1e-12)

    def test_clip_lr_grid(self, unit_spec):
        template = Schedule(kind=CONSTANT, base_lr=0.1)
        assert clip_lr_grid(unit_spec, template, [1.0, 0.1, 2.0, 0.5]) == [0.1, 0.5]
        assert clip_lr_grid(unit_spec, template, [5.0, 3.0]) == [3.0]


class TestEvaluateAnytime:
    def test_one_trajectory_read_at_every_horizon(self, small_spec):
        sched = Schedule(kind=POLY_DECAY, base_lr=0.2, gamma=0.5)
        configs = [AveragingConfig(kind=TAIL_FRACTION, value=1.0), AveragingConfig(kind=EMA, value=12.5)]
        ev = evaluate_anytime(small_spec, sched, configs, [50, 100, 200])
        trace = run_trajectory(small_spec, sched, 200, configs, [50, 100, 200])
        assert ev.trajectories == 1
        assert ev.steps_run == 200
        for point in ev.points:
            for label in trace.labels:
                assert point.risks[label] == trace.at(point.horizon, label)
            assert point.best_risk == min(point.risks.values())

    def test_rejects_horizon_schedules(self, small_spec):
        with pytest.raises(ScheduleError, match="horizon-free"):
            evaluate_anytime(small_spec, Schedule(kind=COSINE, base_lr=0.1, horizon=100), (), [100])

    def test_divergence_marks_every_horizon(self, unit_spec):
        ev = evaluate_anytime(unit_spec, Schedule(kind=CONSTANT, base_lr=1.5), (), [10, 5000])
        assert ev.diverged
        assert all(math.isinf(p.best_risk) for p in ev.points)

    def test_whole_run_average_keeps_improving_under_noise(self, noisy_spec):
        spectrum = build_spectrum(noisy_spec)
        sched = Schedule(kind=CONSTANT, base_lr=0.5 / spectrum.trace_h)
        ev = evaluate_anytime(noisy_spec, sched, [AveragingConfig(kind=TAIL_FRACTION, value=1.0)], [200, 400, 800, 1600])
        risks = [p.risks["tail1"] for p in ev.points]
        assert all(b < a for a, b in zip(risks, risks[1:]))


class TestWsdBranches:
    def test_branch_point(self):
        assert branch_point(100, 0.5) == 50
        assert branch_point(10, 0.99) == 9
        assert branch_point(10, 0.01) == 1
        with pytest.raises(ScheduleError):
            branch_point(10, 1.0)
        with pytest.raises(ScheduleError):
            branch_point(1, 0.5)

    @pytest.mark.parametrize("floor", [0.0, 0.1])
    def test_bit_identical_to_separate_runs(self, small_spec, floor):
        spectrum = build_spectrum(small_spec)
        eta = 0.3 / spectrum.trace_h
        result = wsd_branches(small_spec, eta, [50, 100, 200], [0.5, 0.8], floor)
        assert result.trunk_steps == 160
        for (h, p), risk in result.risks.items():
            t0 = branch_point(h, p)
            sched = Schedule(kind=WSD, base_lr=eta, horizon=h, decay_start_frac=t0 / h, floor_frac=floor)
            assert risk == run_trajectory(small_spec, sched, h).final()

    def test_best_fraction_per_horizon(self, small_spec):
        result = wsd_branches(small_spec, 0.1, [50, 100], [0.5, 0.8])
        for h, (p, risk) in result.best.items():
            assert risk == min(result.risks_for(0.5)[h], result.risks_for(0.8)[h])
            assert result.risks[(h, p)] == risk

    def test_decay_beats_constant_under_noise(self, noisy_spec):
        spectrum = build_spectrum(noisy_spec)
        eta = 0.5 / spectrum.trace_h
        result = wsd_branches(noisy_spec, eta, [200, 400], [0.5])
        constant = run_trajectory(noisy_spec, Schedule(kind=CONSTANT, base_lr=eta), 400, checkpoints=[200, 400])
        for h in (200, 400):
            assert result.risks[(h, 0.5)] < constant.at(h)

    def test_diverged_trunk_gives_infinite_candidates(self, unit_spec):
        candidates = wsd_candidates(unit_spec, "wsd", [0.1, 1.5], [100, 1000], [0.5])
        assert len(candidates) == 2
        assert all(math.isfinite(r) for r in candidates[0].risks.values())
        assert all(math.isinf(r) for r in candidates[1].risks.values())
        assert candidates[0].label == "wsd_lr0.1_p0.5_f0|last"


def _candidate(label, risks, base_lr=0.1, shape=0.0):
    return Candidate(method="m", label=label, base_lr=base_lr, shape_param=shape, averaging="last", risks=risks)


class TestSelection:
    envelope = {10: 1.0, 20: 0.5}

    def test_single_candidate(self):
        only = _candidate("only", {10: 2.0, 20: 1.0})
        assert anytime_hyperparameter_selection([only], self.envelope) is only

    def test_mean_gap(self):
        a = _candidate("a", {10: 1.1, 20: 0.55})
        b = _candidate("b", {10: 1.0, 20: 0.65})
        c = _candidate("c", {10: 1.3, 20: 0.5})
        assert anytime_hyperparameter_selection([b, c, a], self.envelope).label == "a"

    def test_rules_differ(self):
        d = _candidate("d", {10: 1.0, 20: 0.6})
        e = _candidate("e", {10: 1.15, 20: 0.575})
        assert anytime_hyperparameter_selection([d, e], self.envelope, MIN_MEAN).label == "d"
        assert anytime_hyperparameter_selection([d, e], self.envelope, MIN_MAX).label == "e"

    def test_dominant_candidate_wins(self):
        dominant = _candidate("z", dict(self.envelope))
        others = [_candidate(str(k), {10: 1.0 + k, 20: 0.5 + k}) for k in (0.1, 0.2)]
        assert anytime_hyperparameter_selection([*others, dominant], self.envelope).label == "z"

    def test_ties_prefer_smaller_step_then_shape(self):
        risks = {10: 1.2, 20: 0.6}
        big = _candidate("big", risks, base_lr=0.2)
        small = _candidate("small", risks, base_lr=0.1, shape=0.5)
        smaller_shape = _candidate("small_shape", risks, base_lr=0.1, shape=0.25)
        assert anytime_hyperparameter_selection([big, small, smaller_shape], self.envelope).label == "small_shape"

    def test_diverged_candidates_lose(self):
        bad = _candidate("bad", {10: math.inf, 20: math.inf}, base_lr=0.01)
        ok = _candidate("ok", {10: 5.0, 20: 5.0})
        assert anytime_hyperparameter_selection([bad, ok], self.envelope).label == "ok"

    def test_rejects(self):
        with pytest.raises(SelectionError, match="no result at horizon 20"):
            anytime_hyperparameter_selection([_candidate("x", {10: 1.0})], self.envelope)
        with pytest.raises(SelectionError, match="no candidates"):
            anytime_hyperparameter_selection([], self.envelope)
        with pytest.raises(SelectionError, match="selection rule"):
            anytime_hyperparameter_selection([_candidate("x", {10: 1.0, 20: 1.0})], self.envelope, "median")
        with pytest.raises(SelectionError, match="finite and > 0"):
            anytime_hyperparameter_selection([_candidate("x", {10: 1.0})], {10: 0.0})

    def test_per_horizon_best(self):
        a = _candidate("a", {10: 1.1, 20: 0.55})
        b = _candidate("b", {10: 1.0, 20: 0.65})
        best = per_horizon_best([a, b], [10, 20])
        assert best[10].label == "b"
        assert best[20].label == "a"

    def test_family_gap_rows(self):
        a = _candidate("a", {10: 1.1, 20: 0.55})
        b = _candidate("b", {10: 1.0, 20: 0.65})
        chosen, rows = family_gap_rows("poly", [a, b], self.envelope)
        assert chosen.label == "a"
        assert [(r.method, r.horizon) for r in rows] == [
            ("poly", 10),
            ("poly", 20),
            ("poly" + PER_HORIZON_SUFFIX, 10),
            ("poly" + PER_HORIZON_SUFFIX, 20),
        ]
        assert rows[2].delta == 0.0
        assert rows[3].relative_delta == pytest.approx(0.1)


def test_gap_row():
    row = GapRow(horizon=10, method="m", risk=1.5, envelope=1.0)
    assert row.delta == 0.5
    assert row.relative_delta == 0.5


class TestEnvelopeDominance:
    """The cosine envelope lower-bounds constant-rate runs on the same step grid."""

    def test_noisy_instance(self, noisy_spec):
        spectrum = build_spectrum(noisy_spec)
        lrs = [f / spectrum.trace_h for f in (0.1, 0.3, 0.5)]
        horizons = [100, 200, 400]
        envelope = envelope_risks(build_cosine_envelope(noisy_spec, horizons, lrs))
        candidates = anytime_candidates(
            noisy_spec, "constant", [Schedule(kind=CONSTANT, base_lr=lr) for lr in lrs], (), horizons
        )
        assert len(candidates) == 3
        assert candidates[0].label.endswith("|last")
        for candidate in candidates:
            for h in horizons:
                assert envelope[h] <= candidate.risks[h]


class TestEnvelopeMonotonicity:
    """More steps with fresh tuning never hurt on a noise-dominated instance."""

    def test_best_risk_non_increasing_in_horizon(self, noisy_spec):
        spectrum = build_spectrum(noisy_spec)
        lrs = [f / spectrum.trace_h for f in (0.1, 0.3, 0.5)]
        horizons = [100, 200, 400, 800, 1600]
        configs = [AveragingConfig(kind=TAIL_FRACTION, value=0.5)]
        envelope = build_cosine_envelope(noisy_spec, horizons, lrs, configs, floor_fracs=(0.0, 0.1))
        risks = [p.best_risk for p in envelope]
        assert all(b <= a for a, b in zip(risks, risks[1:])), risks
