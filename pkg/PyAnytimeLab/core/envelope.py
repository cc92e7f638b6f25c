from __future__ import annotations

import logging
import math
from dataclasses import dataclass, field
from typing import Iterable, Sequence

from PyAnytimeLab.core.averaging import AveragingConfig
from PyAnytimeLab.core.jobs import run_ordered
from PyAnytimeLab.core.problem import ProblemSpec, build_spectrum
from PyAnytimeLab.core.recursion import DivergenceError, initial_state, weighted_total
from PyAnytimeLab.core.schedule import (
    CONSTANT,
    COSINE,
    WSD,
    Schedule,
    ScheduleError,
    schedule_to_dict,
)
from PyAnytimeLab.core.trajectory import StopCheck, advance, run_trajectory, stability_threshold


log = logging.getLogger(__name__)

MIN_MEAN = "min_mean"
MIN_MAX = "min_max"
SELECTION_RULES = (MIN_MEAN, MIN_MAX)

PER_HORIZON_SUFFIX = ":per_horizon"


class SelectionError(ValueError):
    pass


def _check_horizons(horizons: Sequence[int]) -> list[int]:
    points = [int(h) for h in horizons]
    if not points:
        raise ValueError("horizons must be a non-empty list")
    for prev, cur in zip(points, points[1:]):
        if cur <= prev:
            raise ValueError(f"horizons must be strictly increasing (got {prev} then {cur})")
    if points[0] < 1:
        raise ValueError(f"horizons must be >= 1 (got {points[0]})")
    return points


@dataclass(frozen=True)
class EnvelopePoint:
    horizon: int
    best_risk: float
    best_schedule: dict
    best_averaging: str
    runs: int
    diverged: int


def clip_lr_grid(
    spec: ProblemSpec,
    template: Schedule,
    lr_grid: Iterable[float],
    *,
    trial_steps: int = 500,
    iters: int = 12,
) -> list[float]:
    grid = sorted({float(lr) for lr in lr_grid})
    threshold = stability_threshold(spec, template, trial_steps=trial_steps, iters=iters)
    kept = [lr for lr in grid if lr <= threshold]
    if len(kept) < len(grid):
        log.info("lr grid clipped kind=%s threshold=%.6g kept=%d/%d", template.kind, threshold, len(kept), len(grid))
    if not kept:
        kept = [grid[0]]
    return kept


def _cosine_run(
    spec: ProblemSpec,
    sched: Schedule,
    averaging_grid: Sequence[AveragingConfig],
    should_stop: StopCheck | None,
) -> dict[str, float] | None:
    try:
        trace = run_trajectory(spec, sched, int(sched.horizon), averaging_grid, [int(sched.horizon)], should_stop=should_stop)
    except DivergenceError as exc:
        log.info("cosine run diverged label=%s step=%d", sched.label, exc.step)
        return None
    return {label: trace.final(label) for label in trace.labels}


def build_cosine_envelope(
    spec: ProblemSpec,
    horizons: Sequence[int],
    lr_grid: Sequence[float],
    averaging_grid: Sequence[AveragingConfig] = (),
    *,
    floor_fracs: Sequence[float] = (0.0,),
    warmup_frac: float = 0.0,
    jobs: int = 1,
    should_stop: StopCheck | None = None,
) -> list[EnvelopePoint]:
    points = _check_horizons(horizons)
    if not lr_grid:
        raise ValueError("envelope lr grid must be non-empty")
    if not floor_fracs:
        raise ValueError("envelope floor grid must be non-empty")

    grid = [
        Schedule(kind=COSINE, base_lr=float(lr), horizon=h, warmup_frac=float(warmup_frac), floor_frac=float(floor))
        for h in points
        for lr in lr_grid
        for floor in floor_fracs
    ]
    tasks = [lambda s=s: _cosine_run(spec, s, averaging_grid, should_stop) for s in grid]
    results = run_ordered(tasks, jobs)

    per_h = len(lr_grid) * len(floor_fracs)
    envelope: list[EnvelopePoint] = []
    for k, h in enumerate(points):
        best: tuple[float, Schedule, str] | None = None
        diverged = 0
        for sched, risks in zip(grid[k * per_h:(k + 1) * per_h], results[k * per_h:(k + 1) * per_h]):
            if risks is None:
                diverged += 1
                continue
            for label, risk in risks.items():
                if not math.isfinite(risk):
                    continue
                if best is None or risk < best[0]:
                    best = (risk, sched, label)
        if best is None:
            raise DivergenceError(f"every cosine grid point diverged at horizon {h}", step=h, lr=float(min(lr_grid)))
        envelope.append(
            EnvelopePoint(
                horizon=h,
                best_risk=best[0],
                best_schedule=schedule_to_dict(best[1]),
                best_averaging=best[2],
                runs=per_h,
                diverged=diverged,
            )
        )
        log.debug("envelope horizon=%d best=%.6e schedule=%s avg=%s", h, best[0], best[1].label, best[2])
    return envelope


def envelope_risks(envelope: Sequence[EnvelopePoint]) -> dict[int, float]:
    return {p.horizon: p.best_risk for p in envelope}


def long_horizon_cosine_risks(
    spec: ProblemSpec,
    envelope: Sequence[EnvelopePoint],
    averaging_grid: Sequence[AveragingConfig] = (),
) -> dict[int, float]:
    last = envelope[-1]
    doc = last.best_schedule
    sched = Schedule(
        kind=COSINE,
        base_lr=float(doc["base_lr"]),
        horizon=int(doc["horizon"]),
        warmup_frac=float(doc.get("warmup_frac", 0.0)),
        floor_frac=float(doc.get("floor_frac", 0.0)),
    )
    horizons = [p.horizon for p in envelope]
    trace = run_trajectory(spec, sched, horizons[-1], averaging_grid, horizons)
    return {h: trace.at(h, last.best_averaging) for h in horizons}


@dataclass(frozen=True)
class AnytimePoint:
    horizon: int
    best_risk: float
    best_averaging: str
    risks: dict[str, float]


@dataclass
class AnytimeEvaluation:
    schedule: dict
    points: list[AnytimePoint]
    trajectories: int = 1
    steps_run: int = 0
    diverged: bool = False

    def risks_for(self, label: str) -> dict[int, float]:
        return {p.horizon: p.risks[label] for p in self.points}


def evaluate_anytime(
    spec: ProblemSpec,
    sched: Schedule,
    averaging_grid: Sequence[AveragingConfig],
    horizons: Sequence[int],
    *,
    should_stop: StopCheck | None = None,
) -> AnytimeEvaluation:
    if sched.horizon_dependent:
        raise ScheduleError(
            f"evaluate_anytime needs a horizon-free schedule (got kind={sched.kind}); use wsd_branches for WSD"
        )
    points = _check_horizons(horizons)
    try:
        trace = run_trajectory(spec, sched, points[-1], averaging_grid, points, should_stop=should_stop)
    except DivergenceError as exc:
        log.info("anytime run diverged label=%s step=%d", sched.label, exc.step)
        labels = ["last", *(c.label for c in averaging_grid if c.label != "last")]
        inf = {label: math.inf for label in labels}
        return AnytimeEvaluation(
            schedule=schedule_to_dict(sched),
            points=[AnytimePoint(h, math.inf, "last", dict(inf)) for h in points],
            steps_run=exc.step,
            diverged=True,
        )

    out: list[AnytimePoint] = []
    for h in points:
        risks = {label: trace.at(h, label) for label in trace.labels}
        best_label = min(risks, key=lambda k: (risks[k], k))
        out.append(AnytimePoint(horizon=h, best_risk=risks[best_label], best_averaging=best_label, risks=risks))
    return AnytimeEvaluation(schedule=schedule_to_dict(sched), points=out, steps_run=trace.steps_run)


@dataclass
class WsdBranchResult:
    base_lr: float
    floor_frac: float
    risks: dict[tuple[int, float], float]
    best: dict[int, tuple[float, float]] = field(default_factory=dict)
    trunk_steps: int = 0

    def risks_for(self, p: float) -> dict[int, float]:
        return {h: r for (h, q), r in self.risks.items() if q == p}


def branch_point(horizon: int, p: float) -> int:
    if not (0.0 < p < 1.0):
        raise ScheduleError(f"decay fraction p must be in (0, 1) (got {p})")
    if horizon < 2:
        raise ScheduleError(f"horizon {horizon} leaves no room for a decay phase")
    return min(max(1, round(p * horizon)), horizon - 1)


def wsd_branches(
    spec: ProblemSpec,
    eta: float,
    horizons: Sequence[int],
    decay_fracs: Sequence[float],
    floor_frac: float = 0.0,
    *,
    should_stop: StopCheck | None = None,
) -> WsdBranchResult:
    """Share one constant-η trunk and decay linearly from p·N_h to every horizon N_h.

    Last iterate only. Branches are bit-identical to running each WSD
    schedule from scratch.
    """
    points = _check_horizons(horizons)
    if not decay_fracs:
        raise ValueError("decay_fracs must be non-empty")
    spectrum = build_spectrum(spec)
    noise_var = float(spec.noise_var)

    starts = {(h, float(p)): branch_point(h, float(p)) for h in points for p in decay_fracs}
    trunk_end = max(starts.values())
    trunk = Schedule(kind=CONSTANT, base_lr=float(eta))
    _end, snaps = advance(
        initial_state(spectrum), spectrum, trunk, trunk_end, noise_var,
        snapshots=set(starts.values()), should_stop=should_stop,
    )

    result = WsdBranchResult(base_lr=float(eta), floor_frac=float(floor_frac), risks={}, trunk_steps=trunk_end)
    for (h, p), t0 in starts.items():
        sched = Schedule(kind=WSD, base_lr=float(eta), horizon=h, decay_start_frac=t0 / h, floor_frac=float(floor_frac))
        final, _ = advance(snaps[t0], spectrum, sched, h, noise_var, should_stop=should_stop)
        result.risks[(h, p)] = 0.5 * weighted_total(spectrum.eigenvalues, final.m)

    for h in points:
        p_best = min((float(p) for p in decay_fracs), key=lambda p: (result.risks[(h, p)], p))
        result.best[h] = (p_best, result.risks[(h, p_best)])
    return result


@dataclass(frozen=True)
class Candidate:
    method: str
    label: str
    base_lr: float
    shape_param: float
    averaging: str
    risks: dict[int, float]
    schedule: dict = field(default_factory=dict)


def relative_gaps(risks: dict[int, float], envelope: dict[int, float]) -> dict[int, float]:
    return {h: (risks[h] - envelope[h]) / envelope[h] for h in envelope}


def _score(candidate: Candidate, envelope: dict[int, float], rule: str) -> float:
    missing = [h for h in envelope if h not in candidate.risks]
    if missing:
        raise SelectionError(f"candidate {candidate.label} has no result at horizon {missing[0]}")
    gaps = list(relative_gaps(candidate.risks, envelope).values())
    if any(not math.isfinite(g) for g in gaps):
        return math.inf
    if rule == MIN_MEAN:
        return math.fsum(gaps) / len(gaps)
    return max(gaps)


def anytime_hyperparameter_selection(
    candidates: Sequence[Candidate],
    envelope: dict[int, float],
    rule: str = MIN_MEAN,
) -> Candidate:
    """Config with the best mean (or worst-case) relative gap to the envelope.

    Ties go to the smaller base step size, then the smaller γ/α, then the label.
    """
    if rule not in SELECTION_RULES:
        raise SelectionError(f"selection rule must be one of {', '.join(SELECTION_RULES)} (got {rule!r})")
    if not candidates:
        raise SelectionError("no candidates to select from")
    if not envelope:
        raise SelectionError("envelope is empty")
    for h, risk in envelope.items():
        if not (math.isfinite(risk) and risk > 0.0):
            raise SelectionError(f"envelope risk at horizon {h} must be finite and > 0 (got {risk})")

    scored = [(_score(c, envelope, rule), c.base_lr, c.shape_param, c.label, c) for c in candidates]
    best = min(scored, key=lambda row: row[:4])
    if not math.isfinite(best[0]):
        log.warning("every candidate diverged or is missing results; picking %s", best[3])
    return best[4]


def per_horizon_best(candidates: Sequence[Candidate], horizons: Iterable[int]) -> dict[int, Candidate]:
    out = {}
    for h in horizons:
        out[h] = min(candidates, key=lambda c: (c.risks.get(h, math.inf), c.base_lr, c.shape_param, c.label))
    return out


@dataclass(frozen=True)
class GapRow:
    horizon: int
    method: str
    risk: float
    envelope: float

    @property
    def delta(self) -> float:
        return self.risk - self.envelope

    @property
    def relative_delta(self) -> float:
        return self.delta / self.envelope


def gap_rows(method: str, risks: dict[int, float], envelope: dict[int, float]) -> list[GapRow]:
    return [GapRow(horizon=h, method=method, risk=float(risks[h]), envelope=float(envelope[h])) for h in sorted(envelope)]


def family_gap_rows(method: str, candidates: Sequence[Candidate], envelope: dict[int, float], rule: str = MIN_MEAN) -> tuple[Candidate, list[GapRow]]:
    chosen = anytime_hyperparameter_selection(candidates, envelope, rule)
    rows = gap_rows(method, chosen.risks, envelope)
    best = per_horizon_best(candidates, envelope)
    rows.extend(gap_rows(method + PER_HORIZON_SUFFIX, {h: c.risks[h] for h, c in best.items()}, envelope))
    return chosen, rows


def anytime_candidates(
    spec: ProblemSpec,
    method: str,
    schedules: Sequence[Schedule],
    averaging_grid: Sequence[AveragingConfig],
    horizons: Sequence[int],
    *,
    jobs: int = 1,
    should_stop: StopCheck | None = None,
) -> list[Candidate]:
    tasks = [lambda s=s: evaluate_anytime(spec, s, averaging_grid, horizons, should_stop=should_stop) for s in schedules]
    evaluations = run_ordered(tasks, jobs)
    out = []
    for sched, ev in zip(schedules, evaluations):
        for label in ev.points[0].risks:
            out.append(
                Candidate(
                    method=method,
                    label=f"{sched.label}|{label}",
                    base_lr=float(sched.base_lr),
                    shape_param=sched.shape_param,
                    averaging=label,
                    risks=ev.risks_for(label),
                    schedule=ev.schedule,
                )
            )
    return out


def wsd_candidates(
    spec: ProblemSpec,
    method: str,
    lr_grid: Sequence[float],
    horizons: Sequence[int],
    decay_fracs: Sequence[float],
    floor_frac: float = 0.0,
    *,
    jobs: int = 1,
    should_stop: StopCheck | None = None,
) -> list[Candidate]:
    def run(lr: float) -> WsdBranchResult | None:
        try:
            return wsd_branches(spec, lr, horizons, decay_fracs, floor_frac, should_stop=should_stop)
        except DivergenceError as exc:
            log.info("wsd trunk diverged lr=%.6g step=%d", lr, exc.step)
            return None

    results = run_ordered([lambda lr=lr: run(float(lr)) for lr in lr_grid], jobs)
    out = []
    for lr, res in zip(lr_grid, results):
        for p in decay_fracs:
            risks = res.risks_for(float(p)) if res is not None else {int(h): math.inf for h in horizons}
            out.append(
                Candidate(
                    method=method,
                    label=f"wsd_lr{float(lr):.6g}_p{float(p):g}_f{float(floor_frac):g}|last",
                    base_lr=float(lr),
                    shape_param=float(p),
                    averaging="last",
                    risks=risks,
                    schedule={"kind": WSD, "base_lr": float(lr), "decay_start_frac": float(p), "floor_frac": float(floor_frac)},
                )
            )
    return out
