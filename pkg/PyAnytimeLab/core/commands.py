from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field, replace
from pathlib import Path
from typing import Callable

from PyAnytimeLab import __version__
from PyAnytimeLab.core.averaging import TAIL_FRACTION, AveragingConfig, AveragingError
from PyAnytimeLab.core.empirical import corrected_threshold, monte_carlo_risk, z_scores
from PyAnytimeLab.core.envelope import (
    SelectionError,
    anytime_candidates,
    build_cosine_envelope,
    clip_lr_grid,
    envelope_risks,
    family_gap_rows,
    long_horizon_cosine_risks,
    wsd_branches,
    wsd_candidates,
)
from PyAnytimeLab.core.figures import write_gap_figure, write_trace_figure
from PyAnytimeLab.core.jobs import run_ordered
from PyAnytimeLab.core.outputs import OutputExistsError, RunManifest, git_describe, prepare_output_dir, utc_now, write_table
from PyAnytimeLab.core.problem import ProblemSpec, ProblemValidationError, build_spectrum, write_spectrum_csv
from PyAnytimeLab.core.recursion import DivergenceError
from PyAnytimeLab.core.run_config import RateCase, RunConfig, RunConfigError
from PyAnytimeLab.core.schedule import CONSTANT, COSINE, POLY_DECAY, SQRT_ALPHA, WSD, Schedule, ScheduleError
from PyAnytimeLab.core.settings import DEFAULT_SETTINGS, AppSettings
from PyAnytimeLab.core.theory import (
    TheoryDomainError,
    decay_bound,
    fit_rate_exponent,
    gamma_star,
    predicted_rate,
    wsd_bound,
)
from PyAnytimeLab.core.trajectory import RunCancelled, StopCheck, run_trajectory


log = logging.getLogger(__name__)

EXIT_OK = 0
EXIT_FAILED = 1
EXIT_CONFIG = 2
EXIT_DIVERGED = 3
EXIT_IO = 4
EXIT_CANCELLED = 130

COMMANDS = ("simulate", "envelope", "rates", "validate")


@dataclass
class CommandContext:
    out_dir: Path
    jobs: int = 1
    overwrite: bool = False
    settings: AppSettings = DEFAULT_SETTINGS
    should_stop: StopCheck | None = None


@dataclass
class CommandResult:
    command: str
    exit_code: int
    out_dir: Path
    manifest: RunManifest | None = None
    summary: dict = field(default_factory=dict)


def instance_name(spec: ProblemSpec) -> str:
    return f"a{spec.capacity:g}_b{spec.source:g}"


def cmd_simulate(config: RunConfig, ctx: CommandContext, manifest: RunManifest) -> int:
    if not config.schedules:
        raise RunConfigError("run.schedules must list at least one schedule for simulate")
    labels = [c.label for c in config.averaging if c.label != "last"]
    diverged = 0

    for spec in config.instances():
        inst = instance_name(spec)
        inst_dir = ctx.out_dir / inst
        write_spectrum_csv(inst_dir / "spectrum.csv", build_spectrum(spec))
        schedules = config.schedules_for(spec)

        def run(sched: Schedule, spec: ProblemSpec = spec):
            try:
                return run_trajectory(
                    spec, sched, config.steps, config.averaging, config.checkpoints,
                    start_at_optimum=config.start_at_optimum, should_stop=ctx.should_stop,
                )
            except DivergenceError as exc:
                return exc

        results = run_ordered([lambda s=s: run(s) for s in schedules], ctx.jobs)
        curves: dict[str, tuple[list[int], list[float]]] = {}
        for sched, trace in zip(schedules, results):
            name = f"{inst}/{sched.label}"
            if isinstance(trace, DivergenceError):
                diverged += 1
                log.error("run diverged %s: %s", name, trace)
                manifest.record(name, "diverged", step=trace.step, lr=trace.lr)
                continue
            if labels:
                for label in labels:
                    trace.select([label]).write_csv(inst_dir / f"{sched.label}__{label}.csv")
            else:
                trace.write_csv(inst_dir / f"{sched.label}.csv")
            for label in trace.labels:
                curves[f"{sched.label}:{label}"] = (trace.steps, trace.columns[label])
            manifest.record(name, "ok", final_risk=trace.final("last"), steps=trace.steps_run)
        if curves:
            write_trace_figure(inst_dir / "traces.svg", inst, curves)

    return EXIT_DIVERGED if diverged else EXIT_OK


def _clipped(spec: ProblemSpec, template: Schedule, grid: list[float], config: RunConfig, ctx: CommandContext) -> list[float]:
    if not config.envelope.clip_to_stability:
        return grid
    return clip_lr_grid(
        spec, template, grid,
        trial_steps=ctx.settings.stability_trial_steps,
        iters=ctx.settings.stability_bisection_iters,
    )


def _family_candidates(spec: ProblemSpec, family: dict, lr_grid: list[float], config: RunConfig, ctx: CommandContext):
    env = config.envelope
    kind = family["kind"]
    if kind == WSD:
        grid = _clipped(spec, Schedule(kind=CONSTANT, base_lr=lr_grid[0]), lr_grid, config, ctx)
        return wsd_candidates(
            spec, WSD, grid, env.horizons, family["decay_fracs"], float(family.get("floor_frac", 0.0)),
            jobs=ctx.jobs, should_stop=ctx.should_stop,
        )

    if kind == POLY_DECAY:
        templates = [Schedule(kind=POLY_DECAY, base_lr=lr_grid[0], gamma=float(g)) for g in family["gamma"]]
    elif kind == SQRT_ALPHA:
        templates = [Schedule(kind=SQRT_ALPHA, base_lr=lr_grid[0], alpha=float(a)) for a in family["alpha"]]
    else:
        templates = [Schedule(kind=CONSTANT, base_lr=lr_grid[0])]

    schedules = [
        replace(t, base_lr=lr)
        for t in templates
        for lr in _clipped(spec, t, lr_grid, config, ctx)
    ]
    return anytime_candidates(
        spec, kind, schedules, config.averaging, env.horizons, jobs=ctx.jobs, should_stop=ctx.should_stop
    )


def cmd_envelope(config: RunConfig, ctx: CommandContext, manifest: RunManifest) -> int:
    env = config.envelope
    if env is None:
        raise RunConfigError("run.envelope is required for the envelope command")

    for spec in config.instances():
        inst = instance_name(spec)
        inst_dir = ctx.out_dir / inst
        inv_trace = 1.0 / build_spectrum(spec).trace_h
        lr_grid = sorted(f * inv_trace for f in env.lr_fracs)

        cosine_grid = _clipped(spec, Schedule(kind=COSINE, base_lr=lr_grid[0], horizon=2), lr_grid, config, ctx)
        envelope = build_cosine_envelope(
            spec, env.horizons, cosine_grid, config.averaging,
            floor_fracs=env.floor_fracs, warmup_frac=env.warmup_frac,
            jobs=ctx.jobs, should_stop=ctx.should_stop,
        )
        write_table(
            inst_dir / "envelope.csv",
            ["horizon", "best_risk", "base_lr", "floor_frac", "warmup_frac", "averaging", "runs", "diverged"],
            (
                [p.horizon, p.best_risk, float(p.best_schedule["base_lr"]), float(p.best_schedule["floor_frac"]),
                 float(p.best_schedule["warmup_frac"]), p.best_averaging, p.runs, p.diverged]
                for p in envelope
            ),
        )
        env_risks = envelope_risks(envelope)

        long_risks = long_horizon_cosine_risks(spec, envelope, config.averaging)
        violations = [h for h in env.horizons if env_risks[h] > long_risks[h] * (1.0 + 1e-12)]
        if violations:
            log.warning("%s: envelope above the long-horizon cosine at horizons %s", inst, violations)

        rows = []
        chosen_risks: dict[str, dict[int, float]] = {}
        selections: dict[str, str] = {}
        seen: dict[str, int] = {}
        for family in env.families:
            method = family["kind"]
            seen[method] = seen.get(method, 0) + 1
            if seen[method] > 1:
                method = f"{method}{seen[method]}"
            candidates = _family_candidates(spec, family, lr_grid, config, ctx)
            chosen, family_rows = family_gap_rows(method, candidates, env_risks, env.rule)
            rows.extend(family_rows)
            chosen_risks[method] = chosen.risks
            selections[method] = chosen.label
            log.info("%s: %s selected %s", inst, method, chosen.label)

        write_table(
            inst_dir / "gap.csv",
            ["horizon", "method", "risk", "envelope", "delta", "relative_delta"],
            ([r.horizon, r.method, r.risk, r.envelope, r.delta, r.relative_delta] for r in rows),
        )
        write_gap_figure(inst_dir / "figure.svg", inst, env_risks, chosen_risks)
        manifest.record(inst, "ok", selections=selections, envelope_violations=violations)

    manifest.notes["envelope_grid"] = {
        "lr_fracs": list(env.lr_fracs),
        "floor_fracs": list(env.floor_fracs),
        "rule": env.rule,
    }
    return EXIT_OK


@dataclass(frozen=True)
class RateRow:
    case: RateCase
    gamma: float
    predicted: float
    fitted: float
    r2: float
    passed: bool
    bound_ratio: float
    horizons: tuple[int, ...]
    risks: tuple[float, ...]


def _rate_case(case: RateCase, config: RunConfig, ctx: CommandContext) -> RateRow:
    rates = config.rates
    spec = replace(config.problem, capacity=case.capacity, source=case.source)
    eta = rates.lr_frac / build_spectrum(spec).trace_h
    horizons = list(rates.horizons)
    whole_run = AveragingConfig(kind=TAIL_FRACTION, value=1.0)
    bound_ratio = math.nan

    if case.schedule == "wsd":
        gamma = 0.0
        branches = wsd_branches(spec, eta, horizons, [case.decay_start_frac], 0.0, should_stop=ctx.should_stop)
        risks = [branches.risks[(h, case.decay_start_frac)] for h in horizons]
        bound = wsd_bound(case.capacity, case.source, horizons[-1], spec.noise_var)
        predicted = min(bound.bias_exponent, bound.variance_exponent)
    else:
        gamma = gamma_star(case.capacity, case.source) if case.schedule == "optimal_poly" else 0.0
        if gamma > 0.0:
            sched = Schedule(kind=POLY_DECAY, base_lr=eta, gamma=gamma)
        else:
            sched = Schedule(kind=CONSTANT, base_lr=eta)
        trace = run_trajectory(spec, sched, horizons[-1], [whole_run], horizons, should_stop=ctx.should_stop)
        risks = [trace.at(h, whole_run.label) for h in horizons]
        predicted = predicted_rate(case.capacity, case.source)
        if gamma > 0.0:
            bound = decay_bound(spec, eta, gamma, horizons[-1])
            if bound.total > 0.0:
                bound_ratio = risks[-1] / bound.total

    k = rates.exclude_smallest
    fit = fit_rate_exponent(horizons[k:], risks[k:])
    passed = abs(fit.exponent - predicted) <= case.tolerance
    log.info(
        "rate a=%g b=%g schedule=%s predicted=%.4f fitted=%.4f r2=%.4f %s",
        case.capacity, case.source, case.schedule, predicted, fit.exponent, fit.r2, "pass" if passed else "FAIL",
    )
    return RateRow(
        case=case,
        gamma=gamma,
        predicted=predicted,
        fitted=fit.exponent,
        r2=fit.r2,
        passed=passed,
        bound_ratio=bound_ratio,
        horizons=tuple(horizons),
        risks=tuple(risks),
    )


def cmd_rates(config: RunConfig, ctx: CommandContext, manifest: RunManifest) -> int:
    if config.rates is None:
        raise RunConfigError("run.rates is required for the rates command")
    try:
        results = run_ordered([lambda c=c: _rate_case(c, config, ctx) for c in config.rates.cases], ctx.jobs)
    except TheoryDomainError as exc:
        raise RunConfigError(f"run.rates: {exc}") from None

    write_table(
        ctx.out_dir / "rates.csv",
        ["a", "b", "schedule", "gamma", "predicted_exponent", "fitted_exponent", "r2", "tolerance", "pass", "bound_ratio"],
        (
            [r.case.capacity, r.case.source, r.case.schedule, r.gamma, r.predicted, r.fitted, r.r2,
             r.case.tolerance, r.passed, r.bound_ratio]
            for r in results
        ),
    )
    write_table(
        ctx.out_dir / "rate_points.csv",
        ["a", "b", "schedule", "horizon", "risk"],
        (
            [r.case.capacity, r.case.source, r.case.schedule, h, risk]
            for r in results
            for h, risk in zip(r.horizons, r.risks)
        ),
    )
    for r in results:
        manifest.record(
            f"a{r.case.capacity:g}_b{r.case.source:g}_{r.case.schedule}",
            "pass" if r.passed else "fail",
            fitted=r.fitted,
            predicted=r.predicted,
        )
    manifest.notes["exclude_smallest"] = config.rates.exclude_smallest
    return EXIT_OK if all(r.passed for r in results) else EXIT_FAILED


def cmd_validate(config: RunConfig, ctx: CommandContext, manifest: RunManifest) -> int:
    vs = config.validate
    if not config.schedules:
        raise RunConfigError("run.schedules must list at least one schedule for validate")
    if vs.recursion_noise_scale != 1.0:
        log.warning("recursion noise scaled by %g; this run is a negative control", vs.recursion_noise_scale)

    rows = []
    diverged_seeds = 0
    for spec in config.instances():
        inst = instance_name(spec)
        for sched in config.schedules_for(spec):
            rec = run_trajectory(
                spec, sched, config.steps, config.averaging, config.checkpoints,
                start_at_optimum=config.start_at_optimum,
                noise_var=spec.noise_var * vs.recursion_noise_scale,
                should_stop=ctx.should_stop,
            )
            mc = monte_carlo_risk(
                spec, sched, config.steps, 1, vs.seeds, config.checkpoints, config.averaging,
                seed=config.seed, start_at_optimum=config.start_at_optimum, jobs=ctx.jobs,
                should_stop=ctx.should_stop,
            )
            mc.write_csv(ctx.out_dir / inst / f"{sched.label}__monte_carlo.csv")
            rec.write_csv(ctx.out_dir / inst / f"{sched.label}__recursion.csv")
            diverged_seeds += len(mc.diverged_seeds)

            for label in rec.labels:
                z = z_scores(rec.column(label), mc.means[label], mc.stderrs[label])
                for i, step in enumerate(rec.steps):
                    expected = rec.columns[label][i]
                    if not math.isfinite(expected):
                        continue
                    rows.append([inst, sched.label, label, step, expected, mc.means[label][i], mc.stderrs[label][i], float(z[i])])

    tested = [r for r in rows if r[3] > 0]
    threshold = corrected_threshold(len(tested), vs.sigma_level)
    failures = [r for r in tested if not (abs(r[7]) <= threshold)]
    passed = not failures and diverged_seeds == 0

    write_table(
        ctx.out_dir / "validation.csv",
        ["instance", "schedule", "averaging", "step", "recursion", "mc_mean", "mc_stderr", "z", "pass"],
        ([*r, r[3] == 0 or abs(r[7]) <= threshold] for r in rows),
    )
    worst = max((abs(r[7]) for r in tested), default=0.0)
    log.info(
        "validation %s tests=%d threshold=%.3f worst|z|=%.3f failures=%d diverged_seeds=%d",
        "passed" if passed else "FAILED", len(tested), threshold, worst, len(failures), diverged_seeds,
    )
    manifest.record(
        "validation", "pass" if passed else "fail",
        tests=len(tested), threshold=threshold, worst_z=worst, failures=len(failures), diverged_seeds=diverged_seeds,
    )
    return EXIT_OK if passed else EXIT_FAILED


# domain checks that only run inside a command body
_CONFIG_ERRORS = (RunConfigError, ScheduleError, AveragingError, ProblemValidationError, SelectionError, TheoryDomainError)

_BODIES: dict[str, Callable[[RunConfig, CommandContext, RunManifest], int]] = {
    "simulate": cmd_simulate,
    "envelope": cmd_envelope,
    "rates": cmd_rates,
    "validate": cmd_validate,
}


def run_command(command: str, config: RunConfig, ctx: CommandContext) -> CommandResult:
    body = _BODIES.get(command)
    if body is None:
        raise ValueError(f"unknown command {command!r}; expected one of {', '.join(COMMANDS)}")

    try:
        prepare_output_dir(ctx.out_dir, overwrite=ctx.overwrite)
    except OSError as exc:
        log.error("output error: %s", exc)
        return CommandResult(command, EXIT_IO, ctx.out_dir)

    manifest = RunManifest(
        command=command,
        config=config.document,
        config_hash=config.config_hash,
        tool_version=__version__,
        git_describe=git_describe(),
        started_at=utc_now(),
    )
    started = time.perf_counter()
    log.info("%s started name=%s out=%s jobs=%d", command, config.name, ctx.out_dir, ctx.jobs)

    try:
        code = body(config, ctx, manifest)
        manifest.status = {EXIT_OK: "ok", EXIT_FAILED: "failed", EXIT_DIVERGED: "diverged"}.get(code, "error")
    except _CONFIG_ERRORS as exc:
        log.error("config error: %s", exc)
        code, manifest.status = EXIT_CONFIG, "config_error"
        manifest.notes["config_error"] = str(exc)
    except DivergenceError as exc:
        log.error("diverged: %s", exc)
        code, manifest.status = EXIT_DIVERGED, "diverged"
        manifest.notes["divergence"] = {"step": exc.step, "lr": exc.lr}
    except RunCancelled as exc:
        log.warning("cancelled: %s", exc)
        code, manifest.status = EXIT_CANCELLED, "cancelled"
    except OSError as exc:
        log.error("i/o error: %s", exc)
        code, manifest.status = EXIT_IO, "io_error"

    manifest.finished_at = utc_now()
    manifest.wall_time_s = round(time.perf_counter() - started, 3)
    try:
        manifest.write(ctx.out_dir)
    except OSError as exc:
        log.error("could not write manifest: %s", exc)
        code = EXIT_IO
    log.info("%s finished status=%s in %.2fs", command, manifest.status, manifest.wall_time_s)
    return CommandResult(command, code, ctx.out_dir, manifest, summary={"runs": manifest.runs})


__all__ = [
    "COMMANDS",
    "CommandContext",
    "CommandResult",
    "EXIT_CANCELLED",
    "EXIT_CONFIG",
    "EXIT_DIVERGED",
    "EXIT_FAILED",
    "EXIT_IO",
    "EXIT_OK",
    "OutputExistsError",
    "cmd_envelope",
    "cmd_rates",
    "cmd_simulate",
    "cmd_validate",
    "run_command",
]
