from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Callable, Iterable, Sequence

import numpy as np

from PyAnytimeLab.core.averaging import (
    AveragingConfig,
    TailWindowSet,
    ema_retention,
    ema_update,
    initial_averaged_moments,
    unique_configs,
)
from PyAnytimeLab.core.outputs import write_table
from PyAnytimeLab.core.problem import ProblemSpec, Spectrum, build_spectrum, doubled, initial_excess_risk
from PyAnytimeLab.core.recursion import (
    DivergenceError,
    MomentState,
    advance_moments,
    check_finite,
    initial_state,
    weighted_total,
)
from PyAnytimeLab.core.schedule import (
    EXPLICIT,
    Schedule,
    ScheduleError,
    lr_values,
    schedule_to_dict,
    with_base_lr,
    with_horizon,
)


log = logging.getLogger(__name__)

StopCheck = Callable[[], bool]

_LR_BLOCK = 4096
_STOP_POLL = 256


class RunCancelled(RuntimeError):
    pass


@dataclass
class RiskTrace:
    steps: list[int]
    lrs: list[float]
    columns: dict[str, list[float]]
    schedule: dict
    steps_run: int = 0
    moments: list[np.ndarray] | None = field(default=None, repr=False)

    @property
    def labels(self) -> list[str]:
        return list(self.columns)

    def header(self) -> list[str]:
        return ["step", "lr", *(f"excess_{label}" for label in self.columns)]

    def rows(self) -> list[list[float]]:
        out = []
        for i, step in enumerate(self.steps):
            out.append([step, self.lrs[i], *(col[i] for col in self.columns.values())])
        return out

    def column(self, label: str = "last") -> np.ndarray:
        return np.asarray(self.columns[label], dtype=np.float64)

    def at(self, step: int, label: str = "last") -> float:
        return float(self.columns[label][self.steps.index(int(step))])

    def final(self, label: str = "last") -> float:
        return float(self.columns[label][-1])

    def select(self, labels: Sequence[str]) -> "RiskTrace":
        keep = ["last", *(label for label in labels if label != "last")]
        return RiskTrace(
            steps=list(self.steps),
            lrs=list(self.lrs),
            columns={label: self.columns[label] for label in keep},
            schedule=self.schedule,
            steps_run=self.steps_run,
        )

    def write_csv(self, path: Path) -> Path:
        rows = ([int(r[0]), *(float(x) for x in r[1:])] for r in self.rows())
        return write_table(path, self.header(), rows)


def _check_checkpoints(checkpoints: Iterable[int] | None, n_steps: int) -> list[int]:
    if checkpoints is None:
        return [0, n_steps] if n_steps > 0 else [0]
    points = [int(c) for c in checkpoints]
    for prev, cur in zip(points, points[1:]):
        if cur <= prev:
            raise ValueError(f"checkpoints must be strictly increasing (got {prev} then {cur})")
    if points and (points[0] < 0 or points[-1] > n_steps):
        raise ValueError(f"checkpoints must lie in [0, {n_steps}] (got {points[0]}..{points[-1]})")
    if not points or points[0] != 0:
        points.insert(0, 0)
    return points


def _check_horizon(sched: Schedule, n_steps: int) -> None:
    if sched.horizon_dependent and n_steps > int(sched.horizon):
        raise ScheduleError(
            f"run length N={n_steps} exceeds schedule horizon T={sched.horizon} for kind={sched.kind}"
        )


def _lr_blocks(sched: Schedule, t_from: int, t_to: int):
    start = t_from
    while start <= t_to:
        stop = min(t_to, start + _LR_BLOCK - 1)
        yield start, lr_values(sched, np.arange(start, stop + 1, dtype=np.int64))
        start = stop + 1


def run_trajectory(
    spec: ProblemSpec,
    sched: Schedule,
    n_steps: int,
    averaging_configs: Sequence[AveragingConfig] = (),
    checkpoints: Iterable[int] | None = None,
    *,
    start_at_optimum: bool = False,
    noise_var: float | None = None,
    should_stop: StopCheck | None = None,
    record_moments: bool = False,
) -> RiskTrace:
    """Evolve the exact moment recursion for N steps and read risks at each checkpoint.

    `noise_var` overrides spec.noise_var (used for the bias/variance split and
    the validation test hook). Raises DivergenceError with the failing step.
    """
    n_steps = int(n_steps)
    if n_steps < 0:
        raise ValueError(f"N must be >= 0 (got {n_steps})")
    _check_horizon(sched, n_steps)
    points = _check_checkpoints(checkpoints, n_steps)
    point_set = set(points)

    spectrum = build_spectrum(spec)
    lam = spectrum.eigenvalues
    sigma2 = float(spec.noise_var if noise_var is None else noise_var)

    configs = [c for c in unique_configs(averaging_configs) if c.label != "last"]
    emas = [c for c in configs if c.is_ema]
    tails = TailWindowSet(lam, configs, points)
    needs_contraction = bool(emas) or not tails.empty

    state = initial_state(spectrum, start_at_optimum=start_at_optimum)
    m = state.m
    for config in emas:
        state.averaged[config.label] = initial_averaged_moments(m)

    r = weighted_total(lam, m)
    risk0 = 0.5 * r
    trace = RiskTrace(
        steps=[0],
        lrs=[math.nan],
        columns={"last": [risk0], **{c.label: [risk0] for c in configs}},
        schedule=schedule_to_dict(sched),
        moments=[m.copy()] if record_moments else None,
    )

    started_at = time.perf_counter()
    t = 0
    with np.errstate(over="ignore", invalid="ignore"):
        for block_start, lrs in _lr_blocks(sched, 1, n_steps):
            for i, eta in enumerate(lrs.tolist()):
                t = block_start + i
                if should_stop is not None and t % _STOP_POLL == 0 and should_stop():
                    raise RunCancelled(f"trajectory cancelled at step {t}")

                m_new, _r_old = advance_moments(m, lam, eta, sigma2)
                r = weighted_total(lam, m_new)
                check_finite(r, step=t, lr=eta)

                if needs_contraction:
                    contraction = 1.0 - eta * lam
                    for config in emas:
                        block = state.averaged[config.label]
                        rho = ema_retention(config.value, t)
                        block.v, block.c = ema_update(
                            block.v, block.c, m, m_new, contraction, rho, config.update_order
                        )
                    tails.observe(t, m_new, r, contraction)

                m = m_new
                if record_moments:
                    trace.moments.append(m.copy())

                if t in point_set:
                    trace.steps.append(t)
                    trace.lrs.append(eta)
                    trace.columns["last"].append(0.5 * r)
                    for config in configs:
                        if config.is_ema:
                            value = 0.5 * weighted_total(lam, state.averaged[config.label].v)
                        elif config.is_tail:
                            value = tails.results.get((config.label, t), math.nan)
                        else:
                            value = 0.5 * r
                        trace.columns[config.label].append(value)

    trace.steps_run = t
    log.info(
        "trajectory finished kind=%s steps=%d d=%d in %.2fs",
        sched.kind,
        t,
        spectrum.dimension,
        time.perf_counter() - started_at,
    )
    return trace


def advance(
    state: MomentState,
    spectrum: Spectrum,
    sched: Schedule,
    until: int,
    noise_var: float,
    *,
    snapshots: Iterable[int] = (),
    should_stop: StopCheck | None = None,
) -> tuple[MomentState, dict[int, MomentState]]:
    until = int(until)
    if until < state.t:
        raise ValueError(f"cannot advance backwards from t={state.t} to t={until}")
    _check_horizon(sched, until)
    wanted = {int(s) for s in snapshots}
    kept: dict[int, MomentState] = {}
    if state.t in wanted:
        kept[state.t] = state.copy()

    lam = spectrum.eigenvalues
    m = state.m
    t = state.t
    with np.errstate(over="ignore", invalid="ignore"):
        for block_start, lrs in _lr_blocks(sched, state.t + 1, until):
            for i, eta in enumerate(lrs.tolist()):
                t = block_start + i
                if should_stop is not None and t % _STOP_POLL == 0 and should_stop():
                    raise RunCancelled(f"trajectory cancelled at step {t}")
                m, _r = advance_moments(m, lam, eta, noise_var)
                check_finite(float(np.sum(lam * m)), step=t, lr=eta)
                if t in wanted:
                    kept[t] = MomentState(t=t, m=m.copy())
    return MomentState(t=t, m=m), kept


def _trial_diverges(spectrum: Spectrum, sched: Schedule, trial_steps: int, noise_var: float) -> bool:
    lam = spectrum.eigenvalues
    m = np.array(spectrum.m0, dtype=np.float64)
    limit = 100.0 * (initial_excess_risk(spectrum) + noise_var)
    with np.errstate(over="ignore", invalid="ignore"):
        for eta in lr_values(sched, np.arange(1, trial_steps + 1, dtype=np.int64)).tolist():
            m, _r = advance_moments(m, lam, eta, noise_var)
            risk = 0.5 * float(np.sum(lam * m))
            if not math.isfinite(risk) or risk > limit:
                return True
    return False


def stability_threshold(
    spec: ProblemSpec,
    sched: Schedule,
    *,
    trial_steps: int = 500,
    iters: int = 12,
) -> float:
    """Largest base step size whose short trial run stays bounded (bisection).

    Horizon-bearing schedules are tried with their horizon set to the trial
    length. Returns 0.0 when every trial diverges.
    """
    if sched.kind == EXPLICIT:
        raise ScheduleError("stability_threshold needs a schedule with a free base_lr (got kind=explicit)")
    spectrum = build_spectrum(spec)
    noise_var = float(spec.noise_var)
    trial_steps = max(1, int(trial_steps))

    def diverges(eta: float) -> bool:
        if eta <= 0.0:
            return False
        trial = with_horizon(with_base_lr(sched, eta), trial_steps)
        return _trial_diverges(spectrum, trial, trial_steps, noise_var)

    lo = 0.0
    hi = 4.0 / float(spectrum.eigenvalues[0])
    if not diverges(hi):
        return hi
    for _ in range(max(1, int(iters))):
        mid = 0.5 * (lo + hi)
        if diverges(mid):
            hi = mid
        else:
            lo = mid
    log.debug("stability threshold kind=%s lr=%.6g", sched.kind, lo)
    return lo


@dataclass
class BiasVarianceSplit:
    bias: RiskTrace
    variance: RiskTrace
    noise_var: float

    def recombine(self, label: str = "last", noise_var: float | None = None) -> np.ndarray:
        sigma2 = self.noise_var if noise_var is None else float(noise_var)
        return self.bias.column(label) + sigma2 * self.variance.column(label)


def decompose_bias_variance(
    spec: ProblemSpec,
    sched: Schedule,
    n_steps: int,
    averaging_configs: Sequence[AveragingConfig] = (),
    checkpoints: Iterable[int] | None = None,
) -> BiasVarianceSplit:
    points = list(checkpoints) if checkpoints is not None else None
    bias = run_trajectory(spec, sched, n_steps, averaging_configs, points, noise_var=0.0)
    variance = run_trajectory(
        spec, sched, n_steps, averaging_configs, points, start_at_optimum=True, noise_var=1.0
    )
    return BiasVarianceSplit(bias=bias, variance=variance, noise_var=float(spec.noise_var))


@dataclass(frozen=True)
class TruncationReport:
    steps: tuple[int, ...]
    risk_d: tuple[float, ...]
    risk_2d: tuple[float, ...]
    tail_mass: float

    @property
    def max_change(self) -> float:
        return max(b - a for a, b in zip(self.risk_d, self.risk_2d))

    @property
    def within_bound(self) -> bool:
        slack = 1e-12
        return all(
            -slack * max(1.0, abs(a)) <= b - a <= 2.0 * self.tail_mass + slack
            for a, b in zip(self.risk_d, self.risk_2d)
        )


def truncation_check(
    spec: ProblemSpec,
    sched: Schedule,
    n_steps: int,
    checkpoints: Iterable[int] | None = None,
) -> TruncationReport:
    points = list(checkpoints) if checkpoints is not None else None
    small = run_trajectory(spec, sched, n_steps, (), points)
    big_spec = doubled(spec)
    big = run_trajectory(big_spec, sched, n_steps, (), points)

    big_spectrum = build_spectrum(big_spec)
    tail_mass = 0.5 * float(np.sum(big_spectrum.signal[spec.dimension:]))
    report = TruncationReport(
        steps=tuple(small.steps),
        risk_d=tuple(small.columns["last"]),
        risk_2d=tuple(big.columns["last"]),
        tail_mass=tail_mass,
    )
    if not report.within_bound:
        log.warning(
            "truncation not converged d=%d max_change=%.3e tail_mass=%.3e",
            spec.dimension,
            report.max_change,
            tail_mass,
        )
    return report


__all__ = [
    "BiasVarianceSplit",
    "DivergenceError",
    "RiskTrace",
    "RunCancelled",
    "TruncationReport",
    "advance",
    "decompose_bias_variance",
    "run_trajectory",
    "stability_threshold",
    "truncation_check",
]
