from __future__ import annotations

import logging
import math
import time
from dataclasses import dataclass, field
from pathlib import Path
from typing import Iterable, Sequence

import numpy as np
from scipy.stats import norm

from PyAnytimeLab.core.averaging import (
    AFTER_STEP,
    AveragingConfig,
    ema_retention,
    unique_configs,
    window_start,
)
from PyAnytimeLab.core.jobs import run_ordered, split_evenly
from PyAnytimeLab.core.outputs import write_table
from PyAnytimeLab.core.problem import ProblemSpec, Spectrum, build_spectrum, initial_excess_risk
from PyAnytimeLab.core.schedule import Schedule, ScheduleError, lr_values, schedule_to_dict
from PyAnytimeLab.core.trajectory import RunCancelled, StopCheck


log = logging.getLogger(__name__)

DIVERGENCE_FACTOR = 1e6
# elements of pre-drawn features held per chunk
_DRAW_BUDGET = 4_000_000


def seed_generators(seed: int) -> tuple[np.random.Generator, np.random.Generator]:
    features, noise = np.random.SeedSequence(int(seed)).spawn(2)
    return np.random.Generator(np.random.Philox(features)), np.random.Generator(np.random.Philox(noise))


@dataclass
class SgdRun:
    seeds: tuple[int, ...]
    batch_size: int
    w: np.ndarray
    t: int = 0
    ema: dict[str, np.ndarray] = field(default_factory=dict)
    ema_configs: dict[str, AveragingConfig] = field(default_factory=dict)
    feature_rngs: list[np.random.Generator] = field(default_factory=list, repr=False)
    noise_rngs: list[np.random.Generator] = field(default_factory=list, repr=False)

    @property
    def seed_count(self) -> int:
        return len(self.seeds)


def new_run(
    spectrum: Spectrum,
    seeds: Sequence[int],
    batch_size: int = 1,
    averaging_configs: Sequence[AveragingConfig] = (),
    *,
    start_at_optimum: bool = False,
) -> SgdRun:
    if int(batch_size) < 1:
        raise ValueError(f"batch_size must be >= 1 (got {batch_size})")
    if not seeds:
        raise ValueError("at least one seed is required")
    target = spectrum.target
    w0 = np.tile(target, (len(seeds), 1)) if start_at_optimum else np.zeros((len(seeds), spectrum.dimension))
    run = SgdRun(seeds=tuple(int(s) for s in seeds), batch_size=int(batch_size), w=w0)
    for config in averaging_configs:
        if config.is_ema:
            run.ema[config.label] = w0.copy()
            run.ema_configs[config.label] = config
    for seed in run.seeds:
        features, noise = seed_generators(seed)
        run.feature_rngs.append(features)
        run.noise_rngs.append(noise)
    return run


def draw_samples(run: SgdRun, dimension: int, steps: int) -> tuple[np.ndarray, np.ndarray]:
    shape = (steps, run.batch_size)
    g = np.stack([rng.standard_normal((*shape, dimension)) for rng in run.feature_rngs])
    eps = np.stack([rng.standard_normal(shape) for rng in run.noise_rngs])
    return g, eps


def sgd_step(
    run: SgdRun,
    spectrum: Spectrum,
    eta: float,
    noise_var: float,
    features: np.ndarray | None = None,
    noise: np.ndarray | None = None,
) -> SgdRun:
    """One minibatch step for every seed; `features` are standard-normal g, shape (S, B, d).

    x = √λ·g, y = ⟨x, w*⟩ + σ·ε, and the EMA vectors follow their update order.
    """
    if eta < 0.0:
        raise ValueError(f"step size must be >= 0 (got {eta})")
    if features is None or noise is None:
        g, eps = draw_samples(run, spectrum.dimension, 1)
        features = g[:, 0] if features is None else features
        noise = eps[:, 0] if noise is None else noise

    x = np.sqrt(spectrum.eigenvalues) * features
    diff = run.w - spectrum.target
    residual = np.einsum("sbd,sd->sb", x, diff) - math.sqrt(noise_var) * noise
    grad = np.einsum("sbd,sb->sd", x, residual) / run.batch_size
    w_new = run.w - eta * grad

    t = run.t + 1
    for label, config in run.ema_configs.items():
        rho = ema_retention(config.value, t)
        absorbed = w_new if config.update_order == AFTER_STEP else run.w
        run.ema[label] = rho * run.ema[label] + (1.0 - rho) * absorbed

    run.w = w_new
    run.t = t
    return run


def seed_risks(w: np.ndarray, spectrum: Spectrum) -> np.ndarray:
    diff = w - spectrum.target
    return 0.5 * np.sum(spectrum.eigenvalues * (diff * diff), axis=1)


@dataclass
class MonteCarloResult:
    steps: list[int]
    lrs: list[float]
    means: dict[str, list[float]]
    stderrs: dict[str, list[float]]
    seed_count: int
    diverged_seeds: list[int]
    schedule: dict = field(default_factory=dict)

    @property
    def labels(self) -> list[str]:
        return list(self.means)

    def header(self) -> list[str]:
        return [
            "step",
            "lr",
            *(f"excess_{label}" for label in self.means),
            "seed_count",
            *(f"stderr_{label}" for label in self.stderrs),
        ]

    def write_csv(self, path: Path) -> Path:
        rows = (
            [
                int(step),
                float(self.lrs[i]),
                *(float(col[i]) for col in self.means.values()),
                int(self.seed_count),
                *(float(col[i]) for col in self.stderrs.values()),
            ]
            for i, step in enumerate(self.steps)
        )
        return write_table(path, self.header(), rows)


class _TailSums:
    def __init__(self, configs: Sequence[AveragingConfig], checkpoints: Sequence[int]) -> None:
        self.reads_at: dict[int, list[tuple[str, int]]] = {}
        self.last_use: dict[int, int] = {}
        self.active: dict[int, np.ndarray] = {}
        for config in configs:
            if not config.is_tail:
                continue
            for c in checkpoints:
                s = window_start(config, c)
                if s is None:
                    continue
                self.reads_at.setdefault(c, []).append((config.label, s))
                self.last_use[s] = max(self.last_use.get(s, 0), c)

    def observe(self, t: int, w: np.ndarray) -> None:
        for total in self.active.values():
            total += w
        if t in self.last_use:
            self.active[t] = w.copy()

    def averages(self, t: int) -> list[tuple[str, np.ndarray]]:
        out = [(label, self.active[s] / float(t - s + 1)) for label, s in self.reads_at.get(t, ())]
        for s in [s for s, last in self.last_use.items() if last == t]:
            self.active.pop(s, None)
        return out


def _simulate_group(
    spectrum: Spectrum,
    sched: Schedule,
    n_steps: int,
    batch_size: int,
    seeds: Sequence[int],
    configs: Sequence[AveragingConfig],
    points: Sequence[int],
    noise_var: float,
    start_at_optimum: bool,
    should_stop: StopCheck | None,
) -> dict[str, np.ndarray]:
    run = new_run(spectrum, seeds, batch_size, configs, start_at_optimum=start_at_optimum)
    tails = _TailSums(configs, points)
    labels = ["last", *(c.label for c in configs)]
    out = {label: np.empty((len(points), len(seeds))) for label in labels}
    row = {p: i for i, p in enumerate(points)}

    def record(t: int) -> None:
        i = row[t]
        last = seed_risks(run.w, spectrum)
        out["last"][i] = last
        tail_values = dict(tails.averages(t)) if t > 0 else {}
        for config in configs:
            if config.is_ema:
                out[config.label][i] = seed_risks(run.ema[config.label], spectrum)
            elif config.is_tail:
                avg = tail_values.get(config.label)
                out[config.label][i] = seed_risks(avg, spectrum) if avg is not None else (last if t == 0 else np.nan)
            else:
                out[config.label][i] = last

    record(0)
    chunk = max(1, _DRAW_BUDGET // max(1, len(seeds) * batch_size * spectrum.dimension))
    t = 0
    with np.errstate(over="ignore", invalid="ignore"):
        while t < n_steps:
            steps = min(chunk, n_steps - t)
            g, eps = draw_samples(run, spectrum.dimension, steps)
            lrs = lr_values(sched, np.arange(t + 1, t + steps + 1, dtype=np.int64))
            for k in range(steps):
                if should_stop is not None and (t + 1) % 256 == 0 and should_stop():
                    raise RunCancelled(f"monte carlo cancelled at step {t + 1}")
                sgd_step(run, spectrum, float(lrs[k]), noise_var, g[:, k], eps[:, k])
                t += 1
                tails.observe(t, run.w)
                if t in row:
                    record(t)
    return out


def monte_carlo_risk(
    spec: ProblemSpec,
    sched: Schedule,
    n_steps: int,
    batch_size: int,
    n_seeds: int,
    checkpoints: Iterable[int] | None = None,
    averaging_configs: Sequence[AveragingConfig] = (),
    *,
    seed: int = 0,
    start_at_optimum: bool = False,
    jobs: int = 1,
    should_stop: StopCheck | None = None,
) -> MonteCarloResult:
    """Seed-averaged excess risk of real SGD at each checkpoint.

    Seeds are `seed, seed + 1, …`; groups of seeds run on the work queue and
    are reduced in seed order, so results do not depend on `jobs`.
    """
    n_steps = int(n_steps)
    n_seeds = int(n_seeds)
    if n_seeds < 2:
        raise ValueError(f"n_seeds must be >= 2 (got {n_seeds})")
    if sched.horizon_dependent and n_steps > int(sched.horizon):
        raise ScheduleError(f"run length N={n_steps} exceeds schedule horizon T={sched.horizon}")

    points = sorted({0, *(int(c) for c in (checkpoints or [n_steps]))})
    if points[-1] > n_steps or points[0] < 0:
        raise ValueError(f"checkpoints must lie in [0, {n_steps}]")

    spectrum = build_spectrum(spec)
    configs = [c for c in unique_configs(averaging_configs) if c.label != "last"]
    noise_var = float(spec.noise_var)
    seeds = [int(seed) + i for i in range(n_seeds)]

    started_at = time.perf_counter()
    groups = split_evenly(n_seeds, jobs)
    tasks = [
        (lambda grp=grp: _simulate_group(
            spectrum, sched, n_steps, batch_size, [seeds[i] for i in grp], configs, points,
            noise_var, start_at_optimum, should_stop,
        ))
        for grp in groups
    ]
    parts = run_ordered(tasks, jobs)
    risks = {label: np.concatenate([p[label] for p in parts], axis=1) for label in parts[0]}

    baseline = max(initial_excess_risk(spectrum) if not start_at_optimum else 0.0, noise_var, 1e-300)
    last = risks["last"]
    bad = ~np.isfinite(last) | (last > DIVERGENCE_FACTOR * baseline)
    diverged_mask = bad.any(axis=0)
    diverged = [seeds[i] for i in np.flatnonzero(diverged_mask)]
    if diverged:
        log.warning("monte carlo: %d of %d seeds diverged (first seed=%d)", len(diverged), n_seeds, diverged[0])

    keep = ~diverged_mask
    count = int(keep.sum())
    means: dict[str, list[float]] = {}
    stderrs: dict[str, list[float]] = {}
    for label, values in risks.items():
        kept = values[:, keep]
        if count >= 2:
            means[label] = np.mean(kept, axis=1).tolist()
            stderrs[label] = (np.std(kept, axis=1, ddof=1) / math.sqrt(count)).tolist()
        else:
            means[label] = [math.nan] * len(points)
            stderrs[label] = [math.nan] * len(points)

    lrs = [math.nan, *lr_values(sched, np.asarray(points[1:], dtype=np.int64)).tolist()] if len(points) > 1 else [math.nan]
    log.info(
        "monte carlo finished seeds=%d steps=%d batch=%d in %.2fs",
        n_seeds,
        n_steps,
        batch_size,
        time.perf_counter() - started_at,
    )
    return MonteCarloResult(
        steps=points,
        lrs=lrs,
        means=means,
        stderrs=stderrs,
        seed_count=count,
        diverged_seeds=diverged,
        schedule=schedule_to_dict(sched),
    )


def z_scores(expected: Sequence[float], means: Sequence[float], stderrs: Sequence[float]) -> np.ndarray:
    expected = np.asarray(expected, dtype=np.float64)
    means = np.asarray(means, dtype=np.float64)
    stderrs = np.asarray(stderrs, dtype=np.float64)
    delta = means - expected
    with np.errstate(divide="ignore", invalid="ignore"):
        z = delta / stderrs
    exact = stderrs == 0.0
    tiny = np.abs(delta) <= 1e-12 * np.maximum(1.0, np.abs(expected))
    z = np.where(exact & tiny, 0.0, z)
    z = np.where(exact & ~tiny, np.inf, z)
    return z


def corrected_threshold(n_tests: int, sigma_level: float = 3.0) -> float:
    n_tests = max(1, int(n_tests))
    alpha = 2.0 * float(norm.sf(sigma_level))
    return float(norm.isf(alpha / (2.0 * n_tests)))
